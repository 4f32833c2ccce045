"""Flat parameter vectors with a named segment layout.

A ParamVector is a model's full parameter set viewed as one float64 vector.
Linear-space arithmetic (interpolation, norms, masking) requires identical
layouts; the layout is a tuple of (name, shape, offset, tag) segments with
tag in {"weight", "bias", "norm"}."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import LayoutError, ShapeError


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int
    tag: str

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


Layout = tuple[Segment, ...]


def build_layout(entries) -> Layout:
    """entries: iterable of (name, shape, tag); offsets assigned in order."""
    segs = []
    offset = 0
    for name, shape, tag in entries:
        seg = Segment(name, tuple(int(s) for s in shape), offset, tag)
        segs.append(seg)
        offset += seg.size
    return tuple(segs)


def layout_size(layout: Layout) -> int:
    if not layout:
        return 0
    last = layout[-1]
    return last.offset + last.size


class ParamVector:
    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: Layout):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size != layout_size(layout):
            raise ShapeError(
                f"ParamVector: {values.size} values vs layout size {layout_size(layout)}"
            )
        self.values = values
        self.layout = layout

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(layout_size(layout)), layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.offset : seg.offset + seg.size].reshape(seg.shape)
        raise KeyError(name)

    def segments(self) -> Iterator[tuple[Segment, np.ndarray]]:
        for seg in self.layout:
            yield seg, self.values[seg.offset : seg.offset + seg.size].reshape(seg.shape)

    def __len__(self) -> int:
        return self.values.size

    # -- linear-space arithmetic ------------------------------------------
    def _check(self, other: "ParamVector"):
        if self.layout != other.layout:
            raise LayoutError("ParamVector layouts differ")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, c: float) -> "ParamVector":
        return ParamVector(self.values * float(c), self.layout)

    __rmul__ = __mul__

    def dot(self, other: "ParamVector") -> float:
        self._check(other)
        return float(self.values @ other.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def masked(self, flags: np.ndarray) -> "ParamVector":
        if flags.shape != self.values.shape:
            raise ShapeError("mask length does not match parameter count")
        return ParamVector(self.values * flags, self.layout)

    def allclose(self, other: "ParamVector", rtol=0.0, atol=0.0) -> bool:
        self._check(other)
        return np.allclose(self.values, other.values, rtol=rtol, atol=atol)


def lerp(a: ParamVector, b: ParamVector, t: float) -> ParamVector:
    """(1-t)*a + t*b."""
    a._check(b)
    return ParamVector((1.0 - t) * a.values + t * b.values, a.layout)
