"""Dataset synthesis, binary ingestion (IDX / CIFAR-binary), augmentation.

Datasets are immutable after construction: arrays are marked read-only, and
every transform returns a new Dataset. All randomness flows through seeded
generators, so a (args, seed) pair pins the result bit-exactly.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ParseError, ShapeError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixels


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    stats: dict | None = None
    k: int = 2

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError("inputs and labels disagree on n")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ContractError("labels outside [0, k-1]")
        self.inputs.flags.writeable = False
        self.labels.flags.writeable = False

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def flat_inputs(self) -> np.ndarray:
        return self.inputs.reshape(self.n, -1)


def compute_stats(inputs: np.ndarray) -> dict:
    """Per-feature mean/std over the sample axis, std floored at 1e-8."""
    mean = inputs.mean(axis=0)
    std = np.maximum(inputs.std(axis=0), 1e-8)
    return {"mean": mean, "std": std}


def standardize(ds: Dataset, stats: dict | None = None) -> Dataset:
    """Apply (x - mean)/std; stats default to the dataset's own."""
    st = stats if stats is not None else compute_stats(ds.inputs)
    out = (ds.inputs - st["mean"]) / st["std"]
    return Dataset(out, ds.labels.copy(), ds.split, st, ds.k)


def synth_blobs(n: int, d: int, K: int, separation: float, seed: int, shape=None) -> Dataset:
    """K unit-covariance Gaussian clusters, all pairwise mean distances equal
    to `separation`, balanced labels (first n mod K classes get one extra)."""
    if not (n >= K >= 2):
        raise ContractError("need n >= K >= 2")
    if d < K:
        raise ConfigError("need d >= K to place equidistant means")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, K)))
    # orthonormal u_i scaled so ||m_i - m_j|| == separation for every pair
    means = (separation / np.sqrt(2.0)) * q.T
    counts = np.full(K, n // K)
    counts[: n % K] += 1
    labels = np.repeat(np.arange(K), counts)
    inputs = means[labels] + rng.normal(size=(n, d))
    perm = rng.permutation(n)
    inputs, labels = inputs[perm], labels[perm]
    if shape is not None:
        if int(np.prod(shape)) != d:
            raise ShapeError(f"shape {shape} does not hold d={d} features")
        inputs = inputs.reshape((n,) + tuple(shape))
    return Dataset(inputs, labels, "train", None, K)


# Seven-segment layout on a 28x28 canvas; segments are thick bars so the
# glyphs survive 2x mean-pooling and +-3 pixel jitter.
_SEGMENT_BOXES = {
    "A": (slice(4, 7), slice(8, 20)),
    "B": (slice(4, 14), slice(17, 20)),
    "C": (slice(14, 24), slice(17, 20)),
    "D": (slice(21, 24), slice(8, 20)),
    "E": (slice(14, 24), slice(8, 11)),
    "F": (slice(4, 14), slice(8, 11)),
    "G": (slice(12, 15), slice(8, 20)),
}
_DIGIT_SEGMENTS = (
    "ABCDEF", "BC", "ABGED", "ABGCD", "FGBC",
    "AFGCD", "AFGECD", "ABC", "ABCDEFG", "ABCDFG",
)


def _digit_glyph(digit: int) -> np.ndarray:
    img = np.zeros((28, 28))
    for seg in _DIGIT_SEGMENTS[digit]:
        img[_SEGMENT_BOXES[seg]] = 1.0
    return img


def synth_digits(n: int, seed: int) -> Dataset:
    """Synthetic digit images: jittered seven-segment glyphs rendered at
    28x28 and mean-pooled down to 14x14, plus pixel noise. k=10, shape
    (1, 14, 14), balanced only in expectation (labels drawn uniformly)."""
    if n < 1:
        raise ContractError("need n >= 1")
    glyphs = [_digit_glyph(d) for d in range(10)]
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    inputs = np.empty((n, 1, 14, 14))
    for i, lab in enumerate(labels):
        dy, dx = rng.integers(-3, 4, size=2)
        shifted = np.zeros((28, 28))
        ys, xs = slice(max(0, dy), min(28, 28 + dy)), slice(max(0, dx), min(28, 28 + dx))
        yt, xt = slice(max(0, -dy), min(28, 28 - dy)), slice(max(0, -dx), min(28, 28 - dx))
        shifted[ys, xs] = glyphs[lab][yt, xt]
        shifted *= rng.uniform(0.7, 1.3)
        small = shifted.reshape(14, 2, 14, 2).mean(axis=(1, 3))
        small += rng.normal(0.0, 0.1, size=(14, 14))
        inputs[i, 0] = small
    return Dataset(inputs, labels, "train", None, 10)


def make_digit_splits(n_train: int, n_test: int, seed: int):
    """Train/test digit images standardized with the train split's global
    mean/std (one scale for all pixels; backgrounds carry only noise, so
    per-pixel stats would blow the quiet pixels up)."""
    train = synth_digits(n_train, seed * 2 + 1)
    test = synth_digits(n_test, seed * 2 + 2)
    stats = {"mean": train.inputs.mean(), "std": train.inputs.std()}
    train = Dataset((train.inputs - stats["mean"]) / stats["std"], train.labels.copy(), "train", stats, 10)
    test = Dataset((test.inputs - stats["mean"]) / stats["std"], test.labels.copy(), "test", stats, 10)
    return train, test


def make_blob_splits(n_train: int, n_test: int, d: int, K: int, separation: float, seed: int, shape=None):
    """Train/test pair drawn around shared means; both standardized with the
    train split's statistics."""
    ss = np.random.SeedSequence(seed)
    s_means, s_train, s_test = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    rng = np.random.default_rng(s_means)
    q, _ = np.linalg.qr(rng.normal(size=(d, K)))
    means = (separation / np.sqrt(2.0)) * q.T

    def draw(n, s, split):
        r = np.random.default_rng(s)
        counts = np.full(K, n // K)
        counts[: n % K] += 1
        labels = np.repeat(np.arange(K), counts)
        inputs = means[labels] + r.normal(size=(n, d))
        perm = r.permutation(n)
        inputs, labels = inputs[perm], labels[perm]
        if shape is not None:
            inputs = inputs.reshape((n,) + tuple(shape))
        return Dataset(inputs, labels, split, None, K)

    train = draw(n_train, s_train, "train")
    test = draw(n_test, s_test, "test")
    stats = compute_stats(train.inputs)
    return standardize(train, stats), standardize(test, stats)


def gaussian_noise_inputs(n: int, shape, sigma: float, seed: int) -> Dataset:
    """Pure-noise inputs for the data-dependence control; labels are dummies."""
    if sigma <= 0:
        raise ContractError("sigma must be positive")
    rng = np.random.default_rng(seed)
    inputs = rng.normal(0.0, sigma, size=(n,) + tuple(shape))
    return Dataset(inputs, np.zeros(n, dtype=np.int64), "train", None, 1)


def subsample(ds: Dataset, n_sub: int, seed: int, stratified: bool = False) -> Dataset:
    """Uniform sample without replacement; stratified keeps per-class counts
    within one of proportional (largest-remainder rounding)."""
    if n_sub <= 0:
        raise ContractError("n_sub must be positive")
    if n_sub > ds.n:
        raise ContractError(f"n_sub={n_sub} exceeds dataset size {ds.n}")
    rng = np.random.default_rng(seed)
    if not stratified:
        idx = rng.choice(ds.n, size=n_sub, replace=False)
    else:
        quota = {}
        fracs = []
        total = 0
        for c in range(ds.k):
            exact = n_sub * np.sum(ds.labels == c) / ds.n
            quota[c] = int(np.floor(exact))
            total += quota[c]
            fracs.append((exact - quota[c], c))
        for _, c in sorted(fracs, reverse=True)[: n_sub - total]:
            quota[c] += 1
        parts = []
        for c in range(ds.k):
            pool = np.flatnonzero(ds.labels == c)
            parts.append(rng.choice(pool, size=quota[c], replace=False))
        idx = rng.permutation(np.concatenate(parts))
    return Dataset(ds.inputs[idx].copy(), ds.labels[idx].copy(), ds.split, ds.stats, ds.k)


def _block_mean(images: np.ndarray, factor: int) -> np.ndarray:
    n, c, h, w = images.shape
    if h % factor or w % factor:
        raise ConfigError(f"downsample factor {factor} does not divide {h}x{w}")
    return images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def _parse_idx(raw: bytes, path: str):
    if len(raw) < 4:
        raise ParseError(f"{path}: truncated header, {4 - len(raw)} bytes missing")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGE_MAGIC:
        if len(raw) < 16:
            raise ParseError(f"{path}: truncated dims, {16 - len(raw)} bytes missing")
        n, rows, cols = struct.unpack(">III", raw[4:16])
        need = 16 + n * rows * cols
        if len(raw) < need:
            raise ParseError(f"{path}: truncated payload, {need - len(raw)} bytes missing")
        arr = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
        return arr.reshape(n, 1, rows, cols)
    if magic == IDX_LABEL_MAGIC:
        if len(raw) < 8:
            raise ParseError(f"{path}: truncated dims, {8 - len(raw)} bytes missing")
        (n,) = struct.unpack(">I", raw[4:8])
        if len(raw) < 8 + n:
            raise ParseError(f"{path}: truncated payload, {8 + n - len(raw)} bytes missing")
        return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    raise ParseError(f"{path}: bad IDX magic 0x{magic:08x}")


def load_binary_images(path, fmt: str, labels_path=None, downsample: int = 1,
                       apply_standardization: bool = True, split: str = "train") -> Dataset:
    """Parse an image corpus from disk into a Dataset.

    fmt="idx": `path` holds images (magic 0x803), optional `labels_path`
    holds labels (magic 0x801). fmt="cifar_bin": fixed 3073-byte records.
    Pixels map to f64 in [0,1]; per-feature standardization is applied unless
    disabled.
    """
    raw = Path(path).read_bytes()
    if fmt == "idx":
        images = _parse_idx(raw, str(path))
        if not isinstance(images, np.ndarray) or images.ndim != 4:
            raise ParseError(f"{path}: expected an image IDX file")
        if labels_path is not None:
            labels = _parse_idx(Path(labels_path).read_bytes(), str(labels_path))
            if labels.ndim != 1:
                raise ParseError(f"{labels_path}: expected a label IDX file")
            if labels.shape[0] != images.shape[0]:
                raise ParseError("image and label counts disagree")
        else:
            labels = np.zeros(images.shape[0], dtype=np.int64)
    elif fmt == "cifar_bin":
        if len(raw) % CIFAR_RECORD:
            missing = CIFAR_RECORD - len(raw) % CIFAR_RECORD
            raise ParseError(f"{path}: truncated record, {missing} bytes missing")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = rec[:, 0].astype(np.int64)
        if labels.size and labels.max() > 9:
            raise ParseError(f"{path}: label {labels.max()} out of range [0, 9]")
        images = rec[:, 1:].reshape(-1, 3, 32, 32)
    else:
        raise ConfigError(f"unknown format {fmt!r}")
    x = images.astype(np.float64) / 255.0
    if downsample > 1:
        x = _block_mean(x, downsample)
    k = int(labels.max()) + 1 if labels.size else 1
    ds = Dataset(x, labels, split, None, max(k, 1))
    return standardize(ds) if apply_standardization else ds


def hflip(batch: np.ndarray) -> np.ndarray:
    return batch[..., ::-1].copy()


def padcrop(batch: np.ndarray, offsets: np.ndarray, pad: int = 4) -> np.ndarray:
    """Crop each image at its own offset from a zero-padded canvas."""
    n, c, h, w = batch.shape
    canvas = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    canvas[:, :, pad : pad + h, pad : pad + w] = batch
    out = np.empty_like(batch)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = canvas[i, :, dy : dy + h, dx : dx + w]
    return out


def augment(batch: np.ndarray, kind: str, seed: int) -> np.ndarray:
    """Per-image random horizontal flip (p=0.5) then 4px pad-and-crop.

    Draw order is fixed (flips first, then offsets) so a seed pins the
    transform exactly.
    """
    if kind != "flip_padcrop4":
        raise ConfigError(f"unknown augmentation {kind!r}")
    if batch.ndim != 4:
        raise ContractError("augmentation expects (n, c, h, w) batches")
    rng = np.random.default_rng(seed)
    flips = rng.random(batch.shape[0]) < 0.5
    offsets = rng.integers(0, 9, size=(batch.shape[0], 2))
    out = batch.copy()
    out[flips] = hflip(out[flips])
    return padcrop(out, offsets)
