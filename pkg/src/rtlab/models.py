"""Encoder + projector model family with the L2-bottleneck head.

A model is a pair (encoder, projector). The encoder maps inputs to an
embedding of dimension ``embed_dim``; the projector applies a small GELU MLP
(norm-free) followed by the bottleneck head

    x -> V_n^T (W^T x + b) / ||W^T x + b||_2,   ||V_n[:, i]||_2 = 1,

where each of the three head sub-steps (weight normalization of V, the first
linear layer W, the feature normalization) can be disabled independently.

Parameters live in a flat ParamVector with a fixed, documented segment order
so that plane arithmetic and checkpointing round-trip exactly. Batch-norm
running statistics are state, not parameters: they are kept outside the
ParamVector and carried on the ModelState.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .params import ParamVector, build_layout

ENCODER_KINDS = ("mlp", "small_cnn", "small_cnn_residual")
NORM_KINDS = ("batch", "layer", "identity")


@dataclass
class ModelSpec:
    """Static architecture description; a pure value object.

    encoder_widths means hidden widths for the mlp and per-block channel
    counts for the cnn variants.
    """

    encoder_kind: str = "mlp"
    encoder_widths: tuple = (256, 128)
    embed_dim: int = 64
    norm_kind: str = "batch"
    input_shape: tuple = (1, 14, 14)
    hidden_dims: tuple = (256, 256)
    bottleneck_dim: int = 32
    out_dim: int = 4096
    use_weight_norm: bool = True
    use_first_linear: bool = True
    use_feature_norm: bool = True

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder_kind {self.encoder_kind!r}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"unknown norm_kind {self.norm_kind!r}")
        if any(w <= 0 for w in self.encoder_widths) or self.embed_dim <= 0:
            raise ConfigError("encoder widths and embed_dim must be positive")
        if self.bottleneck_dim <= 0 or self.out_dim <= 0:
            raise ConfigError("bottleneck_dim and out_dim must be positive")
        if self.encoder_kind != "mlp" and len(self.input_shape) != 3:
            raise ConfigError("cnn encoders need a (channels, height, width) input_shape")
        if self.use_first_linear and self.out_dim <= self.bottleneck_dim:
            warnings.warn(
                "out_dim <= bottleneck_dim: head output is not an expansion",
                stacklevel=2,
            )

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def head_in_dim(self) -> int:
        """Width of the vector fed to the final V matrix."""
        pre = self.hidden_dims[-1] if self.hidden_dims else self.embed_dim
        return self.bottleneck_dim if self.use_first_linear else pre

    def to_dict(self) -> dict:
        return {
            "encoder_kind": self.encoder_kind,
            "encoder_widths": list(self.encoder_widths),
            "embed_dim": self.embed_dim,
            "norm_kind": self.norm_kind,
            "input_shape": list(self.input_shape),
            "hidden_dims": list(self.hidden_dims),
            "bottleneck_dim": self.bottleneck_dim,
            "out_dim": self.out_dim,
            "use_weight_norm": self.use_weight_norm,
            "use_first_linear": self.use_first_linear,
            "use_feature_norm": self.use_feature_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _encoder_entries(spec: ModelSpec):
    entries = []
    norm = spec.norm_kind != "identity"
    if spec.encoder_kind == "mlp":
        dims = (spec.input_dim,) + spec.encoder_widths
        for i in range(len(spec.encoder_widths)):
            entries.append((f"enc.lin{i}.w", (dims[i], dims[i + 1]), "weight"))
            entries.append((f"enc.lin{i}.b", (dims[i + 1],), "bias"))
            if norm:
                entries.append((f"enc.norm{i}.gamma", (dims[i + 1],), "norm"))
                entries.append((f"enc.norm{i}.beta", (dims[i + 1],), "norm"))
        last = dims[-1]
    else:
        c_prev = spec.input_shape[0]
        residual = spec.encoder_kind == "small_cnn_residual"
        for i, c in enumerate(spec.encoder_widths):
            entries.append((f"enc.block{i}.conv.w", (c, c_prev, 3, 3), "weight"))
            entries.append((f"enc.block{i}.conv.b", (c,), "bias"))
            if norm:
                entries.append((f"enc.block{i}.norm.gamma", (c,), "norm"))
                entries.append((f"enc.block{i}.norm.beta", (c,), "norm"))
            if residual:
                entries.append((f"enc.block{i}.conv2.w", (c, c, 3, 3), "weight"))
                entries.append((f"enc.block{i}.conv2.b", (c,), "bias"))
                if norm:
                    entries.append((f"enc.block{i}.norm2.gamma", (c,), "norm"))
                    entries.append((f"enc.block{i}.norm2.beta", (c,), "norm"))
            c_prev = c
        last = c_prev
    entries.append(("enc.out.w", (last, spec.embed_dim), "weight"))
    entries.append(("enc.out.b", (spec.embed_dim,), "bias"))
    return entries


def _projector_entries(spec: ModelSpec):
    entries = []
    dims = (spec.embed_dim,) + spec.hidden_dims
    for i in range(len(spec.hidden_dims)):
        entries.append((f"proj.hid{i}.w", (dims[i], dims[i + 1]), "weight"))
        entries.append((f"proj.hid{i}.b", (dims[i + 1],), "bias"))
    if spec.use_first_linear:
        entries.append(("proj.first.w", (dims[-1], spec.bottleneck_dim), "weight"))
        entries.append(("proj.first.b", (spec.bottleneck_dim,), "bias"))
    entries.append(("proj.last.v", (spec.head_in_dim, spec.out_dim), "weight"))
    return entries


def param_layout(spec: ModelSpec):
    return build_layout(_encoder_entries(spec) + _projector_entries(spec))


def norm_layer_names(spec: ModelSpec):
    """Names of normalization sites, in forward order."""
    names = []
    for seg in param_layout(spec):
        if seg.name.endswith(".gamma"):
            names.append(seg.name[: -len(".gamma")])
    return names


@dataclass
class ModelState:
    spec: ModelSpec
    params: ParamVector
    running_stats: dict = field(default_factory=dict)
    mode: str = "train"

    def copy(self) -> "ModelState":
        rs = {k: {"mean": v["mean"].copy(), "var": v["var"].copy()} for k, v in self.running_stats.items()}
        return ModelState(self.spec, self.params.copy(), rs, self.mode)

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def encode(self, x) -> np.ndarray:
        with T.no_grad():
            out = encoder_forward(self.spec, param_tensors(self.params), self.running_stats, T.Tensor(x), self.mode)
        return out.data

    def forward(self, x) -> np.ndarray:
        with T.no_grad():
            tensors = param_tensors(self.params)
            h = encoder_forward(self.spec, tensors, self.running_stats, T.Tensor(x), self.mode)
            out = bottleneck_forward(self.spec, tensors, h)
        return out.data


def init_running_stats(spec: ModelSpec) -> dict:
    if spec.norm_kind != "batch":
        return {}
    stats = {}
    for seg in param_layout(spec):
        if seg.name.endswith(".gamma"):
            c = seg.shape[0]
            stats[seg.name[: -len(".gamma")]] = {
                "mean": np.zeros(c, dtype=np.float64),
                "var": np.ones(c, dtype=np.float64),
            }
    return stats


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until every entry is inside +-bound*std."""
    out = rng.normal(0.0, std, size=shape)
    lim = bound * std
    bad = np.abs(out) > lim
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > lim
    return out


def _fan_in(name: str, shape) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def init_params(spec: ModelSpec, seed: int) -> ModelState:
    """Kaiming-init encoder, truncated-normal projector, zero biases.

    Pure function of (spec, seed): segment values are drawn in layout order
    from a single generator.
    """
    layout = param_layout(spec)
    pv = ParamVector.zeros(layout)
    rng = np.random.default_rng(seed)
    for seg in layout:
        view = pv.segment(seg.name)
        if seg.tag == "weight":
            if seg.name.startswith("enc."):
                std = math.sqrt(2.0 / _fan_in(seg.name, seg.shape))
                view[...] = rng.normal(0.0, std, size=seg.shape)
            else:
                view[...] = trunc_normal(rng, seg.shape)
        elif seg.tag == "norm" and seg.name.endswith(".gamma"):
            view[...] = 1.0
        # biases, betas stay 0
    return ModelState(spec, pv, init_running_stats(spec))


def param_tensors(pv: ParamVector, requires_grad: bool = False) -> dict:
    """Materialize each segment as a Tensor keyed by segment name."""
    out = {}
    for seg in pv.layout:
        arr = pv.values[seg.offset : seg.offset + seg.size].reshape(seg.shape).copy()
        out[seg.name] = T.Tensor(arr, requires_grad=requires_grad, validate=False)
    return out


def grad_vector(pv: ParamVector, tensors: dict) -> ParamVector:
    """Collect tensor gradients back into a flat vector in layout order."""
    g = ParamVector.zeros(pv.layout)
    for seg in pv.layout:
        t = tensors[seg.name]
        if t.grad is not None:
            g.values[seg.offset : seg.offset + seg.size] = t.grad.ravel()
    return g


def _apply_norm(spec: ModelSpec, tensors, running_stats, name: str, h, mode: str, bn_momentum):
    if spec.norm_kind == "identity":
        return h
    gamma = tensors[name + ".gamma"]
    beta = tensors[name + ".beta"]
    if spec.norm_kind == "layer":
        return T.layer_norm(h, gamma, beta)
    rs = running_stats[name]
    return T.batch_norm(
        h, gamma, beta, rs["mean"], rs["var"],
        training=(mode == "train"), momentum=bn_momentum,
    )


def encoder_forward(spec: ModelSpec, tensors: dict, running_stats: dict, x, mode: str,
                    bn_momentum: float = 0.1):
    """Map a batch to embeddings of dimension spec.embed_dim.

    In train mode batch-norm sites consume batch statistics and update the
    running_stats dict in place (blended at bn_momentum); eval mode reads
    running stats and mutates nothing.
    """
    if x.shape[1:] != tuple(spec.input_shape) and not (
        spec.encoder_kind == "mlp" and x.ndim == 2 and x.shape[1] == spec.input_dim
    ):
        raise ShapeError(f"batch shape {x.shape[1:]} does not match input_shape {spec.input_shape}")
    if spec.encoder_kind == "mlp":
        h = T.flatten(x) if x.ndim > 2 else x
        for i in range(len(spec.encoder_widths)):
            h = T.bias_add(T.matmul(h, tensors[f"enc.lin{i}.w"]), tensors[f"enc.lin{i}.b"])
            h = _apply_norm(spec, tensors, running_stats, f"enc.norm{i}", h, mode, bn_momentum)
            h = T.relu(h)
    else:
        residual = spec.encoder_kind == "small_cnn_residual"
        h = x
        for i in range(len(spec.encoder_widths)):
            h = T.bias_add(T.conv2d(h, tensors[f"enc.block{i}.conv.w"], stride=1, padding=1), tensors[f"enc.block{i}.conv.b"])
            h = _apply_norm(spec, tensors, running_stats, f"enc.block{i}.norm", h, mode, bn_momentum)
            h = T.relu(h)
            if residual:
                y = T.bias_add(T.conv2d(h, tensors[f"enc.block{i}.conv2.w"], stride=1, padding=1), tensors[f"enc.block{i}.conv2.b"])
                y = _apply_norm(spec, tensors, running_stats, f"enc.block{i}.norm2", y, mode, bn_momentum)
                h = T.relu(T.add(y, h))
            h = T.maxpool2d(h)
        h = T.spatial_mean(h)
    return T.bias_add(T.matmul(h, tensors["enc.out.w"]), tensors["enc.out.b"])


def weight_normalize(v, eps: float = 1e-8):
    """Scale every column of V to unit norm; differentiable, idempotent."""
    if not isinstance(v, T.Tensor):
        v = T.Tensor(v)
    return T.l2_normalize(v, eps=eps, axis=0)


def bottleneck_forward(spec: ModelSpec, tensors: dict, embedding):
    """GELU hidden MLP, then the (ablatable) L2-bottleneck head."""
    h = embedding
    for i in range(len(spec.hidden_dims)):
        h = T.gelu(T.bias_add(T.matmul(h, tensors[f"proj.hid{i}.w"]), tensors[f"proj.hid{i}.b"]))
    if spec.use_first_linear:
        h = T.bias_add(T.matmul(h, tensors["proj.first.w"]), tensors["proj.first.b"])
    if spec.use_feature_norm:
        h = T.l2_normalize(h, axis=-1)
    v = tensors["proj.last.v"]
    if spec.use_weight_norm:
        v = weight_normalize(v)
    return T.matmul(h, v)


def model_forward(spec: ModelSpec, tensors: dict, running_stats: dict, x, mode: str):
    return bottleneck_forward(spec, tensors, encoder_forward(spec, tensors, running_stats, x, mode))


def calibrate_state(spec: ModelSpec, pv: ParamVector, inputs: np.ndarray,
                    batch_size: int = 256) -> ModelState:
    """Eval-ready state for an arbitrary parameter vector.

    Interpolated or otherwise synthetic parameter vectors carry no meaningful
    running statistics, so batch-norm stats are recomputed with a cumulative
    average over one pass of `inputs` (momentum 1/(i+1) for batch i, making
    the result a pure function of (pv, inputs)). Norm-free models pass
    through unchanged.
    """
    state = unflatten(spec, pv)
    if spec.norm_kind == "batch" and inputs.shape[0] > 0:
        tensors = param_tensors(state.params)
        with T.no_grad():
            for i, lo in enumerate(range(0, inputs.shape[0], batch_size)):
                x = T.Tensor(np.ascontiguousarray(inputs[lo : lo + batch_size]), validate=False)
                encoder_forward(spec, tensors, state.running_stats, x, "train",
                                bn_momentum=1.0 / (i + 1))
    return state.eval()


def flatten(state: ModelState) -> ParamVector:
    return state.params.copy()


def unflatten(spec: ModelSpec, pv: ParamVector, running_stats: dict | None = None, mode: str = "train") -> ModelState:
    layout = param_layout(spec)
    if layout != pv.layout:
        raise ShapeError("parameter vector layout does not match spec")
    rs = running_stats if running_stats is not None else init_running_stats(spec)
    rs = {k: {"mean": v["mean"].copy(), "var": v["var"].copy()} for k, v in rs.items()}
    return ModelState(spec, pv.copy(), rs, mode)
