"""Parameter-plane slices and path metrics around the teacher.

A Plane is an affine 2D slice of parameter space, point(l1, l2) =
base + l1*v1 + l2*v2, with named anchors at known coordinates. Two standard
views are provided: the non-local view spanned by a fresh initialization and
a far-trained student, and the shared view spanned by the locally and
far-trained students, both based at the teacher.

Grid metrics are evaluated in eval mode after batch-norm recalibration; the
reference (teacher) outputs go through the identical calibration so that the
teacher anchor is an exact zero of the KL surfaces.
"""

from dataclasses import dataclass, field

import numpy as np

from . import models, probing, tensor as T
from .errors import ContractError, DegenerateDirectionsError, RtlabError
from .params import ParamVector

METRICS = ("distill_kl", "probe_accuracy", "encoder_kl", "param_norm")


@dataclass(frozen=True)
class Plane:
    base: ParamVector
    v1: ParamVector
    v2: ParamVector
    anchors: dict
    orthogonalized: bool = False

    def point(self, l1: float, l2: float) -> ParamVector:
        return self.base + float(l1) * self.v1 + float(l2) * self.v2

    def anchor_point(self, name: str) -> ParamVector:
        return self.point(*self.anchors[name])


def non_local_view(theta_t: ParamVector, theta_s1_init: ParamVector,
                   theta_s1_star: ParamVector) -> Plane:
    """Plane spanned by the fresh-init and far-trained directions."""
    return Plane(
        theta_t.copy(),
        theta_s1_init - theta_t,
        theta_s1_star - theta_t,
        {"teacher": (0.0, 0.0), "fresh_init": (1.0, 0.0), "trained_far": (0.0, 1.0)},
    )


def shared_view(theta_t: ParamVector, theta_star_local: ParamVector,
                theta_star_far: ParamVector) -> Plane:
    """Plane spanned by the locally-trained and far-trained directions."""
    return Plane(
        theta_t.copy(),
        theta_star_local - theta_t,
        theta_star_far - theta_t,
        {"teacher": (0.0, 0.0), "trained_local": (1.0, 0.0), "trained_far": (0.0, 1.0)},
    )


def orthogonalize(plane: Plane) -> Plane:
    """Gram-Schmidt keeping v1; anchor coordinates remapped to the new basis.

    With v2 = u2 + c*u1 an anchor at (a, b) becomes (a + b*c, b), so anchors
    keep reproducing their checkpoints exactly.
    """
    u1 = plane.v1
    n1sq = u1.dot(u1)
    if n1sq == 0.0:
        raise DegenerateDirectionsError("v1 is the zero vector")
    c = plane.v2.dot(u1) / n1sq
    u2 = plane.v2 - c * u1
    if u2.norm() <= 1e-12 * plane.v2.norm():
        raise DegenerateDirectionsError("v1 and v2 are (near-)collinear")
    anchors = {name: (a + b * c, b) for name, (a, b) in plane.anchors.items()}
    return Plane(plane.base.copy(), u1.copy(), u2, anchors, orthogonalized=True)


@dataclass
class EvalContext:
    """Everything a string metric needs: the model family, the inputs the
    surfaces are measured on, the reference parameters, and probe data."""

    spec: models.ModelSpec
    dataset: object
    teacher: ParamVector | None = None
    probe_train: object = None
    probe_test: object = None
    probe_seed: int = 0
    probe_epochs: int = 100
    eval_batch: int = 512
    calibration_batch: int = 256


def _model_probs(spec, state, inputs, batch_size):
    rows = []
    with T.no_grad():
        tensors = models.param_tensors(state.params)
        for lo in range(0, inputs.shape[0], batch_size):
            x = T.Tensor(np.ascontiguousarray(inputs[lo : lo + batch_size]), validate=False)
            logits = models.model_forward(spec, tensors, state.running_stats, x, "eval")
            rows.append(T.softmax(logits, 1.0).data)
    return np.concatenate(rows, axis=0)


def _encoder_probs(spec, state, inputs, batch_size):
    rows = []
    with T.no_grad():
        tensors = models.param_tensors(state.params)
        for lo in range(0, inputs.shape[0], batch_size):
            x = T.Tensor(np.ascontiguousarray(inputs[lo : lo + batch_size]), validate=False)
            emb = models.encoder_forward(spec, tensors, state.running_stats, x, "eval")
            rows.append(T.softmax(emb, 1.0).data)
    return np.concatenate(rows, axis=0)


def metric_evaluator(metric: str, ctx: EvalContext):
    """Build a pure ParamVector -> float closure for a named metric."""
    if metric == "param_norm":
        return lambda pv: pv.norm()

    inputs = ctx.dataset.inputs

    def calibrated(pv):
        return models.calibrate_state(ctx.spec, pv, inputs, ctx.calibration_batch)

    if metric == "distill_kl":
        if ctx.teacher is None:
            raise ContractError("distill_kl needs teacher parameters in the context")
        ref = _model_probs(ctx.spec, calibrated(ctx.teacher), inputs, ctx.eval_batch)

        def ev(pv):
            probs = _model_probs(ctx.spec, calibrated(pv), inputs, ctx.eval_batch)
            return float(T.kl_rows(ref, probs).mean())

        return ev

    if metric == "encoder_kl":
        if ctx.teacher is None:
            raise ContractError("encoder_kl needs teacher parameters in the context")
        ref = _encoder_probs(ctx.spec, calibrated(ctx.teacher), inputs, ctx.eval_batch)

        def ev(pv):
            probs = _encoder_probs(ctx.spec, calibrated(pv), inputs, ctx.eval_batch)
            return float(T.kl_rows(ref, probs).mean())

        return ev

    if metric == "probe_accuracy":
        if ctx.probe_train is None or ctx.probe_test is None:
            raise ContractError("probe_accuracy needs probe_train/probe_test datasets")

        def ev(pv):
            state = calibrated(pv)
            f_tr = probing.extract_features(state, ctx.probe_train)
            f_te = probing.extract_features(state, ctx.probe_test)
            return probing.linear_probe(f_tr, f_te, ctx.probe_seed, epochs=ctx.probe_epochs).test_accuracy

        return ev

    raise ContractError(f"unknown metric {metric!r}; choose from {METRICS}")


@dataclass
class LandscapeGrid:
    lambda1: np.ndarray
    lambda2: np.ndarray
    metric: str
    values: np.ndarray
    failures: list = field(default_factory=list)  # (i, j, message)
    anchors: dict = field(default_factory=dict)

    def argmin_coords(self):
        masked = np.where(np.isfinite(self.values), self.values, np.inf)
        i, j = np.unravel_index(np.argmin(masked), masked.shape)
        return float(self.lambda1[i]), float(self.lambda2[j])


def eval_grid(plane: Plane, resolution: int, metric, context: EvalContext,
              extent=(-0.5, 1.5, -0.5, 1.5)) -> LandscapeGrid:
    """Evaluate a metric surface over the plane.

    Per-point failures are recorded (value NaN, message kept) and the grid
    always completes. `metric` may also be a callable ParamVector -> float.
    """
    if resolution < 2:
        raise ContractError("resolution must be at least 2")
    l1 = np.linspace(extent[0], extent[1], resolution)
    l2 = np.linspace(extent[2], extent[3], resolution)
    ev = metric if callable(metric) else metric_evaluator(metric, context)
    name = metric if isinstance(metric, str) else getattr(metric, "__name__", "custom")
    values = np.empty((resolution, resolution))
    failures = []
    for i, a in enumerate(l1):
        for j, b in enumerate(l2):
            try:
                values[i, j] = ev(plane.point(a, b))
            except RtlabError as e:
                values[i, j] = np.nan
                failures.append((i, j, str(e)))
    return LandscapeGrid(l1, l2, name, values, failures, dict(plane.anchors))


def path_barrier(theta_a: ParamVector, theta_b: ParamVector, num_points: int,
                 metric, context: EvalContext | None = None):
    """Metric along theta(gamma) = gamma*a + (1-gamma)*b and its barrier.

    barrier = max_gamma [E(theta(gamma)) - ((1-gamma) E(b) + gamma E(a))],
    which is 0 at both endpoints by construction.
    """
    if num_points < 3:
        raise ContractError("num_points must be at least 3")
    theta_a._check(theta_b)
    ev = metric if callable(metric) else metric_evaluator(metric, context)
    gammas = np.linspace(0.0, 1.0, num_points)
    curve = []
    for g in gammas:
        pv = ParamVector(g * theta_a.values + (1.0 - g) * theta_b.values, theta_a.layout)
        curve.append((float(g), float(ev(pv))))
    e_b, e_a = curve[0][1], curve[-1][1]
    barrier = max(v - ((1.0 - g) * e_b + g * e_a) for g, v in curve)
    return curve, float(barrier)


def asymmetry_slopes(plane: Plane, metric, context: EvalContext | None = None,
                     delta: float = 0.1) -> dict:
    """One-sided slopes of the metric at +-delta along unit-normalized v1
    through the base point. Reported for inspection, not asserted."""
    ev = metric if callable(metric) else metric_evaluator(metric, context)
    u = plane.v1 * (1.0 / plane.v1.norm())
    e0 = ev(plane.base)
    e_plus = ev(plane.base + delta * u)
    e_minus = ev(plane.base + (-delta) * u)
    return {
        "delta": float(delta),
        "value_at_base": float(e0),
        "slope_plus": float((e_plus - e0) / delta),
        "slope_minus": float((e0 - e_minus) / delta),
    }
