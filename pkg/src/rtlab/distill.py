"""Random-teacher distillation: frozen teacher, locally-initialized student.

The teacher is a freshly initialized network held in eval mode and never
updated (unless an EMA coefficient is set). The student starts at a rescaled
interpolation between the teacher and an independent draw,

    theta_S(alpha) = ((1 - alpha) * theta_T + alpha * theta_fresh) / delta,
    delta = sqrt(alpha^2 + (1 - alpha)^2),

so its per-parameter variance matches the initialization scheme for every
alpha. Training minimizes the softmax cross-entropy between teacher and
student outputs with plain Adam: no weight decay, no schedule, no clipping.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import models, tensor as T
from .errors import ConfigError, ContractError, DivergenceError, NumericError
from .models import ModelSpec, ModelState
from .params import ParamVector

LOSS_KINDS = ("cross_entropy", "kl")


@dataclass
class DistillConfig:
    alpha: float = 1e-10
    lr: float = 0.001
    epochs: int = 30
    batch_size: int = 256
    temperature_t: float = 1.0
    temperature_s: float = 1.0
    ema_gamma: float = 0.0
    loss_kind: str = "cross_entropy"
    teacher_mode: str = "eval"
    student_mode: str = "train"
    seed: int = 0
    checkpoint_epochs: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.ema_gamma <= 1.0:
            raise ConfigError(f"ema_gamma must lie in [0, 1], got {self.ema_gamma}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss_kind {self.loss_kind!r}")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("lr, epochs, batch_size must be positive")
        for m in (self.teacher_mode, self.student_mode):
            if m not in ("train", "eval"):
                raise ConfigError(f"mode must be train or eval, got {m!r}")
        self.checkpoint_epochs = tuple(int(e) for e in self.checkpoint_epochs)


@dataclass
class RunLog:
    step: list = field(default_factory=list)
    epoch: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    dist_from_init: list = field(default_factory=list)
    probes: list = field(default_factory=list)  # dict rows from the probe hook

    def append(self, step, epoch, loss, kl, dist):
        for v in (loss, kl, dist):
            if not np.isfinite(v):
                raise NumericError(f"non-finite log value at step {step}")
        if self.step and step <= self.step[-1]:
            raise ContractError("log steps must be strictly increasing")
        self.step.append(int(step))
        self.epoch.append(int(epoch))
        self.loss.append(float(loss))
        self.kl.append(float(kl))
        self.dist_from_init.append(float(dist))


@dataclass
class AdamState:
    m: ParamVector
    v: ParamVector
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, layout) -> "AdamState":
        return cls(ParamVector.zeros(layout), ParamVector.zeros(layout))


def alpha_init(theta_t: ParamVector, theta_fresh: ParamVector, alpha: float) -> ParamVector:
    """Variance-preserving interpolation between teacher and a fresh draw."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    delta = np.sqrt(alpha * alpha + (1.0 - alpha) * (1.0 - alpha))
    mixed = (1.0 - alpha) * theta_t + alpha * theta_fresh
    return mixed * (1.0 / delta)


def distill_loss(teacher_logits: np.ndarray, student_logits: T.Tensor, config: DistillConfig):
    """Returns (loss Tensor, report dict with per-sample mean ce/kl).

    The teacher's softmax is a constant target: no gradient flows into it.
    Under loss_kind="kl" the loss differs from cross-entropy only by the
    (constant) target entropy, so gradients are identical.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ContractError("teacher and student logits must agree in shape")
    with T.no_grad():
        target = T.softmax(T.Tensor(teacher_logits, validate=False), config.temperature_t)
    prediction = T.softmax(student_logits, config.temperature_s)
    ce = T.cross_entropy(T.Tensor(target.data, validate=False), prediction)
    n = teacher_logits.shape[0]
    loss = T.add_scalar(ce, -T.entropy(target.data)) if config.loss_kind == "kl" else ce
    kl_mean = float(T.kl_rows(target.data, prediction.data).mean())
    report = {"ce": ce.item() / n, "kl": kl_mean}
    return loss, report


def adam_step(params: ParamVector, grads: ParamVector, state: AdamState, lr: float) -> ParamVector:
    """Bias-corrected Adam without weight decay; mutates state, returns new params."""
    params._check(grads)
    if not np.all(np.isfinite(grads.values)):
        bad = [seg.name for seg, view in grads.segments() if not np.all(np.isfinite(view))]
        raise NumericError(f"non-finite gradients in segments: {', '.join(bad)}")
    state.step += 1
    state.m.values[...] = state.beta1 * state.m.values + (1 - state.beta1) * grads.values
    state.v.values[...] = state.beta2 * state.v.values + (1 - state.beta2) * grads.values**2
    m_hat = state.m.values / (1 - state.beta1**state.step)
    v_hat = state.v.values / (1 - state.beta2**state.step)
    new = params.values - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ParamVector(new, params.layout)


@dataclass
class DistillResult:
    spec: ModelSpec
    config: DistillConfig
    teacher: ModelState
    student: ModelState
    theta_init: ParamVector
    log: RunLog
    checkpoints: dict = field(default_factory=dict)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    # batch ordering is pinned by (run_seed, epoch)
    return np.random.default_rng([seed, epoch]).permutation(n)


def _copy_stats(rs: dict) -> dict:
    return {k: {"mean": v["mean"].copy(), "var": v["var"].copy()} for k, v in rs.items()}


def _teacher_logits(spec, teacher_tensors, teacher_rs, x, mode):
    if mode == "train":
        # scratch stats so a train-mode teacher still never mutates
        rs = _copy_stats(teacher_rs)
    else:
        rs = teacher_rs
    with T.no_grad():
        out = models.model_forward(spec, teacher_tensors, rs, x, mode)
    return out.data


def _train_loop(spec: ModelSpec, cfg: DistillConfig, dataset, teacher: ModelState,
                student: ModelState, probe_hook) -> DistillResult:
    if dataset.n == 0:
        raise ContractError("dataset is empty")
    theta_init = student.params.copy()
    adam = AdamState.init(student.params.layout)
    teacher_tensors = models.param_tensors(teacher.params)
    log = RunLog()
    checkpoints = {}
    step = 0
    for epoch in range(cfg.epochs):
        order = _epoch_order(cfg.seed, epoch, dataset.n)
        for lo in range(0, dataset.n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            params_before = student.params
            try:
                x = T.Tensor(np.ascontiguousarray(dataset.inputs[idx]), validate=False)
                t_logits = _teacher_logits(spec, teacher_tensors, teacher.running_stats, x, cfg.teacher_mode)
                s_tensors = models.param_tensors(student.params, requires_grad=True)
                s_logits = models.model_forward(spec, s_tensors, student.running_stats, x, cfg.student_mode)
                loss, report = distill_loss(t_logits, s_logits, cfg)
                if not np.isfinite(loss.item()):
                    raise NumericError("loss value is non-finite")
                loss.backward()
                grads = models.grad_vector(student.params, s_tensors)
                student.params = adam_step(student.params, grads, adam, cfg.lr)
                if cfg.ema_gamma > 0.0:
                    teacher.params = (1.0 - cfg.ema_gamma) * teacher.params + cfg.ema_gamma * student.params
                    teacher_tensors = models.param_tensors(teacher.params)
                step += 1
                log.append(step, epoch, report["ce"], report["kl"], (student.params - theta_init).norm())
            except NumericError as e:
                raise DivergenceError(
                    f"training diverged at step {step}: {e}",
                    last_params=params_before.copy(),
                    log=log,
                ) from e
        if probe_hook is not None:
            log.probes.extend(probe_hook(epoch, student, teacher))
        if epoch in cfg.checkpoint_epochs:
            checkpoints[epoch] = student.copy()
    return DistillResult(spec, cfg, teacher, student, theta_init, log, checkpoints)


def distill_run(spec: ModelSpec, config: DistillConfig, dataset, probe_hook=None) -> DistillResult:
    """Run one distillation round; see module docstring for the recipe.

    probe_hook, when given, is called as probe_hook(epoch, student, teacher)
    after each epoch and must return a list of dict rows for the log.
    Divergence (non-finite loss) raises DivergenceError carrying the last
    finite parameter vector and the log so far.
    """
    ss = np.random.SeedSequence(config.seed)
    teacher_seed, student_seed = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    teacher = models.init_params(spec, teacher_seed).eval()
    fresh = models.init_params(spec, student_seed)
    student = ModelState(
        spec,
        alpha_init(teacher.params, fresh.params, config.alpha),
        models.init_running_stats(spec),
        config.student_mode,
    )
    return _train_loop(spec, config, dataset, teacher, student, probe_hook)


def restart_round(prev: DistillResult, dataset, config: DistillConfig | None = None,
                  mode: str = "student_as_teacher", probe_hook=None) -> DistillResult:
    """Second distillation round with the converged student as the teacher.

    The new teacher inherits the student's parameters and running statistics
    bit-exactly; a fresh student is drawn from the (possibly bumped) seed.
    """
    if mode != "student_as_teacher":
        raise ConfigError(f"unknown restart mode {mode!r}")
    cfg = config if config is not None else replace(prev.config, seed=prev.config.seed + 1)
    ss = np.random.SeedSequence(cfg.seed)
    _, student_seed = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    teacher = prev.student.copy().eval()
    fresh = models.init_params(prev.spec, student_seed)
    student = ModelState(
        prev.spec,
        alpha_init(teacher.params, fresh.params, cfg.alpha),
        _copy_stats(teacher.running_stats),
        cfg.student_mode,
    )
    return _train_loop(prev.spec, cfg, dataset, teacher, student, probe_hook)
