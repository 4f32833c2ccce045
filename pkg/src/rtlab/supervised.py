"""Supervised training dynamics: SGD with rewind checkpoints, iterative
magnitude pruning, and linear-mode-connectivity runs.

The supervised model is the encoder family plus a linear classification
head. Inits can be fresh random draws or transplanted distilled-student
encoders; both produce the same parameter layout so rewinding, masking and
interpolation are plain vector operations.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import data as data_mod, landscape, models, tensor as T
from .errors import ConfigError, ContractError, DivergenceError, DomainError, NumericError
from .models import ModelSpec
from .params import ParamVector, build_layout


@dataclass
class SupervisedConfig:
    model: ModelSpec
    num_classes: int
    epochs: int = 160
    lr0: float = 0.1
    milestones: tuple = (80, 120)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augmentation: str = "none"
    ordering_seed: int = 0
    rewind_epochs: tuple = (0, 1, 2, 5)
    batch_size: int = 128

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.rewind_epochs = tuple(int(e) for e in self.rewind_epochs)
        if any(b >= c for b, c in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("milestones must be strictly increasing")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ConfigError("milestones must lie before the last epoch")
        if self.augmentation not in ("none", "flip_padcrop4"):
            raise ConfigError(f"unknown augmentation {self.augmentation!r}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")

    @classmethod
    def desk_scale(cls, model: ModelSpec, num_classes: int, **overrides) -> "SupervisedConfig":
        """Compressed schedule: 40 epochs, decays at 20/30, same 10x steps."""
        base = dict(epochs=40, milestones=(20, 30))
        base.update(overrides)
        return cls(model, num_classes, **base)

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay ** sum(1 for m in self.milestones if epoch >= m)


def classifier_layout(mspec: ModelSpec, num_classes: int):
    entries = models._encoder_entries(mspec) + [
        ("head.w", (mspec.embed_dim, num_classes), "weight"),
        ("head.b", (num_classes,), "bias"),
    ]
    return build_layout(entries)


def make_classifier_init(mspec: ModelSpec, num_classes: int, seed: int,
                         encoder_from: ParamVector | None = None) -> ParamVector:
    """Kaiming-initialized classifier; optionally transplant encoder segments
    (matched by name) from a distillation-model parameter vector."""
    layout = classifier_layout(mspec, num_classes)
    pv = ParamVector.zeros(layout)
    rng = np.random.default_rng(seed)
    for seg in layout:
        view = pv.segment(seg.name)
        if seg.tag == "weight":
            view[...] = rng.normal(0.0, np.sqrt(2.0 / models._fan_in(seg.name, seg.shape)), size=seg.shape)
        elif seg.name.endswith(".gamma"):
            view[...] = 1.0
    if encoder_from is not None:
        source = {seg.name: arr for seg, arr in encoder_from.segments()}
        for seg in layout:
            if seg.name.startswith("enc."):
                if seg.name not in source:
                    raise ContractError(f"source has no segment {seg.name}")
                pv.segment(seg.name)[...] = source[seg.name]
    return pv


def classifier_logits(mspec: ModelSpec, tensors: dict, running_stats: dict, x, mode: str,
                      bn_momentum: float = 0.1):
    h = models.encoder_forward(mspec, tensors, running_stats, x, mode, bn_momentum)
    return T.bias_add(T.matmul(h, tensors["head.w"]), tensors["head.b"])


def calibrated_classifier(mspec: ModelSpec, pv: ParamVector, inputs: np.ndarray,
                          batch_size: int = 256):
    """(tensors, running stats) ready for eval; batch-norm stats recomputed
    by a cumulative-average pass, exactly as for landscape grid points."""
    tensors = models.param_tensors(pv)
    rs = models.init_running_stats(mspec)
    if mspec.norm_kind == "batch" and inputs.shape[0] > 0:
        with T.no_grad():
            for i, lo in enumerate(range(0, inputs.shape[0], batch_size)):
                x = T.Tensor(np.ascontiguousarray(inputs[lo : lo + batch_size]), validate=False)
                models.encoder_forward(mspec, tensors, rs, x, "train", bn_momentum=1.0 / (i + 1))
    return tensors, rs


def classifier_error(mspec: ModelSpec, pv: ParamVector, dataset, calibration_inputs,
                     batch_size: int = 512) -> float:
    """Test error (1 - accuracy) of a parameter vector, calibrated stats."""
    tensors, rs = calibrated_classifier(mspec, pv, calibration_inputs)
    correct = 0
    with T.no_grad():
        for lo in range(0, dataset.n, batch_size):
            x = T.Tensor(np.ascontiguousarray(dataset.inputs[lo : lo + batch_size]), validate=False)
            logits = classifier_logits(mspec, tensors, rs, x, "eval")
            correct += int((np.argmax(logits.data, axis=1) == dataset.labels[lo : lo + batch_size]).sum())
    return 1.0 - correct / dataset.n


@dataclass
class PruneMask:
    flags: np.ndarray  # 1.0 keep, 0.0 pruned; aligned to the layout
    layout: tuple
    round: int = 0

    @classmethod
    def fresh(cls, layout) -> "PruneMask":
        from .params import layout_size

        return cls(np.ones(layout_size(layout)), layout)

    def prunable_index(self) -> np.ndarray:
        idx = []
        for seg in self.layout:
            if seg.tag == "weight":
                idx.append(np.arange(seg.offset, seg.offset + seg.size))
        return np.concatenate(idx)

    @property
    def sparsity(self) -> float:
        p = self.prunable_index()
        return float((self.flags[p] == 0.0).sum() / p.size)

    def copy(self) -> "PruneMask":
        return PruneMask(self.flags.copy(), self.layout, self.round)


def pruning_rate(k: float, r: int) -> float:
    """Overall fraction pruned after r rounds at per-round rate k."""
    if not 0.0 < k < 1.0:
        raise DomainError(f"k must lie in (0, 1), got {k}")
    if r < 0:
        raise DomainError("r must be non-negative")
    return 1.0 - (1.0 - k) ** r


def global_magnitude_prune(theta: ParamVector, mask: PruneMask, k: float) -> PruneMask:
    """Zero the floor(k * alive) smallest-magnitude unmasked weight entries.

    Ties break toward the lowest flat index (stable sort). Biases and norm
    parameters are never considered.
    """
    if not 0.0 < k < 1.0:
        raise DomainError(f"k must lie in (0, 1), got {k}")
    if theta.layout != mask.layout:
        raise ContractError("theta and mask layouts differ")
    prunable = mask.prunable_index()
    alive = prunable[mask.flags[prunable] == 1.0]
    if alive.size == 0:
        raise DomainError("every prunable entry is already pruned")
    n_prune = int(np.floor(k * alive.size))
    order = np.argsort(np.abs(theta.values[alive]), kind="stable")
    new = mask.copy()
    new.flags[alive[order[:n_prune]]] = 0.0
    new.round = mask.round + 1
    return new


@dataclass
class SupervisedResult:
    theta_star: ParamVector
    running_stats: dict
    checkpoints: dict  # epoch -> ParamVector
    losses: list
    train_accuracy: list  # running accuracy per epoch


def supervised_train(init: ParamVector, config: SupervisedConfig, dataset,
                     mask: PruneMask | None = None) -> SupervisedResult:
    """SGD + momentum + multistep schedule + weight decay.

    Batch order, augmentation draws and therefore the final parameters are a
    pure function of (init, config, dataset, mask). Masked coordinates have
    their gradients zeroed, so they remain exactly 0 throughout.
    """
    mspec = config.model
    layout = classifier_layout(mspec, config.num_classes)
    if init.layout != layout:
        raise ContractError("init layout does not match the configured model")
    flags = mask.flags if mask is not None else None
    params = init.masked(flags) if flags is not None else init.copy()
    velocity = ParamVector.zeros(layout)
    running_stats = models.init_running_stats(mspec)
    onehot = np.eye(config.num_classes)[dataset.labels]
    checkpoints = {}
    losses = []
    train_accuracy = []
    step = 0
    for epoch in range(config.epochs):
        if epoch in config.rewind_epochs:
            checkpoints[epoch] = params.copy()
        lr = config.lr_at(epoch)
        order = np.random.default_rng([config.ordering_seed, 0, epoch]).permutation(dataset.n)
        correct = 0
        for lo in range(0, dataset.n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb = dataset.inputs[idx]
            if config.augmentation != "none":
                xb = data_mod.augment(xb, config.augmentation, seed=[config.ordering_seed, 1, step])
            params_before = params
            try:
                tensors = models.param_tensors(params, requires_grad=True)
                logits = classifier_logits(mspec, tensors, running_stats, T.Tensor(xb, validate=False), "train")
                loss = T.mul_scalar(
                    T.cross_entropy(T.Tensor(onehot[idx], validate=False), T.softmax(logits)),
                    1.0 / idx.size,
                )
                if not np.isfinite(loss.item()):
                    raise NumericError("loss value is non-finite")
                loss.backward()
                grads = models.grad_vector(params, tensors)
                g = grads.values + config.weight_decay * params.values
                if flags is not None:
                    g = g * flags
                velocity.values[...] = config.momentum * velocity.values + g
                params = ParamVector(params.values - lr * velocity.values, layout)
                correct += int((np.argmax(logits.data, axis=1) == dataset.labels[idx]).sum())
                losses.append(loss.item())
                step += 1
            except NumericError as e:
                raise DivergenceError(
                    f"supervised training diverged at step {step}: {e}",
                    last_params=params_before.copy(),
                ) from e
        train_accuracy.append(correct / dataset.n)
    if config.epochs in config.rewind_epochs:
        checkpoints[config.epochs] = params.copy()
    return SupervisedResult(params, running_stats, checkpoints, losses, train_accuracy)


def imp_run(rewind_point: ParamVector, rounds: int, k: float, config: SupervisedConfig,
            train_ds, test_ds) -> list:
    """Iterative magnitude pruning with rewinding.

    Round 0 trains the dense network; each later round prunes the previous
    solution globally by k, rewinds surviving weights to rewind_point, and
    retrains under the mask. Returns one record per round:
    {round, sparsity, test_accuracy, mask}.
    """
    if rounds < 0:
        raise ContractError("rounds must be non-negative")
    mask = PruneMask.fresh(rewind_point.layout)
    records = []
    result = supervised_train(rewind_point, config, train_ds, mask)
    err = classifier_error(config.model, result.theta_star, test_ds, train_ds.inputs)
    records.append({"round": 0, "sparsity": 0.0, "test_accuracy": 1.0 - err, "mask": mask.copy()})
    for r in range(1, rounds + 1):
        mask = global_magnitude_prune(result.theta_star, mask, k)
        rewound = rewind_point.masked(mask.flags)
        result = supervised_train(rewound, config, train_ds, mask)
        err = classifier_error(config.model, result.theta_star, test_ds, train_ds.inputs)
        records.append({
            "round": r,
            "sparsity": mask.sparsity,
            "test_accuracy": 1.0 - err,
            "mask": mask.copy(),
        })
    # running norm statistics start fresh in every round's training run
    for rec in records:
        rec["bn_stats_reset"] = config.model.norm_kind == "batch"
    return records


@dataclass
class LMCResult:
    orderings: list  # ordering seeds actually used
    endpoint_errors: list  # test error per ordering run
    curves: list  # (i, j, [(gamma, test_error), ...])
    barriers: list  # (i, j, barrier)

    @property
    def mean_barrier(self) -> float:
        return float(np.mean([b for _, _, b in self.barriers]))

    @property
    def std_barrier(self) -> float:
        return float(np.std([b for _, _, b in self.barriers]))


def lmc_experiment(init: ParamVector, num_orderings: int, gamma_points: int,
                   config: SupervisedConfig, train_ds, test_ds,
                   orderings: list | None = None) -> LMCResult:
    """Train `num_orderings` runs from one init under different batch
    orderings, then measure the test-error barrier on every pair.

    Orderings are spawned from config.ordering_seed unless given explicitly
    (explicit duplicates are allowed; identical orderings give barrier 0).
    """
    if num_orderings < 2:
        raise ContractError("need at least two orderings")
    if orderings is None:
        ss = np.random.SeedSequence(config.ordering_seed)
        orderings = [int(c.generate_state(1)[0]) for c in ss.spawn(num_orderings)]
    elif len(orderings) != num_orderings:
        raise ContractError("orderings list length must equal num_orderings")
    stars = []
    for s in orderings:
        res = supervised_train(init, replace(config, ordering_seed=s), train_ds)
        stars.append(res.theta_star)

    def err(pv: ParamVector) -> float:
        return classifier_error(config.model, pv, test_ds, train_ds.inputs)

    endpoint_errors = [err(pv) for pv in stars]
    curves = []
    barriers = []
    for i in range(num_orderings):
        for j in range(i + 1, num_orderings):
            curve, barrier = landscape.path_barrier(stars[i], stars[j], gamma_points, err)
            curves.append((i, j, curve))
            barriers.append((i, j, barrier))
    return LMCResult(orderings, endpoint_errors, curves, barriers)
