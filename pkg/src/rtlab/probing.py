"""Feature-quality probes: linear probe, K-NN probe, raw-input baseline.

Probing never touches encoder parameters: features are extracted once from a
frozen eval-mode state, and only the probe's own linear layer is trained.
"""

from dataclasses import dataclass

import numpy as np

from . import models, tensor as T
from .distill import AdamState, adam_step
from .errors import ContractError, DomainError, NumericError
from .params import ParamVector, build_layout


@dataclass(frozen=True)
class FeatureMatrix:
    features: np.ndarray  # (n, r) f64
    labels: np.ndarray
    k: int
    source: str = "encoder"  # {encoder, raw_input}

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ContractError("features and labels disagree on n")
        if not np.all(np.isfinite(self.features)):
            raise NumericError("non-finite features")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    probe_kind: str
    seed: int | None = None
    epochs: int | None = None
    k_neighbors: int | None = None

    def __post_init__(self):
        for a in (self.train_accuracy, self.test_accuracy):
            if not 0.0 <= a <= 1.0:
                raise ContractError(f"accuracy {a} outside [0, 1]")


def extract_features(state: models.ModelState, dataset, batch_size: int = 512) -> FeatureMatrix:
    """Eval-mode encoder embeddings for every sample, in dataset order."""
    if state.mode != "eval":
        raise ContractError("extract_features requires an eval-mode state")
    chunks = []
    for lo in range(0, dataset.n, batch_size):
        chunks.append(state.encode(dataset.inputs[lo : lo + batch_size]))
    return FeatureMatrix(np.concatenate(chunks, axis=0), dataset.labels.copy(), dataset.k, "encoder")


def raw_input_features(dataset) -> FeatureMatrix:
    """Flattened per-feature-standardized pixels (the probe baseline).

    Datasets carrying stats are already standardized and are only flattened;
    otherwise the dataset's own statistics are applied.
    """
    x = dataset.flat_inputs()
    if dataset.stats is None:
        mean = x.mean(axis=0)
        std = np.maximum(x.std(axis=0), 1e-8)
        x = (x - mean) / std
    return FeatureMatrix(x, dataset.labels.copy(), dataset.k, "raw_input")


def _accuracy(features: np.ndarray, labels: np.ndarray, w: np.ndarray, b: np.ndarray) -> float:
    pred = np.argmax(features @ w + b, axis=1)
    return float((pred == labels).mean())


def linear_probe(train: FeatureMatrix, test: FeatureMatrix, seed: int,
                 epochs: int = 100, lr: float = 1e-3, batch_size: int = 256) -> ProbeResult:
    """Multinomial logistic regression on frozen features.

    Single linear layer + softmax + cross-entropy on the true labels, Adam,
    no weight decay. Zero init keeps the convex problem deterministic up to
    the seeded batch order.
    """
    if train.dim != test.dim:
        raise ContractError("train/test feature dims differ")
    if np.unique(train.labels).size < 2:
        raise ContractError("degenerate probe: single-class training set")
    k = train.k
    layout = build_layout([("w", (train.dim, k), "weight"), ("b", (k,), "bias")])
    params = ParamVector.zeros(layout)
    adam = AdamState.init(layout)
    onehot = np.eye(k)[train.labels]
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(train.n)
        for lo in range(0, train.n, batch_size):
            idx = order[lo : lo + batch_size]
            w = T.Tensor(params.segment("w").copy(), requires_grad=True)
            b = T.Tensor(params.segment("b").copy(), requires_grad=True)
            logits = T.bias_add(T.matmul(T.Tensor(train.features[idx], validate=False), w), b)
            loss = T.cross_entropy(T.Tensor(onehot[idx], validate=False), T.softmax(logits))
            loss.backward()
            grads = ParamVector(np.concatenate([w.grad.ravel(), b.grad.ravel()]), layout)
            params = adam_step(params, grads, adam, lr)
    w, b = params.segment("w"), params.segment("b")
    return ProbeResult(
        _accuracy(train.features, train.labels, w, b),
        _accuracy(test.features, test.labels, w, b),
        "linear", seed=seed, epochs=epochs,
    )


def averaged_linear_probe(train: FeatureMatrix, test: FeatureMatrix, seeds=(0, 1, 2), **kw) -> dict:
    """Mean/std of linear-probe accuracy over probe seeds."""
    results = [linear_probe(train, test, s, **kw) for s in seeds]
    accs = np.array([r.test_accuracy for r in results])
    return {
        "mean_train": float(np.mean([r.train_accuracy for r in results])),
        "mean_test": float(accs.mean()),
        "std_test": float(accs.std()),
        "results": results,
    }


def _knn_predict(train: FeatureMatrix, queries: np.ndarray, K: int) -> np.ndarray:
    d2 = (
        (queries**2).sum(axis=1, keepdims=True)
        - 2.0 * queries @ train.features.T
        + (train.features**2).sum(axis=1)
    )
    np.maximum(d2, 0.0, out=d2)
    dist = np.sqrt(d2)
    out = np.empty(queries.shape[0], dtype=np.int64)
    for i in range(queries.shape[0]):
        nn = np.argpartition(dist[i], K - 1)[:K]
        votes = np.bincount(train.labels[nn], minlength=train.k)
        top = votes.max()
        tied = np.flatnonzero(votes == top)
        if tied.size == 1:
            out[i] = tied[0]
            continue
        # tie: smallest summed distance over each tied label's neighbors,
        # then lowest label id
        sums = np.array([dist[i, nn[train.labels[nn] == c]].sum() for c in tied])
        out[i] = tied[np.flatnonzero(sums == sums.min()).min()]
    return out


def knn_probe(train: FeatureMatrix, test: FeatureMatrix, K: int = 20) -> ProbeResult:
    """Euclidean K-nearest-neighbor majority vote (self included on train)."""
    if K < 1 or K > train.n:
        raise DomainError(f"K={K} outside [1, {train.n}]")
    if train.dim != test.dim:
        raise ContractError("train/test feature dims differ")
    train_acc = float((_knn_predict(train, train.features, K) == train.labels).mean())
    test_acc = float((_knn_predict(train, test.features, K) == test.labels).mean())
    return ProbeResult(train_acc, test_acc, "knn", k_neighbors=K)
