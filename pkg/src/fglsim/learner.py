"""Local model and training loop.

The backbone is deliberately linear: features are propagated k steps
through the fixed normalized adjacency once, cached, and a single affine
layer (W, b) maps them to logits. Training minimizes

    mean cross-entropy
    + (weight_decay / 2) * ||W||^2
    + (mu / 2) * ||theta - theta_global||^2          (proximal algorithms)
    + lambda * sum_c (n_c / B) * ||p_c - P_c||^2     (prototype algorithms)

where p_c is the batch mean logit of class c and P_c the global prototype.
Gradients are exact analytic derivatives of this objective; the test suite
checks them against central finite differences. Prototypes live in logit
space: with a linear backbone the pre-classifier embedding is not
trainable, so class-mean logits are the meaningful shared representation.

Graph-level datasets reduce to the same row-based training after mean
pooling the propagated node features of each graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractViolationError,
    EvaluationError,
    NumericError,
    ShapeError,
)
from .graph import Graph, GraphCollection, NormalizedAdjacency, normalize_adjacency, propagate
from .seeding import rng_for

log = logging.getLogger("fglsim.learner")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    local_epochs: int = 3
    batch_size: int = 0  # 0 = full batch
    lr: float = 1e-2
    weight_decay: float = 5e-4
    prox_mu: float = 0.0
    proto_lambda: float = 1.0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.lr <= 0:
            raise ShapeError("lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ShapeError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class SGCModel:
    """k-step propagation followed by one affine layer."""

    k: int
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def zeros(cls, k: int, feature_dim: int, num_outputs: int) -> "SGCModel":
        return cls(k, np.zeros((feature_dim, num_outputs)), np.zeros(num_outputs))

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def replace(self, params: dict[str, np.ndarray]) -> "SGCModel":
        return SGCModel(self.k, params["W"].copy(), params["b"].copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b.ravel()])


def params_flat(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params["W"].ravel(), params["b"].ravel()])


def params_unflat(vec: np.ndarray, feature_dim: int, num_outputs: int) -> dict[str, np.ndarray]:
    split = feature_dim * num_outputs
    return {
        "W": vec[:split].reshape(feature_dim, num_outputs).copy(),
        "b": vec[split : split + num_outputs].copy(),
    }


class PropagationCache:
    """Propagated features per (graph uid, k, scheme), computed once.

    Perturbed graphs are new objects with new uids, so entries can never go
    stale. The cache is read-only after a warm-up pass and safe to share
    across worker threads."""

    def __init__(self):
        self._store: dict[tuple[int, int, str], np.ndarray] = {}
        self._adj: dict[tuple[int, str], NormalizedAdjacency] = {}

    def adjacency(self, g: Graph, scheme: str) -> NormalizedAdjacency:
        key = (g.uid, scheme)
        if key not in self._adj:
            self._adj[key] = normalize_adjacency(g, scheme)
        return self._adj[key]

    def features(self, g: Graph, k: int, scheme: str) -> np.ndarray:
        key = (g.uid, k, scheme)
        if key not in self._store:
            self._store[key] = propagate(self.adjacency(g, scheme), g.features, k)
        return self._store[key]


@dataclass
class TrainData:
    """One row per training sample (node or pooled graph)."""

    X: np.ndarray
    labels: np.ndarray | None
    targets: np.ndarray | None
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    num_classes: int = 0

    @property
    def is_regression(self) -> bool:
        return self.targets is not None

    @property
    def num_outputs(self) -> int:
        return 1 if self.is_regression else self.num_classes


def build_node_data(g: Graph, k: int, scheme: str, cache: PropagationCache) -> TrainData:
    """Subgraph scenario: nodes are samples; only labeled nodes train/eval."""
    X = cache.features(g, k, scheme)
    labeled = g.labels >= 0
    return TrainData(
        X=X,
        labels=g.labels,
        targets=None,
        train_idx=np.nonzero(g.train_mask & labeled)[0],
        val_idx=np.nonzero(g.val_mask & labeled)[0],
        test_idx=np.nonzero(g.test_mask & labeled)[0],
        num_classes=g.num_classes,
    )


def build_graph_data(
    coll: GraphCollection,
    k: int,
    scheme: str,
    cache: PropagationCache,
    masks: tuple[np.ndarray, np.ndarray, np.ndarray],
) -> TrainData:
    """Graph scenario: each graph mean-pools its propagated node features
    into one sample row."""
    rows = np.stack(
        [cache.features(g, k, scheme).mean(axis=0) for g in coll.graphs]
    )
    tr, va, te = masks
    return TrainData(
        X=rows,
        labels=coll.labels,
        targets=coll.targets,
        train_idx=np.nonzero(tr)[0],
        val_idx=np.nonzero(va)[0],
        test_idx=np.nonzero(te)[0],
        num_classes=coll.num_classes,
    )


# ------------------------------------------------------------ forward/loss ----


def sgc_forward(model: SGCModel, X_prop: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
    """Logits for the selected rows of the propagated feature matrix."""
    if X_prop.shape[1] != model.W.shape[0]:
        raise ShapeError(
            f"features have dim {X_prop.shape[1]}, model expects {model.W.shape[0]}"
        )
    Xb = X_prop if rows is None else X_prop[rows]
    return Xb @ model.W + model.b


def loss_and_gradient(
    W: np.ndarray,
    b: np.ndarray,
    X_prop: np.ndarray,
    labels: np.ndarray,
    rows: np.ndarray,
    weight_decay: float = 0.0,
    prox: tuple[float, np.ndarray, np.ndarray] | None = None,
    proto: tuple[float, dict[int, np.ndarray]] | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and exact gradients of the full local objective on a batch.

    `prox` is (mu, W_global, b_global); `proto` is (lambda, {class: P_c}).
    Prototype classes absent from the batch or from the global map simply
    contribute nothing.
    """
    yb = labels[rows]
    if np.any(yb < 0):
        raise ContractViolationError("unlabeled row in training batch")
    Xb = X_prop[rows]
    B = rows.size
    Z = Xb @ W + b
    shift = Z - Z.max(axis=1, keepdims=True)
    expz = np.exp(shift)
    denom = expz.sum(axis=1, keepdims=True)
    P = expz / denom
    logp = shift - np.log(denom)
    loss = float(-logp[np.arange(B), yb].mean())
    dZ = P.copy()
    dZ[np.arange(B), yb] -= 1.0
    dZ /= B
    if proto is not None:
        lam, protos = proto
        if lam > 0 and protos:
            for cls in np.unique(yb):
                target = protos.get(int(cls))
                if target is None:
                    continue
                sel = yb == cls
                nc = int(sel.sum())
                diff = Z[sel].mean(axis=0) - target
                loss += lam * (nc / B) * float(diff @ diff)
                dZ[sel] += (2.0 * lam / B) * diff
    gW = Xb.T @ dZ
    gb = dZ.sum(axis=0)
    if weight_decay:
        loss += 0.5 * weight_decay * float(np.sum(W * W))
        gW = gW + weight_decay * W
    if prox is not None:
        mu, Wg, bg = prox
        if mu:
            loss += 0.5 * mu * (float(np.sum((W - Wg) ** 2)) + float(np.sum((b - bg) ** 2)))
            gW = gW + mu * (W - Wg)
            gb = gb + mu * (b - bg)
    return loss, gW, gb


def loss_and_gradient_regression(
    W: np.ndarray,
    b: np.ndarray,
    X_prop: np.ndarray,
    targets: np.ndarray,
    rows: np.ndarray,
    weight_decay: float = 0.0,
    prox: tuple[float, np.ndarray, np.ndarray] | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Half mean squared error with the same regularizers."""
    Xb = X_prop[rows]
    B = rows.size
    pred = (Xb @ W + b).ravel()
    resid = pred - targets[rows]
    loss = 0.5 * float(np.mean(resid**2))
    dZ = (resid / B)[:, None]
    gW = Xb.T @ dZ
    gb = dZ.sum(axis=0)
    if weight_decay:
        loss += 0.5 * weight_decay * float(np.sum(W * W))
        gW = gW + weight_decay * W
    if prox is not None:
        mu, Wg, bg = prox
        if mu:
            loss += 0.5 * mu * (float(np.sum((W - Wg) ** 2)) + float(np.sum((b - bg) ** 2)))
            gW = gW + mu * (W - Wg)
            gb = gb + mu * (b - bg)
    return loss, gW, gb


# ----------------------------------------------------------------- optimizer ----


@dataclass
class OptimizerState:
    """Adam moment accumulators, one pair per named parameter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: OptimizerState,
    lr: float,
) -> dict[str, np.ndarray]:
    """One Adam update with bias correction; returns new parameters."""
    opt.t += 1
    out = {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[name] / (1.0 - opt.beta1**opt.t)
        v_hat = opt.v[name] / (1.0 - opt.beta2**opt.t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return out


def sgd_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
) -> dict[str, np.ndarray]:
    out = {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        out[name] = p - lr * g
    return out


# -------------------------------------------------------------- local train ----


@dataclass
class TrainContext:
    """What the federated algorithm injects into a local training call."""

    global_params: dict[str, np.ndarray] | None = None
    prox_mu: float = 0.0
    prototypes: dict[int, np.ndarray] | None = None
    proto_lambda: float = 0.0
    grad_correction: dict[str, np.ndarray] | None = None  # scaffold: c - c_i
    seed: int = 0


def _batches(rng: np.random.Generator, idx: np.ndarray, batch_size: int):
    order = idx[rng.permutation(idx.size)]
    if batch_size <= 0 or batch_size >= idx.size:
        yield order
        return
    for at in range(0, order.size, batch_size):
        yield order[at : at + batch_size]


def local_train(
    model: SGCModel,
    data: TrainData,
    cfg: TrainConfig,
    context: TrainContext,
) -> tuple[SGCModel, int, list[float]]:
    """Seeded mini-batch training over the local training rows.

    Returns the updated model, the local sample count, and the per-epoch
    mean training loss. A client with no training rows is skipped (count 0).
    """
    if context.global_params is not None:
        params = {k: v.copy() for k, v in context.global_params.items()}
    else:
        params = {k: v.copy() for k, v in model.params().items()}
    n_train = int(data.train_idx.size)
    if n_train == 0:
        log.warning("client has no training samples; skipping local update")
        return model.replace(params), 0, []
    prox = None
    if context.prox_mu > 0 and context.global_params is not None:
        prox = (context.prox_mu, context.global_params["W"], context.global_params["b"])
    proto = None
    if context.prototypes is not None and context.proto_lambda > 0:
        proto = (context.proto_lambda, context.prototypes)
    rng = rng_for(context.seed, "batches")
    opt = OptimizerState()
    trace: list[float] = []
    for _ in range(cfg.local_epochs):
        epoch_losses = []
        for batch in _batches(rng, data.train_idx, cfg.batch_size):
            if data.is_regression:
                loss, gW, gb = loss_and_gradient_regression(
                    params["W"], params["b"], data.X, data.targets, batch,
                    cfg.weight_decay, prox,
                )
            else:
                loss, gW, gb = loss_and_gradient(
                    params["W"], params["b"], data.X, data.labels, batch,
                    cfg.weight_decay, prox, proto,
                )
            grads = {"W": gW, "b": gb}
            if context.grad_correction is not None:
                grads = {k: grads[k] + context.grad_correction[k] for k in grads}
            if cfg.optimizer == "adam":
                params = adam_step(params, grads, opt, cfg.lr)
            else:
                params = sgd_step(params, grads, cfg.lr)
            epoch_losses.append(loss)
        trace.append(float(np.mean(epoch_losses)))
    return model.replace(params), n_train, trace


# ------------------------------------------------------------------- metrics ----


def evaluate_classification(
    logits: np.ndarray, labels: np.ndarray, mask: np.ndarray
) -> dict[str, float]:
    """Accuracy plus macro precision/recall/F1 over all classes; classes
    with no true and no predicted members contribute 0."""
    idx = np.nonzero(np.asarray(mask, dtype=bool) & (labels >= 0))[0]
    if idx.size == 0:
        raise EvaluationError("evaluation mask selects no labeled samples")
    pred = logits[idx].argmax(axis=1)
    true = labels[idx]
    c = logits.shape[1]
    precision = np.zeros(c)
    recall = np.zeros(c)
    f1 = np.zeros(c)
    for cls in range(c):
        tp = float(np.sum((pred == cls) & (true == cls)))
        fp = float(np.sum((pred == cls) & (true != cls)))
        fn = float(np.sum((pred != cls) & (true == cls)))
        if tp + fp > 0:
            precision[cls] = tp / (tp + fp)
        if tp + fn > 0:
            recall[cls] = tp / (tp + fn)
        if precision[cls] + recall[cls] > 0:
            f1[cls] = 2 * precision[cls] * recall[cls] / (precision[cls] + recall[cls])
    return {
        "accuracy": float((pred == true).mean()),
        "macro_precision": float(precision.mean()),
        "macro_recall": float(recall.mean()),
        "macro_f1": float(f1.mean()),
    }


def evaluate_regression(
    preds: np.ndarray, targets: np.ndarray, mask: np.ndarray
) -> dict[str, float]:
    idx = np.nonzero(np.asarray(mask, dtype=bool))[0]
    if idx.size == 0:
        raise EvaluationError("evaluation mask selects no samples")
    resid = np.asarray(preds).ravel()[idx] - targets[idx]
    mse = float(np.mean(resid**2))
    return {"mse": mse, "rmse": float(np.sqrt(mse))}


def compute_prototypes(
    model: SGCModel, X_prop: np.ndarray, labels: np.ndarray, train_idx: np.ndarray
) -> dict[int, tuple[np.ndarray, int]]:
    """Per-class mean logit over the training rows; absent classes omitted."""
    out: dict[int, tuple[np.ndarray, int]] = {}
    if train_idx.size == 0:
        return out
    Z = sgc_forward(model, X_prop, train_idx)
    y = labels[train_idx]
    for cls in np.unique(y):
        if cls < 0:
            continue
        sel = y == cls
        out[int(cls)] = (Z[sel].mean(axis=0), int(sel.sum()))
    return out
