"""Downstream node classifier: a two-layer symmetric-normalized graph
convolution (or an MLP for the structure-free ablation), full-batch training
with Adam and early stopping, and the 10-run evaluation protocol.

Everything is float64 numpy with hand-written gradients and a fixed
reduction order, so identical inputs and seeds give bitwise-identical
parameters and reports.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    EmptyTestSet,
    NonFiniteLoss,
    ShapeMismatch,
)
from .graph import STREAM_DROPOUT, STREAM_INIT, SplitAssignment, rng_for

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def normalize_adjacency(edges: Iterable[tuple[int, int]], n: int) -> np.ndarray:
    """Symmetric normalization with self-loops: rescale (A + I) by the
    inverse square roots of its row degrees on both sides.

    The scale factors are materialized as an outer product first, so the
    result is exactly symmetric entry by entry.
    """
    a = np.zeros((n, n), dtype=np.float64)
    for u, v in edges:
        if not (0 <= u < n and 0 <= v < n):
            raise ShapeMismatch(f"edge ({u},{v}) out of range for n={n}")
        a[u, v] = 1.0
        a[v, u] = 1.0
    a[np.diag_indices(n)] = 1.0  # self-loops; also overwrites stray (u,u) input
    deg = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return a * np.outer(inv_sqrt, inv_sqrt)


@dataclass
class GcnParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "GcnParams":
        return GcnParams(*(a.copy() for a in self.arrays()))

    def check_shapes(self, d: int, c: int) -> int:
        h = self.W1.shape[1]
        ok = (
            self.W1.shape == (d, h)
            and self.b1.shape == (h,)
            and self.W2.shape == (h, c)
            and self.b2.shape == (c,)
        )
        if not ok:
            raise ShapeMismatch(
                f"parameter shapes {[a.shape for a in self.arrays()]} "
                f"inconsistent with d={d}, C={c}"
            )
        return h


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.5
    max_epochs: int = 300
    patience: int = 30
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout {self.dropout} outside [0,1)")
        if self.patience > self.max_epochs:
            raise ConfigError("patience must be <= max_epochs")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


def init_params(d: int, hidden: int, num_classes: int, seed: int) -> GcnParams:
    """Glorot-uniform weights, zero biases, deterministic in seed."""
    rng = rng_for(seed, STREAM_INIT)

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    return GcnParams(
        W1=glorot(d, hidden),
        b1=np.zeros(hidden),
        W2=glorot(hidden, num_classes),
        b2=np.zeros(num_classes),
    )


def _dropout_mask(shape, p: float, seed: int) -> np.ndarray:
    """Inverted dropout scaling; the mask is a pure function of the seed."""
    rng = rng_for(seed, STREAM_DROPOUT)
    return (rng.random(shape) >= p) / (1.0 - p)


def _forward(X, adjacency, params: GcnParams, mask):
    """Shared forward pass; adjacency=None gives the MLP."""
    xw = X @ params.W1
    if adjacency is not None:
        xw = adjacency @ xw
    z1 = xw + params.b1
    h1 = np.maximum(z1, 0.0)
    h1d = h1 * mask if mask is not None else h1
    u = h1d @ params.W2
    if adjacency is not None:
        u = adjacency @ u
    return u + params.b2


def _check_inputs(X, adjacency, params):
    n, d = X.shape
    c = params.b2.shape[0]
    params.check_shapes(d, c)
    if adjacency is not None and adjacency.shape != (n, n):
        raise ShapeMismatch(f"adjacency shape {adjacency.shape} for n={n}")


def gcn_forward(
    X: np.ndarray,
    adjacency: np.ndarray,
    params: GcnParams,
    dropout_active: bool = False,
    seed: int = 0,
    dropout_p: float = 0.5,
) -> np.ndarray:
    _check_inputs(X, adjacency, params)
    mask = None
    if dropout_active:
        mask = _dropout_mask((X.shape[0], params.W1.shape[1]), dropout_p, seed)
    return _forward(X, adjacency, params, mask)


def mlp_forward(
    X: np.ndarray,
    params: GcnParams,
    dropout_active: bool = False,
    seed: int = 0,
    dropout_p: float = 0.5,
) -> np.ndarray:
    _check_inputs(X, None, params)
    mask = None
    if dropout_active:
        mask = _dropout_mask((X.shape[0], params.W1.shape[1]), dropout_p, seed)
    return _forward(X, None, params, mask)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(
    X: np.ndarray,
    adjacency: np.ndarray | None,
    params: GcnParams,
    labels: np.ndarray,
    train_ids: np.ndarray,
    weight_decay: float,
    mask: np.ndarray | None,
):
    """Mean cross-entropy over train ids (ascending order) plus L2 decay on
    the two weight matrices; returns (loss, GcnParams-shaped grads)."""
    ax = adjacency @ X if adjacency is not None else X
    z1 = ax @ params.W1 + params.b1
    h1 = np.maximum(z1, 0.0)
    h1d = h1 * mask if mask is not None else h1
    u = h1d @ params.W2
    pre2 = adjacency @ u if adjacency is not None else u
    logits = pre2 + params.b2

    probs = softmax_rows(logits[train_ids])
    picked = probs[np.arange(len(train_ids)), labels[train_ids]]
    ce = float(-np.mean(np.log(picked)))
    reg = 0.5 * weight_decay * (float(np.sum(params.W1**2)) + float(np.sum(params.W2**2)))
    loss = ce + reg

    dlogits = np.zeros_like(logits)
    grad_rows = probs.copy()
    grad_rows[np.arange(len(train_ids)), labels[train_ids]] -= 1.0
    dlogits[train_ids] = grad_rows / len(train_ids)

    du = adjacency @ dlogits if adjacency is not None else dlogits
    gW2 = h1d.T @ du + weight_decay * params.W2
    gb2 = dlogits.sum(axis=0)
    dh1d = du @ params.W2.T
    dh1 = dh1d * mask if mask is not None else dh1d
    dz1 = dh1 * (z1 > 0.0)
    gW1 = ax.T @ dz1 + weight_decay * params.W1
    gb1 = dz1.sum(axis=0)
    return loss, GcnParams(gW1, gb1, gW2, gb2)


@dataclass
class TrainResult:
    params: GcnParams
    best_val_accuracy: float
    epochs_run: int
    train_losses: list[float] = field(default_factory=list)
    val_accuracies: list[float] = field(default_factory=list)


def _accuracy(params, X, adjacency, labels, ids) -> float:
    logits = _forward(X, adjacency, params, mask=None)
    # argmax breaks ties toward the lowest class index
    pred = np.argmax(logits[ids], axis=1)
    return float(np.mean(pred == labels[ids]))


def train(
    X: np.ndarray,
    adjacency: np.ndarray | None,
    labels: Sequence[int],
    split: SplitAssignment,
    config: TrainConfig,
) -> TrainResult:
    """Full-batch Adam with early stopping on validation accuracy.

    Stops once validation accuracy has failed to strictly improve for more
    than `patience` consecutive epochs (patience=0 stops at the first
    non-improving epoch). Returns the parameters achieving the best
    validation accuracy; among tying epochs the latest wins, since later
    epochs are better converged on the training loss.
    """
    labels = np.asarray(labels, dtype=np.int64)
    train_ids = np.asarray(split.train_ids, dtype=np.int64)
    val_ids = np.asarray(split.val_ids, dtype=np.int64)
    num_classes = int(labels.max()) + 1
    params = init_params(X.shape[1], config.hidden, num_classes, config.seed)
    _check_inputs(X, adjacency, params)

    m = [np.zeros_like(a) for a in params.arrays()]
    v = [np.zeros_like(a) for a in params.arrays()]
    best_val = -1.0
    best_params = params.copy()
    stale = 0
    losses: list[float] = []
    val_accs: list[float] = []
    epochs_run = 0

    for epoch in range(config.max_epochs):
        epochs_run = epoch + 1
        mask = None
        if config.dropout > 0.0:
            mask = _dropout_mask(
                (X.shape[0], config.hidden), config.dropout, config.seed + epoch
            )
        loss, grads = loss_and_grads(
            X, adjacency, params, labels, train_ids, config.weight_decay, mask
        )
        if not np.isfinite(loss):
            raise NonFiniteLoss(
                f"loss became {loss} at epoch {epoch} "
                f"(lr={config.learning_rate}, wd={config.weight_decay})"
            )
        losses.append(loss)

        t = epoch + 1
        for slot, (p, g) in enumerate(zip(params.arrays(), grads.arrays())):
            m[slot] = ADAM_BETA1 * m[slot] + (1 - ADAM_BETA1) * g
            v[slot] = ADAM_BETA2 * v[slot] + (1 - ADAM_BETA2) * (g * g)
            m_hat = m[slot] / (1 - ADAM_BETA1**t)
            v_hat = v[slot] / (1 - ADAM_BETA2**t)
            p -= config.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

        val_acc = _accuracy(params, X, adjacency, labels, val_ids)
        val_accs.append(val_acc)
        if val_acc >= best_val:
            best_params = params.copy()
        if val_acc > best_val:
            best_val = val_acc
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break

    return TrainResult(
        params=best_params,
        best_val_accuracy=best_val,
        epochs_run=epochs_run,
        train_losses=losses,
        val_accuracies=val_accs,
    )


def evaluate(
    params: GcnParams,
    X: np.ndarray,
    adjacency: np.ndarray | None,
    labels: Sequence[int],
    split: SplitAssignment,
) -> float:
    if not split.test_ids:
        raise EmptyTestSet("no test ids in split")
    labels = np.asarray(labels, dtype=np.int64)
    return _accuracy(params, X, adjacency, labels, np.asarray(split.test_ids))


# ---------------------------------------------------------------------------
# experiment protocol


@dataclass(frozen=True)
class ExperimentReport:
    per_seed_accuracy: tuple[float, ...]
    mean: float
    std: float
    config_fingerprint: str

    def __post_init__(self):
        mean, std = _mean_std(self.per_seed_accuracy)
        if abs(mean - self.mean) > 1e-12 or abs(std - self.std) > 1e-12:
            raise ConfigError("report mean/std do not match per-seed accuracies")

    def as_dict(self) -> dict:
        return {
            "per_seed_accuracy": list(self.per_seed_accuracy),
            "mean": self.mean,
            "std": self.std,
            "config_fingerprint": self.config_fingerprint,
        }


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    # sample standard deviation; a single run reports 0 by convention
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return mean, std


def protocol_report(accuracies: Sequence[float], fingerprint: str = "") -> ExperimentReport:
    if not accuracies:
        raise ConfigError("protocol needs at least one run")
    mean, std = _mean_std(accuracies)
    return ExperimentReport(
        per_seed_accuracy=tuple(float(a) for a in accuracies),
        mean=mean,
        std=std,
        config_fingerprint=fingerprint,
    )


def run_protocol(
    run_fn: Callable[[int, int], float],
    base_seed: int,
    runs: int = 10,
    fingerprint: str = "",
) -> ExperimentReport:
    """Run `runs` independent (split seed, init seed) trials and summarize.

    run_fn(split_seed, init_seed) must return one test accuracy; the r-th
    trial uses split seed base_seed + r and init seed base_seed + r.
    """
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    accuracies = [run_fn(base_seed + r, base_seed + r) for r in range(runs)]
    return protocol_report(accuracies, fingerprint)


def format_accuracy(mean: float, std: float) -> str:
    """Percent with two decimals, the usual 'mean ± std' table cell."""
    return f"{100.0 * mean:.2f} ± {100.0 * std:.2f}"


def render_report_table(rows: Sequence[tuple[str, ExperimentReport]]) -> str:
    """Aligned text table of (setting, accuracy) rows."""
    label_width = max([len("setting")] + [len(label) for label, _ in rows])
    lines = [f"{'setting'.ljust(label_width)}  accuracy"]
    for label, report in rows:
        lines.append(f"{label.ljust(label_width)}  {format_accuracy(report.mean, report.std)}")
    return "\n".join(lines) + "\n"


def report_fingerprint(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
