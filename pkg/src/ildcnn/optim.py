"""Losses, the Adam optimizer and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, DataError, DimensionError, NumericError
from .model import Network

log = logging.getLogger(__name__)

CROSS_ENTROPY = "categorical_cross_entropy"
MSE = "mean_squared_error"
LOSSES = (CROSS_ENTROPY, MSE)

PROB_FLOOR = 1e-12


# -- losses ----------------------------------------------------------------


def one_hot(labels, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def _check_targets(probs: np.ndarray, targets: np.ndarray) -> None:
    if probs.shape != targets.shape or probs.ndim != 2:
        raise DimensionError(f"predictions {probs.shape} and targets {targets.shape} must be equal N x K")
    if not (np.all((targets == 0) | (targets == 1)) and np.all(targets.sum(axis=1) == 1)):
        raise ValueError("targets must be one-hot rows")


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean over the batch of ``-sum(t * log p)``, with ``p`` floored at 1e-12."""
    _check_targets(probs, targets)
    tol = 1e-5 if probs.dtype == np.float64 else 1e-4
    if not np.allclose(probs.sum(axis=1), 1.0, atol=tol, rtol=0):
        raise ValueError("probability rows must sum to 1")
    logp = np.log(np.clip(probs, PROB_FLOOR, 1.0))
    return float(-(targets * logp).sum() / probs.shape[0])


def cross_entropy_softmax_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of ``cross_entropy(softmax(logits))`` w.r.t. the logits."""
    probs = nn.softmax(logits)
    _check_targets(probs, targets)
    return (probs - targets) / probs.shape[0]


def mse_loss(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared difference over all N*K entries."""
    _check_targets(probs, targets)
    diff = probs - targets
    return float((diff * diff).mean())


def mse_softmax_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of ``mse_loss(softmax(logits))`` w.r.t. the logits."""
    probs = nn.softmax(logits)
    _check_targets(probs, targets)
    g = 2.0 * (probs - targets) / probs.size
    # softmax Jacobian-vector product: p * (g - <g, p>)
    return probs * (g - (g * probs).sum(axis=1, keepdims=True))


def loss_and_grad(logits: np.ndarray, targets: np.ndarray, loss: str):
    """``(loss value, dLoss/dLogits, probabilities)`` for one batch."""
    probs = nn.softmax(logits)
    if loss == CROSS_ENTROPY:
        return cross_entropy(probs, targets), cross_entropy_softmax_grad(logits, targets), probs
    if loss == MSE:
        return mse_loss(probs, targets), mse_softmax_grad(logits, targets), probs
    raise ConfigError(f"unknown loss {loss!r}; choose from {LOSSES}")


# -- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)


def adam_step(params: list, grads: list, state: AdamState, lr: float):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Returns ``(params, state)`` for convenience.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(
            f"adam_step got {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"adam_step shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


# -- training loop ---------------------------------------------------------


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-5
    batch_size: int = 32
    epochs: int = 50
    loss: str = CROSS_ENTROPY
    seed: int = 0
    validation_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    eval_batch_size: int = 256

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch normalization)")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class _Arrays:
    images: np.ndarray
    labels: np.ndarray


def _arrays(ds) -> _Arrays:
    if isinstance(ds, tuple):
        images, labels = ds
    else:
        images, labels = ds.images, ds.labels
    return _Arrays(np.asarray(images), np.asarray(labels, dtype=np.int64))


def holdout_indices(labels: np.ndarray, fraction: float, rng: np.random.Generator):
    """Stratified ``(keep, held)`` index arrays, ``round(fraction * n_c)`` held per class."""
    keep, held = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        held.append(idx[:k])
        keep.append(idx[k:])
    return np.sort(np.concatenate(keep)), np.sort(np.concatenate(held))


def evaluate(net: Network, images: np.ndarray, labels: np.ndarray, loss: str = CROSS_ENTROPY, batch_size: int = 256):
    """Infer-mode ``(mean loss, accuracy)`` over a labeled set."""
    total_loss = 0.0
    correct = 0
    for i in range(0, len(images), batch_size):
        x, y = images[i : i + batch_size], labels[i : i + batch_size]
        logits = net.logits(x, nn.INFER)
        value, _, probs = loss_and_grad(logits.astype(np.float64), one_hot(y, net.spec.num_classes), loss)
        total_loss += value * len(x)
        correct += int((probs.argmax(axis=1) == y).sum())
    n = len(images)
    return total_loss / n, correct / n


def fit(net: Network, train_set, val_set=None, config: TrainingConfig | None = None, on_epoch=None):
    """Train ``net`` in place with Adam; returns ``(net, records)``.

    ``train_set``/``val_set`` are datasets with ``images``/``labels`` or
    ``(images, labels)`` tuples. Without ``val_set`` a stratified
    ``validation_fraction`` is carved from the training data. Each epoch
    reshuffles with a generator seeded from ``config.seed``; a trailing batch
    of one sample is dropped. Train loss/accuracy are running means over the
    epoch's train-mode batches, validation figures come from an infer-mode
    pass.
    """
    config = config or TrainingConfig()
    config.validate()
    train = _arrays(train_set)
    if len(train.images) == 0:
        raise DataError("training set is empty")
    k = net.spec.num_classes
    if train.labels.min() < 0 or train.labels.max() >= k:
        raise DataError(f"training labels must lie in [0, {k})")

    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 2]))
    if val_set is None:
        if config.validation_fraction == 0:
            raise ConfigError("no validation set given and validation_fraction is 0")
        keep, held = holdout_indices(train.labels, config.validation_fraction, rng)
        val = _Arrays(train.images[held], train.labels[held])
        train = _Arrays(train.images[keep], train.labels[keep])
    else:
        val = _arrays(val_set)
    if len(val.images) == 0 or len(train.images) < 2:
        raise DataError("need at least 2 training samples and 1 validation sample")

    # reseed dropout so a run depends only on (net seed, config seed)
    net.rng = np.random.default_rng(np.random.SeedSequence([net.seed, int(config.seed), 1]))
    params = [p for _, p in net.parameters()]
    state = AdamState.zeros_like(params, beta1=config.beta1, beta2=config.beta2, epsilon=config.adam_epsilon)
    targets_all = one_hot(train.labels, k, dtype=net.dtype)
    records: list[EpochRecord] = []
    n = len(train.images)
    bs = config.batch_size

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        loss_sum, correct, seen = 0.0, 0, 0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            if idx.size < 2:
                continue
            x = train.images[idx]
            t = targets_all[idx]
            logits = net.logits(x, nn.TRAIN)
            value, d_logits, probs = loss_and_grad(logits, t, config.loss)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            net.backward(d_logits.astype(net.dtype, copy=False))
            adam_step(params, net.gradients(), state, config.learning_rate)
            loss_sum += value * idx.size
            correct += int((probs.argmax(axis=1) == train.labels[idx]).sum())
            seen += idx.size
        val_loss, val_acc = evaluate(net, val.images, val.labels, config.loss, config.eval_batch_size)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, loss_sum / seen, correct / seen, val_loss, val_acc)
        records.append(rec)
        log.info(
            "epoch %d/%d loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
            epoch, config.epochs, rec.train_loss, rec.train_accuracy, rec.val_loss, rec.val_accuracy,
        )
        if on_epoch is not None:
            on_epoch(rec)
    net.metadata = dict(net.metadata, epoch=len(records), train_seed=int(config.seed))
    return net, records


CURVE_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


def write_curves(records: list[EpochRecord], path) -> None:
    """Write per-epoch curves as a 5-column CSV with a header row."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in records:
            w.writerow(
                [r.epoch] + [f"{v:.6f}" for v in (r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy)]
            )


def read_curves(path) -> list[EpochRecord]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CURVE_HEADER:
        raise DataError(f"{path}: not a training-curve file")
    return [EpochRecord(int(r[0]), *map(float, r[1:])) for r in rows[1:]]
