"""Adam, plateau learning-rate schedule, early stopping and the epoch loop."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .models import ConfigError, Model, Parameter

log = logging.getLogger(__name__)

# Per-model hyperparameters (epochs, LR, min LR, factor, patience, es_patience).
MODEL_DEFAULTS = {
    "eegnet": dict(epochs=100, learning_rate=0.1, min_lr=0.001, factor=0.25, patience=7, es_patience=18),
    "deepconvnet": dict(epochs=120, learning_rate=0.01, min_lr=0.001, factor=0.25, patience=10, es_patience=30),
    "min2net": dict(epochs=200, learning_rate=0.01, min_lr=0.0006, factor=0.5, patience=12, es_patience=32),
}

IMPROVEMENT_TOLERANCE = 1e-8


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss or gradient; carries diagnostics."""


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.1
    min_lr: float = 0.001
    factor: float = 0.25
    patience: int = 7
    es_patience: int = 18
    batch_size: int = 64
    seed: int = 0
    validation_fraction: float = 0.1
    monitor: str = "val_loss"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"factor must be in (0, 1), got {self.factor}")
        if self.min_lr > self.learning_rate:
            raise ConfigError(f"min_lr {self.min_lr} exceeds learning_rate {self.learning_rate}")
        if self.patience > self.es_patience:
            raise ConfigError(f"patience {self.patience} exceeds es_patience {self.es_patience}")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ConfigError(f"validation_fraction must be in (0, 0.5), got {self.validation_fraction}")
        if self.monitor not in ("val_loss", "train_loss"):
            raise ConfigError(f"monitor must be 'val_loss' or 'train_loss', got {self.monitor!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    @classmethod
    def for_model(cls, kind: str, **overrides) -> "TrainConfig":
        """Defaults from the hyperparameter table for ``kind``, then overrides."""
        return cls(**{**MODEL_DEFAULTS[kind], **overrides})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    improved: bool
    monitored: float
    train_accuracy: float = float("nan")


@dataclass
class EpochTrace:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def lrs(self) -> list[float]:
        return [r.lr for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "lr", "improved"])
        for r in self.records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr), int(r.improved)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, monitor: str = "val_loss") -> "EpochTrace":
        trace = cls()
        for row in csv.DictReader(io.StringIO(text)):
            train, val = float(row["train_loss"]), float(row["val_loss"])
            rec = EpochRecord(
                int(row["epoch"]), train, val, float(row["lr"]), bool(int(row["improved"])),
                val if monitor == "val_loss" else train,
            )
            trace.records.append(rec)
        return trace


# ----------------------------------------------------------------------
# schedule semantics (pure functions of the trace)


def is_improvement(value: float, best: float, tol: float = IMPROVEMENT_TOLERANCE) -> bool:
    return value < best - tol


def epochs_without_improvement(trace: EpochTrace) -> int:
    count = 0
    for rec in reversed(trace.records):
        if rec.improved:
            break
        count += 1
    return count


def _plateau_wait(trace: EpochTrace) -> int:
    """Non-improving epochs since the last improvement or LR cut."""
    records = trace.records
    if not records:
        return 0
    current = records[-1].lr
    count = 0
    for rec in reversed(records):
        if rec.improved or rec.lr != current:
            break
        count += 1
    return count


def reduce_lr_on_plateau(trace: EpochTrace, current_lr: float, cfg: TrainConfig) -> float:
    """Learning rate for the next epoch.

    Once ``cfg.patience`` consecutive epochs (at the current rate) pass
    without improvement the rate becomes ``max(current_lr * factor, min_lr)``;
    the cut itself restarts the count.
    """
    if current_lr <= cfg.min_lr:
        return current_lr
    if _plateau_wait(trace) >= cfg.patience:
        return max(current_lr * cfg.factor, cfg.min_lr)
    return current_lr


def early_stop_check(trace: EpochTrace, cfg: TrainConfig) -> bool:
    """True once ``cfg.es_patience`` consecutive epochs failed to improve."""
    return epochs_without_improvement(trace) >= cfg.es_patience


def record_epoch(trace: EpochTrace, epoch, train_loss, val_loss, lr, monitor, best) -> tuple[EpochRecord, float]:
    monitored = val_loss if monitor == "val_loss" else train_loss
    improved = is_improvement(monitored, best)
    rec = EpochRecord(epoch, train_loss, val_loss, lr, improved, monitored)
    trace.records.append(rec)
    if improved:
        trace.best_epoch = epoch
        best = monitored
    return rec, best


def simulate_schedule(monitored: Sequence[float], cfg: TrainConfig, early_stopping: bool = True) -> EpochTrace:
    """Replay the LR schedule and early stopping against scripted monitor values.

    Stops when the sequence is exhausted, when ``cfg.epochs`` is reached or
    when early stopping fires.
    """
    trace = EpochTrace()
    lr = cfg.learning_rate
    best = math.inf
    for epoch, value in enumerate(monitored[: cfg.epochs], start=1):
        _, best = record_epoch(trace, epoch, value, value, lr, "val_loss", best)
        if early_stopping and early_stop_check(trace, cfg):
            trace.stopped_early = epoch < cfg.epochs
            break
        lr = reduce_lr_on_plateau(trace, lr, cfg)
    return trace


# ----------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Parameter]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place, followed by max-norm projection."""
    for p, g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for parameter {p.name!r} at step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.dtype)
        if isinstance(p, Parameter):
            p.apply_constraint()
    return state


# ----------------------------------------------------------------------
# data plumbing


def stratified_split(labels: np.ndarray, groups: np.ndarray, fraction: float, rng: np.random.Generator):
    """Train/validation index arrays, stratified by (group, class)."""
    val = []
    for g in np.unique(groups):
        for c in np.unique(labels):
            idx = np.nonzero((groups == g) & (labels == c))[0]
            if len(idx) == 0:
                continue
            n_val = int(round(fraction * len(idx)))
            val.extend(rng.permutation(idx)[:n_val].tolist())
    val = np.sort(np.asarray(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(labels)), val)
    return train, val


def stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled minibatches, each holding a proportional share of every class."""
    n_batches = max(1, math.ceil(len(labels) / batch_size))
    parts: list[list[np.ndarray]] = [[] for _ in range(n_batches)]
    for c in np.unique(labels):
        idx = rng.permutation(np.nonzero(labels == c)[0])
        for b, chunk in enumerate(np.array_split(idx, n_batches)):
            parts[b].append(chunk)
    return [rng.permutation(np.concatenate(p)) for p in parts]


def evaluate_loss(model: Model, X: np.ndarray, y: np.ndarray, batch_size: int) -> float:
    """Inference-mode loss averaged over trials."""
    total = 0.0
    for batch in stratified_batches(y, batch_size, np.random.default_rng(0)):
        loss, _ = model.loss(X[batch], y[batch], training=False)
        total += loss.item() * len(batch)
    return total / len(y)


# ----------------------------------------------------------------------
# epoch loop


def fit(
    model: Model,
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    groups: np.ndarray | None = None,
) -> tuple[Model, EpochTrace]:
    """Train ``model`` in place and return it restored to its best epoch.

    ``X`` is (n_trials, n_channels, n_samples), ``y`` holds class indices and
    ``groups`` the subject of each trial (used to stratify the validation
    split).  Inputs are never modified.
    """
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ConfigError("training data is empty")
    if len(np.unique(y)) < 2:
        raise ConfigError("training data must contain at least two classes")
    groups = np.zeros(len(y), dtype=np.int64) if groups is None else np.asarray(groups)
    rng = np.random.default_rng(cfg.seed)
    model.reseed(cfg.seed + 1)

    if cfg.monitor == "val_loss":
        train_idx, val_idx = stratified_split(y, groups, cfg.validation_fraction, rng)
        if len(val_idx) == 0:
            raise ConfigError("validation split is empty; add trials or raise validation_fraction")
    else:
        train_idx, val_idx = np.arange(len(y)), np.array([], dtype=np.int64)
    Xt, yt = X[train_idx], y[train_idx]
    Xv, yv = X[val_idx], y[val_idx]
    if len(np.unique(yt)) < 2:
        raise ConfigError("training split lost a class")

    params = model.parameters()
    state = AdamState.zeros_like(params)
    trace = EpochTrace()
    lr = cfg.learning_rate
    best = math.inf
    best_state = model.state()

    for epoch in range(1, cfg.epochs + 1):
        total, correct = 0.0, 0
        for b, batch in enumerate(stratified_batches(yt, cfg.batch_size, rng)):
            model.zero_grad()
            loss, probs = model.loss(Xt[batch], yt[batch], training=True)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAborted(f"non-finite training loss at epoch {epoch}, batch {b}")
            loss.backward()
            adam_step(params, [p.grad for p in params], state, lr, cfg.beta1, cfg.beta2, cfg.adam_epsilon)
            total += value * len(batch)
            correct += int((probs.argmax(axis=1) == yt[batch]).sum())
        model.zero_grad()
        train_loss = total / len(yt)
        val_loss = evaluate_loss(model, Xv, yv, cfg.batch_size) if len(yv) else float("nan")
        if cfg.monitor == "val_loss" and not math.isfinite(val_loss):
            raise TrainingAborted(f"non-finite validation loss at epoch {epoch}")
        rec, best = record_epoch(trace, epoch, train_loss, val_loss, lr, cfg.monitor, best)
        rec.train_accuracy = correct / len(yt)
        if rec.improved:
            best_state = model.state()
        log.debug("epoch %d train %.4f val %.4f lr %g%s", epoch, train_loss, val_loss, lr, " *" if rec.improved else "")
        if early_stop_check(trace, cfg):
            trace.stopped_early = epoch < cfg.epochs
            break
        lr = reduce_lr_on_plateau(trace, lr, cfg)

    model.load_state(best_state)
    return model, trace


def accuracy(model: Model, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(model.predict(X) == np.asarray(y)))
