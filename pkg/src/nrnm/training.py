"""Optimizers, the training loop, evaluation, and metrics/checkpoint output.

Metrics rows follow the CSV schema ``epoch,step,split,loss,accuracy,wall_ms,seed``.
All stochastic choices (shuffling, dropout) come from generators seeded by
the training seed, so two runs with identical configs produce identical
metrics apart from the wall_ms column.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .errors import ConfigError, DivergenceError, NumericError
from .model import SequenceBatch, loss_from_logits
from .tensor import GradTape, Tensor, zero_gradients

METRICS_HEADER = ("epoch", "step", "split", "loss", "accuracy", "wall_ms", "seed")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = 5.0
    epochs: int = 20
    batch_size: int = 32
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer={self.optimizer!r} not in {{adam, sgd}}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate {self.lr} must be > 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm {self.clip_norm} must be > 0 or None")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, eval_every >= 1 required")


class AdamState:
    """First/second moment estimates plus the shared timestep."""

    def __init__(self, params: list[tuple[str, Tensor]]):
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}
        self.t = 0


def adam_step(
    params: list[tuple[str, Tensor]],
    grads: list[np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> None:
    """Bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for (name, p), g in zip(params, grads):
        if not np.isfinite(g).all():
            raise NumericError(f"NaN/Inf gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= cfg.lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)


def sgd_step(
    params: list[tuple[str, Tensor]], grads: list[np.ndarray], cfg: TrainConfig
) -> None:
    for (name, p), g in zip(params, grads):
        if not np.isfinite(g).all():
            raise NumericError(f"NaN/Inf gradient for parameter {name!r}")
        p.data -= cfg.lr * g


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Rescale so the global L2 norm is at most max_norm; direction kept."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        factor = max_norm / total
        for g in grads:
            g *= factor
    return grads


@dataclass
class Dataset:
    """In-memory split: padded sequences, lengths, labels."""

    x: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return self.x.shape[0]

    def batch(self, idx: np.ndarray) -> SequenceBatch:
        return SequenceBatch(self.x[idx], self.lengths[idx], self.labels[idx])

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None):
        order = np.arange(len(self)) if order is None else order
        for lo in range(0, len(order), batch_size):
            yield self.batch(order[lo : lo + batch_size])


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    best_accuracy: float = -1.0
    best_epoch: int = -1
    final_params: Optional[dict] = None


def evaluate(model, dataset: Dataset, batch_size: int) -> tuple[float, float]:
    """Mean NLL and accuracy over a split, dropout disabled."""
    total_loss = 0.0
    correct = 0
    for batch in dataset.batches(batch_size):
        result = model.forward(batch)
        loss = loss_from_logits(result.logits, batch.labels)
        total_loss += loss.item() * batch.size
        correct += int((np.argmax(result.logits.data, axis=1) == batch.labels).sum())
    n = len(dataset)
    return total_loss / n, correct / n


def _metrics_row(epoch, step, split, loss, accuracy, wall_ms, seed) -> dict:
    return {
        "epoch": epoch,
        "step": step,
        "split": split,
        "loss": repr(float(loss)),
        "accuracy": repr(float(accuracy)),
        "wall_ms": repr(float(wall_ms)),
        "seed": seed,
    }


def write_metrics(path, rows: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        writer.writeheader()
        writer.writerows(rows)


def train(
    model,
    train_cfg: TrainConfig,
    train_set: Dataset,
    val_set: Optional[Dataset] = None,
    out_dir: Optional[str] = None,
    checkpoint_meta: Optional[dict] = None,
) -> TrainResult:
    """Optimize the model; returns metrics history and retains checkpoints.

    Writes ``metrics.csv``, ``best.npz`` (highest validation accuracy) and
    ``last.npz`` under ``out_dir`` when given. A non-finite loss aborts with
    ``DivergenceError`` after checkpointing the last finite state.
    """
    if len(train_set) == 0:
        raise ConfigError("training dataset is empty")
    params = sorted(model.named_parameters().items())
    adam = AdamState(params) if train_cfg.optimizer == "adam" else None
    shuffle_rng = np.random.default_rng([train_cfg.seed, 1])
    dropout_rng = np.random.default_rng([train_cfg.seed, 2])
    result = TrainResult()
    out = Path(out_dir) if out_dir is not None else None
    meta = dict(checkpoint_meta or {})
    snapshot = {name: p.data.copy() for name, p in params}

    def save(name: str) -> None:
        if out is not None:
            ckpt.save_params(out / name, dict(params), meta)

    def diverge(epoch: int, step: int, why) -> None:
        for name, p in params:
            np.copyto(p.data, snapshot[name])
        save("last.npz")
        if out is not None:
            write_metrics(out / "metrics.csv", result.metrics)
        raise DivergenceError(f"diverged at epoch {epoch}, step {step}: {why}")

    save("last.npz")  # 0-epoch runs keep the initialization
    save("best.npz")
    step = 0
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_set))
        epoch_loss = 0.0
        epoch_correct = 0
        for batch in train_set.batches(train_cfg.batch_size, order):
            try:
                with GradTape() as tape:
                    result_fwd = model.forward(batch, training=True, rng=dropout_rng)
                    loss = loss_from_logits(result_fwd.logits, batch.labels)
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise NumericError("non-finite loss")
                tape.backward(loss)
                grads = [
                    p.grad if p.grad is not None else np.zeros_like(p.data)
                    for _, p in params
                ]
                if train_cfg.clip_norm is not None:
                    clip_gradients(grads, train_cfg.clip_norm)
                if adam is not None:
                    adam_step(params, grads, adam, train_cfg)
                else:
                    sgd_step(params, grads, train_cfg)
            except NumericError as err:
                diverge(epoch, step, err)
            zero_gradients(p for _, p in params)
            if any(not np.isfinite(p.data).all() for _, p in params):
                diverge(epoch, step, "parameter update left the finite domain")
            for name, p in params:
                np.copyto(snapshot[name], p.data)
            epoch_loss += loss_value * batch.size
            epoch_correct += int(
                (np.argmax(result_fwd.logits.data, axis=1) == batch.labels).sum()
            )
            step += 1
        wall_ms = (time.perf_counter() - t0) * 1000.0
        n = len(train_set)
        result.metrics.append(
            _metrics_row(
                epoch, step, "train", epoch_loss / n, epoch_correct / n,
                wall_ms, train_cfg.seed,
            )
        )
        is_last = epoch == train_cfg.epochs - 1
        if val_set is not None and (epoch % train_cfg.eval_every == 0 or is_last):
            t1 = time.perf_counter()
            val_loss, val_acc = evaluate(model, val_set, train_cfg.batch_size)
            eval_ms = (time.perf_counter() - t1) * 1000.0
            result.metrics.append(
                _metrics_row(
                    epoch, step, "val", val_loss, val_acc, eval_ms, train_cfg.seed
                )
            )
            if val_acc > result.best_accuracy:
                result.best_accuracy = val_acc
                result.best_epoch = epoch
                save("best.npz")
    save("last.npz")
    result.final_params = {name: p.data.copy() for name, p in params}
    if out is not None:
        write_metrics(out / "metrics.csv", result.metrics)
    return result
