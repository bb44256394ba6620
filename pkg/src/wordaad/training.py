"""Mini-batch training with best-validation checkpointing, and balanced accuracy."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import EpochSet
from .eegnet import EEGNet, forward
from .nn import AdamState, adam_step, bce_loss
from .rng import as_stream

logger = logging.getLogger(__name__)


VAL_CACHE_LIMIT = 4096


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-4
    # Desk-scale knobs; None reproduces full passes over all data.
    batches_per_pass: int | None = None
    val_subsample: int | None = None

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size (> 1) and lr must be positive")


class ArrayData:
    """In-memory ``(X, y)`` exposing the ``label`` / ``batch`` protocol used by :func:`train`."""

    def __init__(self, X, y):
        self.X = np.asarray(X, dtype=np.float32)
        self.label = np.asarray(y, dtype=np.int64)

    def __len__(self):
        return len(self.label)

    def batch(self, index):
        return self.X[np.asarray(index)]


def as_dataset(obj):
    if isinstance(obj, EpochSet):
        return ArrayData(obj.data, obj.label)
    if isinstance(obj, tuple) and len(obj) == 2:
        return ArrayData(*obj)
    if hasattr(obj, "batch") and hasattr(obj, "label"):
        return obj
    raise TypeError(f"cannot train on {type(obj).__name__}")


@dataclass
class TrainResult:
    best_state: dict
    best_pass: int
    best_val_loss: float
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    final_state: dict = None
    seconds: float = 0.0


def evaluate_loss(model: EEGNet, data, index=None, chunk=256) -> tuple[float, np.ndarray]:
    """Mean BCE in eval mode and the probabilities, over ``index`` (all rows by default)."""
    index = np.arange(len(data)) if index is None else np.asarray(index)
    probs = np.empty(len(index), dtype=np.float32)
    for i in range(0, len(index), chunk):
        probs[i:i + chunk] = forward(model, data.batch(index[i:i + chunk]), mode="eval")
    loss, _ = bce_loss(probs.astype(np.float64), data.label[index])
    return loss, probs


def train(model: EEGNet, train_set, val_set, cfg: TrainConfig = None, rng=None) -> TrainResult:
    """Adam training; returns the state with the lowest validation BCE (earliest on ties)."""
    cfg = cfg or TrainConfig()
    rng = as_stream(rng, "train")
    train_set, val_set = as_dataset(train_set), as_dataset(val_set)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    val_index = np.arange(len(val_set))
    if cfg.val_subsample is not None and cfg.val_subsample < len(val_set):
        val_index = np.sort(rng.child("val_subsample").draw_choice(len(val_set), cfg.val_subsample))
    if len(val_index) <= VAL_CACHE_LIMIT and not isinstance(val_set, ArrayData):
        # Materialise lazily augmented validation rows once instead of every pass.
        val_set = ArrayData(np.concatenate([val_set.batch(val_index[i:i + 256])
                                            for i in range(0, len(val_index), 256)]), val_set.label[val_index])
        val_index = np.arange(len(val_index))
    adam = AdamState(lr=cfg.lr)
    result = TrainResult(best_state=model.state(), best_pass=-1, best_val_loss=np.inf)
    start = time.perf_counter()
    n = len(train_set)
    for epoch in range(cfg.epochs):
        p_rng = rng.child(f"pass={epoch}")
        order = p_rng.child("shuffle").permutation(n)
        if cfg.batches_per_pass is not None:
            order = order[: cfg.batches_per_pass * cfg.batch_size]
        losses = []
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            if len(idx) < 2:
                continue
            x = train_set.batch(idx)[:, None]
            y = train_set.label[idx]
            model.set_dropout_rng(p_rng.child(f"batch={b}"))
            p = model.forward(x, training=True)
            loss, grad = bce_loss(p, y)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at pass {epoch}, batch {b}")
            model.zero_grad()
            model.backward(grad)
            adam_step(model.params(), model.grads(), adam)
            model.apply_constraints()
            losses.append(loss)
        model.set_dropout_rng(None)
        val_loss, _ = evaluate_loss(model, val_set, val_index)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss after pass {epoch}")
        result.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        result.val_loss.append(val_loss)
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_pass = epoch
            result.best_state = model.state()
        logger.debug("pass %d: train %.4f val %.4f", epoch, result.train_loss[-1], val_loss)
    result.final_state = model.state()
    result.seconds = time.perf_counter() - start
    return result


def balanced_accuracy(probs, labels, threshold=0.5) -> float:
    """Mean of the per-class recalls with predictions ``probs >= threshold``."""
    probs = np.asarray(probs, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if probs.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if not (np.any(labels == 1) and np.any(labels == 0)):
        raise ValueError("balanced accuracy needs both classes in the labels")
    pred = probs >= threshold
    tpr = np.mean(pred[labels == 1])
    tnr = np.mean(~pred[labels == 0])
    return float((tpr + tnr) / 2)
