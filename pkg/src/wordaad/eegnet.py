"""The adapted EEGNet: two convolutional blocks and a sigmoid read-out."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .nn import (ELU, AvgPool, BatchNorm, DenseSigmoid, DepthwiseSpatial, Dropout, Flatten, FusedFrontEnd,
                 SeparableConv, Sequential, TemporalConv, max_norm_project)
from .rng import RngStream, as_stream
from .validation import check_epochs, check_labels


@dataclass(frozen=True)
class EegNetConfig:
    F1: int = 8
    K1: int = 128
    D: int = 2
    C: int = 32
    F2: int = 32
    K2: int = 16
    pool1: int = 4
    pool2: int = 8
    dropout_p: float = 0.25
    T: int = 307
    max_norm_depthwise: float | None = 1.0
    max_norm_dense: float | None = 0.25
    fs_hz: float = 256.0

    def validate(self):
        for f in ("F1", "K1", "D", "C", "F2", "K2", "pool1", "pool2", "T"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.T // self.pool1 // self.pool2 < 1:
            raise ValueError(f"T={self.T} is too short for pooling by {self.pool1} then {self.pool2}")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        return self

    @property
    def dense_inputs(self) -> int:
        return self.F2 * (self.T // self.pool1 // self.pool2)

    def to_dict(self):
        return dataclasses.asdict(self)


class EEGNet(Sequential):
    """EEGNet layers plus the max-norm constraints registered on them.

    With ``fused=True`` (the default) the first three layers run as one
    :class:`~wordaad.nn.FusedFrontEnd`; results are identical up to rounding,
    parameters and state names are unchanged. ``backward_input`` needs
    ``fused=False``.
    """

    def __init__(self, cfg: EegNetConfig, layers, constraints, fused=True):
        super().__init__(layers)
        self.cfg = cfg
        self.constraints = constraints  # [(layer index, param name, limit)]
        self.fused = fused
        self._front = FusedFrontEnd(*self.layers[:3])

    def forward(self, x, training=False):
        if not self.fused:
            return super().forward(x, training)
        x = self._front.forward(x, training)
        for layer in self.layers[3:]:
            x = layer.forward(x, training)
        return x

    __call__ = forward

    def backward(self, grad):
        if not self.fused:
            return super().backward(grad)
        for layer in reversed(self.layers[3:]):
            grad = layer.backward(grad)
        return self._front.backward(grad)

    def backward_input(self, grad):
        if self.fused:
            raise RuntimeError("input gradients need an unfused model (fused=False)")
        return super().backward_input(grad)

    def apply_constraints(self):
        for i, name, limit in self.constraints:
            max_norm_project(self.layers[i].params[name], limit)

    def set_dropout_rng(self, rng: RngStream | None):
        for k, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                layer.rng = None if rng is None else rng.child(f"dropout{k}")

    def block_shapes(self, n=1):
        """Output shape after each layer for an ``n``-epoch input."""
        x = np.zeros((n, 1, self.cfg.C, self.cfg.T), np.float32)
        shapes = []
        for layer in self.layers:
            x = layer.forward(x, training=False)
            shapes.append((layer.name, x.shape))
        return shapes


def _he(rng: RngStream, shape, fan_in):
    return rng.draw_normal(shape, scale=np.sqrt(2.0 / fan_in)).astype(np.float32)


def build_model(cfg: EegNetConfig = None, rng=None, fused=True) -> EEGNet:
    cfg = (cfg or EegNetConfig()).validate()
    rng = as_stream(rng, "eegnet/init")
    fd = cfg.F1 * cfg.D
    layers = [
        TemporalConv(cfg.F1, cfg.K1, _he(rng.child("conv"), (cfg.F1, 1, 1, cfg.K1), cfg.K1)),
        BatchNorm(cfg.F1),
        DepthwiseSpatial(cfg.F1, cfg.D, cfg.C, _he(rng.child("depthwise"), (fd, 1, cfg.C, 1), cfg.C)),
        BatchNorm(fd),
        ELU(),
        AvgPool(cfg.pool1),
        Dropout(cfg.dropout_p),
        SeparableConv(fd, cfg.F2, cfg.K2,
                      _he(rng.child("separable_dw"), (fd, 1, 1, cfg.K2), cfg.K2),
                      _he(rng.child("separable_pw"), (cfg.F2, fd, 1, 1), fd)),
        BatchNorm(cfg.F2),
        ELU(),
        AvgPool(cfg.pool2),
        Dropout(cfg.dropout_p),
        Flatten(),
        DenseSigmoid(cfg.dense_inputs,
                     rng.child("dense").draw_normal((1, cfg.dense_inputs),
                                                    scale=np.sqrt(1.0 / cfg.dense_inputs)).astype(np.float32),
                     np.zeros(1, np.float32)),
    ]
    constraints = []
    if cfg.max_norm_depthwise:
        constraints.append((2, "weight", cfg.max_norm_depthwise))
    if cfg.max_norm_dense:
        constraints.append((len(layers) - 1, "weight", cfg.max_norm_dense))
    model = EEGNet(cfg, layers, constraints, fused=fused)
    model.apply_constraints()
    return model


def param_count(model: Sequential, convention="trainable") -> int:
    """Number of scalars under ``"trainable"`` or ``"+buffers"`` (adds running statistics)."""
    n = sum(int(p.size) for p in model.params().values())
    if convention == "trainable":
        return n
    if convention in ("+buffers", "buffers", "all"):
        return n + sum(int(b.size) for b in model.buffers().values())
    raise ValueError(f"unknown parameter-count convention {convention!r}")


def forward(model: EEGNet, batch, mode="eval", rng=None, chunk=256) -> np.ndarray:
    """Attended-class probabilities for a ``(N, 1, C, T)`` or ``(N, C, T)`` batch."""
    x = np.asarray(batch, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None]
    cfg = model.cfg
    if x.ndim != 4 or x.shape[1:] != (1, cfg.C, cfg.T):
        raise ValueError(f"expected input of shape (N, 1, {cfg.C}, {cfg.T}), got {x.shape}")
    if mode == "train":
        if rng is not None:
            model.set_dropout_rng(as_stream(rng))
        return model.forward(x, training=True)
    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = [model.forward(x[i:i + chunk], training=False) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0, np.float32)


class EEGNetClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn wrapper: ``fit`` trains with Adam and keeps the best-validation checkpoint.

    ``X`` is ``(n_epochs, C, T)``; ``y`` holds 0 (unattended) / 1 (attended).
    Validation data come from ``validation_data=(X_val, y_val)`` or, when
    absent, a stratified ``validation_fraction`` hold-out of ``X``.
    """

    def __init__(self, F1=8, K1=128, D=2, F2=32, K2=16, pool1=4, pool2=8, dropout_p=0.25,
                 max_norm_depthwise=1.0, max_norm_dense=0.25, epochs=300, batch_size=64, lr=1e-4,
                 batches_per_pass=None, validation_fraction=0.2, random_state=0):
        self.F1 = F1
        self.K1 = K1
        self.D = D
        self.F2 = F2
        self.K2 = K2
        self.pool1 = pool1
        self.pool2 = pool2
        self.dropout_p = dropout_p
        self.max_norm_depthwise = max_norm_depthwise
        self.max_norm_dense = max_norm_dense
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.batches_per_pass = batches_per_pass
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self, X) -> EegNetConfig:
        return EegNetConfig(F1=self.F1, K1=self.K1, D=self.D, C=X.shape[1], F2=self.F2, K2=self.K2,
                            pool1=self.pool1, pool2=self.pool2, dropout_p=self.dropout_p, T=X.shape[2],
                            max_norm_depthwise=self.max_norm_depthwise, max_norm_dense=self.max_norm_dense)

    def fit(self, X, y, validation_data=None):
        from .training import ArrayData, TrainConfig, train

        X = check_epochs(X)
        y = check_labels(y, len(X))
        rng = as_stream(self.random_state, "eegnet-classifier")
        if validation_data is None:
            idx_tr, idx_va = _stratified_holdout(y, self.validation_fraction, rng.child("holdout"))
            X_val, y_val = X[idx_va], y[idx_va]
            X, y = X[idx_tr], y[idx_tr]
        else:
            X_val = check_epochs(validation_data[0])
            y_val = check_labels(validation_data[1], len(X_val))
        self.classes_ = np.array([0, 1])
        self.model_ = build_model(self._config(X), rng.child("init"))
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                          batches_per_pass=self.batches_per_pass)
        self.result_ = train(self.model_, ArrayData(X, y), ArrayData(X_val, y_val), cfg, rng.child("train"))
        self.model_.load_state(self.result_.best_state)
        return self

    def predict_proba(self, X):
        X = check_epochs(X)
        p = forward(self.model_, X, mode="eval").astype(np.float64)
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def decision_function(self, X):
        p = np.clip(self.predict_proba(X)[:, 1], 1e-12, 1 - 1e-12)
        return np.log(p) - np.log1p(-p)


def _stratified_holdout(y, fraction, rng: RngStream):
    idx_tr, idx_va = [], []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        members = members[rng.permutation(len(members))]
        n_val = max(1, int(round(fraction * len(members))))
        idx_va.append(members[:n_val])
        idx_tr.append(members[n_val:])
    return np.sort(np.concatenate(idx_tr)), np.sort(np.concatenate(idx_va))
