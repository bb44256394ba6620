"""Layers with hand-written backward passes.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` on ``backward``. Tensors
are ``(N, F, H, W)`` numpy arrays; layers compute in the input dtype, so the
same code serves float32 training and float64 gradient checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft


class Layer:
    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, x, training=True):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        self.zero_grad()
        return self


def same_padding(k: int) -> tuple[int, int]:
    """Left/right zero padding that keeps the length; the extra sample goes right."""
    total = k - 1
    return total // 2, total - total // 2


def _check_rank(x, name):
    if x.ndim != 4:
        raise ValueError(f"{name} expects a 4-D (N, F, H, W) input, got shape {x.shape}")


class TemporalConv(Layer):
    """``F`` temporal filters of width ``K`` applied to every row of a 1-map input.

    ``(N, 1, C, T) -> (N, F, C, T)``; cross-correlation with same padding,
    computed by FFT, no bias.
    """

    name = "conv_temporal"

    def __init__(self, n_filters, kernel, weight=None):
        super().__init__()
        self.n_filters, self.kernel = n_filters, kernel
        w = np.zeros((n_filters, 1, 1, kernel), np.float32) if weight is None else np.asarray(weight)
        if w.shape != (n_filters, 1, 1, kernel):
            raise ValueError(f"temporal weights must have shape {(n_filters, 1, 1, kernel)}, got {w.shape}")
        self.params["weight"] = w
        self.zero_grad()

    def _fft_len(self, t):
        return sp_fft.next_fast_len(t + self.kernel - 1, real=True)

    def forward(self, x, training=True):
        _check_rank(x, self.name)
        if x.shape[1] != 1:
            raise ValueError(f"{self.name} expects a single input map, got {x.shape[1]}")
        n, _, c, t = x.shape
        left, right = same_padding(self.kernel)
        xp = np.pad(x[:, 0], ((0, 0), (0, 0), (left, right)))
        size = self._fft_len(t)
        xf = sp_fft.rfft(xp, size, axis=-1)
        w = self.params["weight"][:, 0, 0, :].astype(x.dtype)
        wf = sp_fft.rfft(w[:, ::-1], size, axis=-1)
        y = sp_fft.irfft(xf[:, None, :, :] * wf[None, :, None, :], size, axis=-1)
        self._cache = (xf, x.shape, size)
        k = self.kernel
        return np.ascontiguousarray(y[..., k - 1:k - 1 + t], dtype=x.dtype)

    def backward(self, grad, need_input_grad=True):
        xf, shape, size = self._cache
        n, _, c, t = shape
        k = self.kernel
        gf = sp_fft.rfft(grad, size, axis=-1)
        # dW[f, j] = sum_{n,c,t} g[n,f,c,t] * xp[n,c,t+j]
        cross = np.einsum("nfcl,ncl->fl", np.conj(gf), xf)
        dw = sp_fft.irfft(cross, size, axis=-1)[:, :k]
        self.grads["weight"] += dw.reshape(self.params["weight"].shape).astype(self.grads["weight"].dtype)
        if not need_input_grad:
            return None
        w = self.params["weight"][:, 0, 0, :].astype(grad.dtype)
        wf = sp_fft.rfft(w, size, axis=-1)
        dxp = sp_fft.irfft(np.einsum("nfcl,fl->ncl", gf, wf), size, axis=-1)
        left, _ = same_padding(k)
        return np.ascontiguousarray(dxp[:, None, :, left:left + t], dtype=grad.dtype)


class DepthwiseSpatial(Layer):
    """``D`` spatial filters per input map collapsing the channel axis.

    ``(N, F, C, T) -> (N, F*D, 1, T)``; output map ``f*D + d`` comes from input map ``f``.
    """

    name = "depthwise_spatial"

    def __init__(self, n_maps, depth, n_channels, weight=None):
        super().__init__()
        self.n_maps, self.depth, self.n_channels = n_maps, depth, n_channels
        shape = (n_maps * depth, 1, n_channels, 1)
        w = np.zeros(shape, np.float32) if weight is None else np.asarray(weight)
        if w.shape != shape:
            raise ValueError(f"depthwise weights must have shape {shape}, got {w.shape}")
        self.params["weight"] = w
        self.zero_grad()

    def forward(self, x, training=True):
        _check_rank(x, self.name)
        n, f, c, t = x.shape
        if c != self.n_channels:
            raise ValueError(f"kernel height {self.n_channels} does not match {c} input rows")
        if f != self.n_maps:
            raise ValueError(f"expected {self.n_maps} input maps, got {f}")
        w = self.params["weight"].reshape(f, self.depth, c).astype(x.dtype)
        self._x = x
        y = np.matmul(w[None], x)  # (N, F, D, T)
        return y.reshape(n, f * self.depth, 1, t)

    def backward(self, grad):
        x = self._x
        n, f, c, t = x.shape
        g = grad.reshape(n, f, self.depth, t)
        dw = np.matmul(g, np.swapaxes(x, -1, -2)).sum(axis=0)  # (F, D, C)
        self.grads["weight"] += dw.reshape(self.params["weight"].shape).astype(self.grads["weight"].dtype)
        w = self.params["weight"].reshape(f, self.depth, c).astype(grad.dtype)
        return np.matmul(np.swapaxes(w, -1, -2)[None], g)


class SeparableConv(Layer):
    """Depthwise temporal filtering (one ``1 x K`` kernel per map) then 1x1 mixing.

    ``(N, F, 1, T) -> (N, F_out, 1, T)``; same padding, no biases.
    """

    name = "separable_conv"

    def __init__(self, n_in, n_out, kernel, depthwise=None, pointwise=None):
        super().__init__()
        self.n_in, self.n_out, self.kernel = n_in, n_out, kernel
        dw = np.zeros((n_in, 1, 1, kernel), np.float32) if depthwise is None else np.asarray(depthwise)
        pw = np.zeros((n_out, n_in, 1, 1), np.float32) if pointwise is None else np.asarray(pointwise)
        if dw.shape != (n_in, 1, 1, kernel) or pw.shape != (n_out, n_in, 1, 1):
            raise ValueError("separable convolution weight shapes do not match the layer")
        self.params["depthwise"] = dw
        self.params["pointwise"] = pw
        self.zero_grad()

    def forward(self, x, training=True):
        _check_rank(x, self.name)
        n, f, h, t = x.shape
        if f != self.n_in or h != 1:
            raise ValueError(f"{self.name} expects (N, {self.n_in}, 1, T), got {x.shape}")
        left, right = same_padding(self.kernel)
        xp = np.pad(x[:, :, 0, :], ((0, 0), (0, 0), (left, right)))
        win = sliding_window_view(xp, self.kernel, axis=-1)  # (N, F, T, K)
        dw = self.params["depthwise"][:, 0, 0, :].astype(x.dtype)
        z = np.einsum("nftk,fk->nft", win, dw)
        pw = self.params["pointwise"][:, :, 0, 0].astype(x.dtype)
        y = np.matmul(pw[None], z)  # (N, F_out, T)
        self._cache = (win, z)
        return y[:, :, None, :]

    def backward(self, grad):
        win, z = self._cache
        g = grad[:, :, 0, :]
        n, _, t = g.shape
        self.grads["pointwise"] += np.matmul(g, np.swapaxes(z, 1, 2)).sum(axis=0)[:, :, None, None].astype(
            self.grads["pointwise"].dtype)
        pw = self.params["pointwise"][:, :, 0, 0].astype(g.dtype)
        gz = np.matmul(pw.T[None], g)  # (N, F, T)
        self.grads["depthwise"] += np.einsum("nftk,nft->fk", win, gz)[:, None, None, :].astype(
            self.grads["depthwise"].dtype)
        dw = self.params["depthwise"][:, 0, 0, :].astype(g.dtype)
        left, _ = same_padding(self.kernel)
        dxp = np.zeros((n, self.n_in, t + self.kernel - 1), dtype=g.dtype)
        for k in range(self.kernel):
            dxp[:, :, k:k + t] += gz * dw[None, :, k, None]
        return dxp[:, :, None, left:left + t]


class BatchNorm(Layer):
    """Per-map normalisation over ``(N, H, W)`` with learnable scale and shift."""

    name = "batchnorm"

    def __init__(self, n_maps, eps=1e-3, momentum=0.01):
        super().__init__()
        self.n_maps, self.eps, self.momentum = n_maps, eps, momentum
        self.params["gamma"] = np.ones(n_maps, np.float32)
        self.params["beta"] = np.zeros(n_maps, np.float32)
        self.buffers["running_mean"] = np.zeros(n_maps, np.float32)
        self.buffers["running_var"] = np.ones(n_maps, np.float32)
        self.zero_grad()

    def forward(self, x, training=True):
        _check_rank(x, self.name)
        if x.shape[1] != self.n_maps:
            raise ValueError(f"expected {self.n_maps} maps, got {x.shape[1]}")
        gamma = self.params["gamma"].astype(x.dtype)[None, :, None, None]
        beta = self.params["beta"].astype(x.dtype)[None, :, None, None]
        if training:
            if x.shape[0] < 2:
                raise ValueError("train-mode batch normalisation needs at least two samples")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (m / max(m - 1, 1))
            mom = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            self.buffers["running_mean"] = ((1 - mom) * rm + mom * mean).astype(rm.dtype)
            self.buffers["running_var"] = ((1 - mom) * rv + mom * unbiased).astype(rv.dtype)
        else:
            mean = self.buffers["running_mean"].astype(x.dtype)
            var = self.buffers["running_var"].astype(x.dtype)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._cache = (xhat, inv, training)
        return (gamma * xhat + beta).astype(x.dtype)

    def backward(self, grad):
        xhat, inv, training = self._cache
        axes = (0, 2, 3)
        self.grads["gamma"] += (grad * xhat).sum(axis=axes).astype(self.grads["gamma"].dtype)
        self.grads["beta"] += grad.sum(axis=axes).astype(self.grads["beta"].dtype)
        gamma = self.params["gamma"].astype(grad.dtype)
        gx = grad * gamma[None, :, None, None]
        if not training:
            return gx * inv[None, :, None, None]
        mean_g = gx.mean(axis=axes, keepdims=True)
        mean_gx = (gx * xhat).mean(axis=axes, keepdims=True)
        return (gx - mean_g - xhat * mean_gx) * inv[None, :, None, None]


class ELU(Layer):
    name = "elu"

    def forward(self, x, training=True):
        neg = x < 0
        out = np.where(neg, np.expm1(np.minimum(x, 0)), x)
        self._cache = (neg, out)
        return out.astype(x.dtype)

    def backward(self, grad):
        neg, out = self._cache
        return np.where(neg, grad * (out + 1), grad)


class AvgPool(Layer):
    """Non-overlapping average pooling along the last axis; the remainder is dropped."""

    name = "avg_pool"

    def __init__(self, size):
        super().__init__()
        self.size = size

    def forward(self, x, training=True):
        n, f, h, t = x.shape
        out_t = t // self.size
        if out_t < 1:
            raise ValueError(f"cannot pool {t} samples with a window of {self.size}")
        self._shape = x.shape
        return x[..., :out_t * self.size].reshape(n, f, h, out_t, self.size).mean(axis=-1)

    def backward(self, grad):
        n, f, h, t = self._shape
        out_t = grad.shape[-1]
        dx = np.zeros(self._shape, dtype=grad.dtype)
        dx[..., :out_t * self.size] = np.repeat(grad / self.size, self.size, axis=-1)
        return dx


class Dropout(Layer):
    """Inverted dropout; the identity outside training."""

    name = "dropout"

    def __init__(self, p, rng=None):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x, training=True):
        if not training or self.p == 0:
            self._mask = None
            return x
        if self.rng is None:
            raise ValueError("train-mode dropout needs a random stream")
        keep = self.rng.draw_uniform(x.shape) >= self.p
        self._mask = keep.astype(x.dtype) / x.dtype.type(1 - self.p)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, training=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


def sigmoid(z):
    """Numerically stable logistic function."""
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class DenseSigmoid(Layer):
    """Fully connected layer to one logit followed by a sigmoid: ``(N, D) -> (N,)``."""

    name = "dense"

    def __init__(self, n_in, weight=None, bias=None):
        super().__init__()
        self.n_in = n_in
        w = np.zeros((1, n_in), np.float32) if weight is None else np.asarray(weight).reshape(1, n_in)
        self.params["weight"] = w
        self.params["bias"] = np.zeros(1, np.float32) if bias is None else np.asarray(bias).reshape(1)
        self.zero_grad()

    def forward(self, x, training=True):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"dense layer expects (N, {self.n_in}), got {x.shape}")
        w = self.params["weight"].astype(x.dtype)
        # Row-wise reduction: a row's logit does not depend on its position in the batch.
        logit = np.einsum("nd,d->n", x, w[0], optimize=False) + self.params["bias"].astype(x.dtype)[0]
        p = sigmoid(logit).astype(x.dtype)
        self._cache = (x, p)
        return p

    def backward(self, grad_p):
        x, p = self._cache
        g = grad_p * p * (1 - p)
        return self.backward_logit(g)

    def backward_logit(self, g_logit):
        x, _ = self._cache
        self.grads["weight"] += (g_logit @ x)[None, :].astype(self.grads["weight"].dtype)
        self.grads["bias"] += np.array([g_logit.sum()], dtype=self.grads["bias"].dtype)
        w = self.params["weight"].astype(g_logit.dtype)
        return g_logit[:, None] * w


P_CLAMP = 1e-7


def bce_loss(p, y):
    """Mean binary cross-entropy and its gradient with respect to ``p``."""
    p = np.asarray(p)
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    pc = np.clip(p, P_CLAMP, 1 - P_CLAMP)
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    grad = (pc - y) / (pc * (1 - pc)) / p.shape[0]
    return float(loss), grad.astype(p.dtype)
