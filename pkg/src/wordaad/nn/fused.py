"""Fused temporal-conv -> batchnorm -> depthwise-spatial front end.

The three layers are linear in the input apart from the batch statistics,
so the spatial projection can be applied before the temporal filter: the
convolution then runs on ``F*D`` maps instead of ``F*C`` rows. The
train-mode statistics of the (never materialised) ``(N, F, C, T)`` conv output
come from a lagged Gram matrix of the input: ``mean_f = w_f . m`` and
``E[y_f^2] = w_f' G w_f``.

The fused block reads and writes the parameters, gradients and buffers of
the three wrapped layers, so state dicts and optimizers see the same arrays.
"""

from __future__ import annotations

import numpy as np
from scipy import fft as sp_fft

from .layers import BatchNorm, DepthwiseSpatial, TemporalConv, same_padding


def lagged_moments(x0: np.ndarray, kernel: int):
    """First and second moments of every same-padded length-``kernel`` window.

    Returns ``m`` (K,) and ``G`` (K, K) with ``m[k] = mean(xpad[t + k])`` and
    ``G[k, l] = mean(xpad[t + k] * xpad[t + l])`` over rows and ``t``.
    """
    rows, t = x0.shape[0] * x0.shape[1], x0.shape[-1]
    flat = x0.reshape(rows, t).astype(np.float64)
    left, right = same_padding(kernel)
    size = t + kernel - 1
    col = np.zeros(size)
    col[left:left + t] = flat.sum(axis=0)
    csum = np.concatenate([[0.0], np.cumsum(col)])
    m = (csum[t:t + kernel] - csum[:kernel]) / (rows * t)
    gram = np.zeros((size, size))
    gram[left:left + t, left:left + t] = flat.T @ flat
    # Skew to (row i, lag tau) so window sums become differences of cumulative sums.
    lags = np.arange(-(kernel - 1), kernel)
    cols = np.arange(size)[:, None] + lags[None, :]
    valid = (cols >= 0) & (cols < size)
    skew = np.where(valid, gram[np.arange(size)[:, None], np.clip(cols, 0, size - 1)], 0.0)
    acc = np.vstack([np.zeros((1, lags.size)), np.cumsum(skew, axis=0)])
    k = np.arange(kernel)
    tau = k[None, :] - k[:, None] + kernel - 1
    G = (acc[k[:, None] + t, tau] - acc[k[:, None], tau]) / (rows * t)
    return m, G


class FusedFrontEnd:
    """Executes ``conv -> bn -> depthwise`` as one step with an exact backward pass."""

    def __init__(self, conv: TemporalConv, bn: BatchNorm, depthwise: DepthwiseSpatial):
        if bn.n_maps != conv.n_filters or depthwise.n_maps != conv.n_filters:
            raise ValueError("layer sizes do not chain")
        self.conv, self.bn, self.dw = conv, bn, depthwise

    def forward(self, x, training=True):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"fused front end expects (N, 1, C, T), got {x.shape}")
        conv, bn, dw = self.conv, self.bn, self.dw
        dtype = x.dtype
        x0 = x[:, 0]
        n, c, t = x0.shape
        f, d, k = conv.n_filters, dw.depth, conv.kernel
        if c != dw.n_channels:
            raise ValueError(f"kernel height {dw.n_channels} does not match {c} input rows")
        W = dw.params["weight"].reshape(f * d, c).astype(dtype)
        w = conv.params["weight"][:, 0, 0, :].astype(dtype)
        s = np.matmul(W[None], x0)  # (N, F*D, T)
        left, right = same_padding(k)
        size = sp_fft.next_fast_len(t + k - 1, real=True)
        sf = sp_fft.rfft(np.pad(s, ((0, 0), (0, 0), (left, right))), size, axis=-1)
        wf = np.repeat(sp_fft.rfft(w[:, ::-1], size, axis=-1), d, axis=0)
        q = sp_fft.irfft(sf * wf[None], size, axis=-1)[..., k - 1:k - 1 + t]

        w64 = w.astype(np.float64)
        if training:
            if n < 2:
                raise ValueError("train-mode batch normalisation needs at least two samples")
            m, G = lagged_moments(x0, k)
            mean = w64 @ m
            var = np.maximum(np.einsum("fk,kl,fl->f", w64, G, w64) - mean ** 2, 0.0)
            total = n * c * t
            mom = bn.momentum
            rm, rv = bn.buffers["running_mean"], bn.buffers["running_var"]
            bn.buffers["running_mean"] = ((1 - mom) * rm + mom * mean).astype(rm.dtype)
            bn.buffers["running_var"] = ((1 - mom) * rv + mom * var * (total / (total - 1))).astype(rv.dtype)
        else:
            m = G = None
            mean = bn.buffers["running_mean"].astype(np.float64)
            var = bn.buffers["running_var"].astype(np.float64)
        inv = 1.0 / np.sqrt(var + bn.eps)
        gamma = bn.params["gamma"].astype(np.float64)
        a = gamma * inv
        b = bn.params["beta"].astype(np.float64) - a * mean
        S = W.astype(np.float64).sum(axis=1)  # (F*D,)
        a_r = np.repeat(a, d).astype(dtype)
        shift = (np.repeat(b, d) * S).astype(dtype)
        u = q * a_r[None, :, None] + shift[None, :, None]
        self._cache = (x0, q, sf, size, m, G, mean, inv, a, S, training)
        return np.ascontiguousarray(u[:, :, None, :], dtype=dtype)

    def backward(self, grad):
        conv, bn, dw = self.conv, self.bn, self.dw
        x0, q, sf, size, m, G, mean, inv, a, S, training = self._cache
        n, c, t = x0.shape
        f, d, k = conv.n_filters, dw.depth, conv.kernel
        g = grad[:, :, 0, :]
        dtype = g.dtype
        g64 = g.astype(np.float64)
        A = (g64 * q).sum(axis=(0, 2)).reshape(f, d).sum(axis=1)
        b_sum = g64.sum(axis=(0, 2))  # (F*D,)
        B = (b_sum * S).reshape(f, d).sum(axis=1)
        resid = A - B * mean

        bn.grads["beta"] += B.astype(bn.grads["beta"].dtype)
        bn.grads["gamma"] += (resid * inv).astype(bn.grads["gamma"].dtype)

        w = conv.params["weight"][:, 0, 0, :].astype(dtype)
        a_r = np.repeat(a, d).astype(dtype)
        gs = g * a_r[None, :, None]  # gradient with respect to the conv output q, scaled
        gf = sp_fft.rfft(gs, size, axis=-1)

        # Depthwise weights: a_f <adjoint_conv(g), x> + b_f * sum(g).
        wf = np.repeat(sp_fft.rfft(w, size, axis=-1), d, axis=0)
        left, _ = same_padding(k)
        h = sp_fft.irfft(gf * wf[None], size, axis=-1)[..., left:left + t]
        dW = np.matmul(h, np.swapaxes(x0, 1, 2)).sum(axis=0).astype(np.float64)  # (F*D, C)
        b = bn.params["beta"].astype(np.float64) - a * mean
        dW += (np.repeat(b, d) * b_sum)[:, None]
        dw.grads["weight"] += dW.reshape(dw.params["weight"].shape).astype(dw.grads["weight"].dtype)

        # Temporal weights: direct path through q plus the batch statistics.
        cross = (np.conj(gf) * sf).sum(axis=0)  # (F*D, L)
        dconv = sp_fft.irfft(cross, size, axis=-1)[:, :k].reshape(f, d, k).sum(axis=1).astype(np.float64)
        if training:
            w64 = w.astype(np.float64)
            gamma = bn.params["gamma"].astype(np.float64)
            d_mean = -a * B
            d_var = -0.5 * resid * gamma * inv ** 3
            dconv += d_mean[:, None] * m[None, :]
            dconv += d_var[:, None] * (2 * w64 @ G.T - 2 * mean[:, None] * m[None, :])
        conv.grads["weight"] += dconv[:, None, None, :].astype(conv.grads["weight"].dtype)
        return None
