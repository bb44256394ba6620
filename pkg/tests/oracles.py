"""Reference computations kept independent of the code under test."""

from __future__ import annotations

import itertools

import numpy as np


def numerical_gradient(f, x, eps=1e-6):
    """Central finite differences of scalar ``f`` with respect to array ``x`` (in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def exact_sign_flip_p(a, b):
    """One-sided sign-flip p-value by listing all 2**n sign patterns."""
    d = np.asarray(a, float) - np.asarray(b, float)
    observed = d.mean()
    hits = 0
    total = 0
    for signs in itertools.product((1.0, -1.0), repeat=len(d)):
        total += 1
        if (np.array(signs) * d).mean() >= observed - 1e-12:
            hits += 1
    return hits / total


def direct_correlate_same(x, w):
    """Loop-based cross-correlation with zero padding, extra pad sample on the right."""
    k = len(w)
    left = (k - 1) // 2
    out = np.zeros(len(x))
    for t in range(len(x)):
        for j in range(k):
            s = t - left + j
            if 0 <= s < len(x):
                out[t] += w[j] * x[s]
    return out


def grad_error(analytic, numeric, atol=1e-6):
    """Relative error with an absolute floor, so structurally zero gradients compare by FD round-off."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), atol))
