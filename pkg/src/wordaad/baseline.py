"""Envelope-based linear stimulus reconstruction, the comparison decoder.

A backward model maps lagged EEG to the attended speech envelope; a window
is assigned to the stream whose envelope correlates best with the
reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.signal as sps
from sklearn.base import BaseEstimator, RegressorMixin

from .nn.checkpoint import decode_checkpoint, encode_checkpoint
from .preprocessing import FirFilter, filtfilt

ENV_FS_HZ = 64.0
ENV_CUTOFF_HZ = 8.0
N_LAGS = 17  # 0-250 ms at 64 Hz
WINDOW_S = 1.2
WINDOW_SAMPLES = int(round(WINDOW_S * ENV_FS_HZ))  # 77
LAMBDA_GRID = tuple(10.0 ** np.arange(-4, 3))


class SingularSystemError(np.linalg.LinAlgError):
    """The regularised normal equations have no unique solution."""


@dataclass(frozen=True)
class EnvelopePair:
    """An EEG window with the two candidate stream envelopes, z-normalised per window."""

    eeg: np.ndarray  # (C, T)
    attended_env: np.ndarray
    unattended_env: np.ndarray

    def __post_init__(self):
        t = self.eeg.shape[-1]
        if len(self.attended_env) != t or len(self.unattended_env) != t:
            raise ValueError("envelopes and EEG window differ in length")


def envelope_lowpass(fs_in, cutoff_hz=ENV_CUTOFF_HZ) -> FirFilter:
    n_taps = int(4 * fs_in / cutoff_hz) | 1
    taps = sps.firwin(n_taps, cutoff_hz, window="hamming", fs=fs_in)
    return FirFilter(taps, 0.0, cutoff_hz, fs_in, {"window": "hamming", "n_taps": n_taps})


def extract_envelope(signal, fs_in, fs_out=ENV_FS_HZ, cutoff_hz=ENV_CUTOFF_HZ) -> np.ndarray:
    """Rectify, low-pass (zero-phase FIR), and resample to ``fs_out`` along the last axis."""
    if fs_in < 2 * fs_out:
        raise ValueError(f"input rate {fs_in} Hz must be at least {2 * fs_out} Hz")
    x = np.abs(np.asarray(signal, dtype=np.float64))
    lp = envelope_lowpass(fs_in, cutoff_hz)
    if x.shape[-1] <= 3 * lp.n_taps:
        raise ValueError(f"signal of {x.shape[-1]} samples is too short (needs > {3 * lp.n_taps})")
    env = filtfilt(x, lp)
    ratio = Fraction(fs_out / fs_in).limit_denominator(10000)
    env = sps.resample_poly(env, ratio.numerator, ratio.denominator, axis=-1)
    return np.maximum(env, 0.0)


def zscore(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    if sd == 0:
        raise ValueError("zero-variance envelope")
    return (x - x.mean()) / sd


def lag_matrix(eeg, n_lags=N_LAGS) -> np.ndarray:
    """``X[t, c * L + tau] = eeg[c, t + tau]``, zero past the end: shape ``(T, C * L)``."""
    eeg = np.asarray(eeg, dtype=np.float64)
    c, t = eeg.shape
    padded = np.pad(eeg, ((0, 0), (0, n_lags - 1)))
    win = np.lib.stride_tricks.sliding_window_view(padded, n_lags, axis=1)  # (C, T, L)
    return win.transpose(1, 0, 2).reshape(t, c * n_lags)


@dataclass
class LinearDecoder:
    weights: np.ndarray  # (C, L)
    lam: float
    fs_hz: float = ENV_FS_HZ

    def __post_init__(self):
        if self.lam < 0 or not np.all(np.isfinite(self.weights)):
            raise ValueError("decoder needs finite weights and lambda >= 0")

    @property
    def n_lags(self):
        return self.weights.shape[1]

    def reconstruct(self, eeg) -> np.ndarray:
        return lag_matrix(eeg, self.n_lags) @ self.weights.ravel()


def _windows(eeg, env):
    eeg = np.asarray(eeg, dtype=np.float64)
    env = np.asarray(env, dtype=np.float64)
    if eeg.ndim == 2:
        eeg, env = eeg[None], env[None]
    if eeg.ndim != 3 or env.shape != (eeg.shape[0], eeg.shape[2]):
        raise ValueError("expected eeg (n, C, T) and envelopes (n, T)")
    return eeg, env


def covariances(eeg, env, n_lags=N_LAGS):
    """Lagged autocovariance ``R`` and EEG-envelope cross-covariance ``r`` summed over windows."""
    eeg, env = _windows(eeg, env)
    d = eeg.shape[1] * n_lags
    R, r = np.zeros((d, d)), np.zeros(d)
    for x, e in zip(eeg, env):
        X = lag_matrix(x, n_lags)
        R += X.T @ X
        r += X.T @ e
    return R, r


def solve_decoder(R, r, lam, n_channels, n_lags=N_LAGS, fs_hz=ENV_FS_HZ) -> LinearDecoder:
    """Solve ``(R + lam * mean(diag R) I) w = r``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    A = R + lam * np.mean(np.diag(R)) * np.eye(len(R))
    if np.linalg.cond(A) > 1.0 / np.finfo(float).eps:
        raise SingularSystemError(f"normal equations are singular at lambda={lam}")
    w = np.linalg.solve(A, r)
    return LinearDecoder(w.reshape(n_channels, n_lags), float(lam), fs_hz)


def train_decoder(eeg, env, lam, n_lags=N_LAGS, fs_hz=ENV_FS_HZ) -> LinearDecoder:
    """Ridge backward model from windows ``eeg`` (n, C, T) onto envelopes ``env`` (n, T)."""
    eeg, env = _windows(eeg, env)
    if eeg.shape[0] * eeg.shape[2] < n_lags * eeg.shape[1]:
        raise ValueError("fewer training samples than decoder coefficients")
    R, r = covariances(eeg, env, n_lags)
    return solve_decoder(R, r, lam, eeg.shape[1], n_lags, fs_hz)


def correlation(a, b) -> float:
    a = np.asarray(a, float) - np.mean(a)
    b = np.asarray(b, float) - np.mean(b)
    den = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / den) if den > 0 else 0.0


@dataclass(frozen=True)
class WindowDecision:
    label: int  # 1: stream 1 attended, 0: stream 2 attended
    corr1: float
    corr2: float
    tie: bool


def decide(reconstruction, env1, env2) -> WindowDecision:
    e1, e2 = zscore(env1), zscore(env2)
    c1, c2 = correlation(reconstruction, e1), correlation(reconstruction, e2)
    return WindowDecision(int(c1 >= c2), c1, c2, bool(c1 == c2))


def classify_window(decoder: LinearDecoder, eeg, env1, env2) -> WindowDecision:
    """Label 1 iff the reconstruction correlates more with ``env1``; ties go to stream 1."""
    eeg = np.asarray(eeg)
    if eeg.shape[-1] != len(env1) or len(env1) != len(env2):
        raise ValueError("window lengths differ")
    return decide(decoder.reconstruct(eeg), env1, env2)


def cut_windows(trials, length=WINDOW_SAMPLES, step=None):
    """Non-overlapping windows ``(eeg, attended, unattended)`` from :class:`EnvelopeTrial` records."""
    step = step or length
    eeg, att, un = [], [], []
    for tr in trials:
        n = tr.eeg.shape[1]
        for lo in range(0, n - length + 1, step):
            eeg.append(tr.eeg[:, lo:lo + length])
            att.append(tr.attended_env[lo:lo + length])
            un.append(tr.unattended_env[lo:lo + length])
    if not eeg:
        return np.zeros((0, 0, length)), np.zeros((0, length)), np.zeros((0, length))
    return np.stack(eeg).astype(np.float64), np.stack(att), np.stack(un)


def normalise_windows(env) -> np.ndarray:
    env = np.asarray(env, dtype=np.float64)
    mu = env.mean(axis=-1, keepdims=True)
    sd = env.std(axis=-1, keepdims=True)
    if np.any(sd == 0):
        raise ValueError("zero-variance envelope window")
    return (env - mu) / sd


class EnvelopeDecoder(RegressorMixin, BaseEstimator):
    """scikit-learn style stimulus-reconstruction decoder.

    ``fit(X, y)`` takes EEG windows ``(n, C, T)`` and attended envelopes
    ``(n, T)``; with ``lam="auto"`` the ridge strength is chosen from
    ``lam_grid`` by reconstruction correlation on ``validation_data``.
    """

    def __init__(self, lam=1e-2, n_lags=N_LAGS, lam_grid=LAMBDA_GRID, fs_hz=ENV_FS_HZ):
        self.lam = lam
        self.n_lags = n_lags
        self.lam_grid = lam_grid
        self.fs_hz = fs_hz

    def fit(self, X, y, validation_data=None):
        X, y = _windows(X, normalise_windows(y))
        R, r = covariances(X, y, self.n_lags)
        if self.lam == "auto":
            if validation_data is None:
                raise ValueError("lam='auto' needs validation_data")
            Xv, yv = _windows(validation_data[0], normalise_windows(validation_data[1]))
            self.val_scores_ = {}
            for lam in self.lam_grid:
                dec = solve_decoder(R, r, lam, X.shape[1], self.n_lags, self.fs_hz)
                self.val_scores_[lam] = float(np.mean([correlation(dec.reconstruct(x), e) for x, e in zip(Xv, yv)]))
            lam = max(self.val_scores_, key=lambda k: (self.val_scores_[k], -k))
        else:
            lam = float(self.lam)
        self.decoder_ = solve_decoder(R, r, lam, X.shape[1], self.n_lags, self.fs_hz)
        self.lam_ = lam
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            return self.decoder_.reconstruct(X)
        return np.stack([self.decoder_.reconstruct(x) for x in X])

    def score(self, X, y, sample_weight=None):
        """Mean reconstruction correlation."""
        return float(np.mean([correlation(p, e) for p, e in zip(self.predict(X), np.atleast_2d(y))]))

    def classify(self, X, env1, env2) -> np.ndarray:
        """Per-window labels: 1 when stream 1 is judged attended."""
        rec = self.predict(X)
        return np.array([decide(p, a, b).label for p, a, b in zip(np.atleast_2d(rec), env1, env2)])


def encode_decoder(dec: LinearDecoder, meta=None) -> bytes:
    config = {"kind": "linear_decoder", "n_channels": int(dec.weights.shape[0]), "n_lags": dec.n_lags,
              "lag_s": [tau / dec.fs_hz for tau in range(dec.n_lags)], "lam": dec.lam, "fs_hz": dec.fs_hz}
    return encode_checkpoint({"weights": dec.weights}, config=config, meta=meta)


def decode_decoder(buf: bytes) -> LinearDecoder:
    state, _, config, _ = decode_checkpoint(buf)
    if config.get("kind") != "linear_decoder":
        raise ValueError("checkpoint does not hold a linear decoder")
    w = state["weights"].astype(np.float64)
    if w.shape != (config["n_channels"], config["n_lags"]):
        raise ValueError("decoder weights do not match their metadata")
    return LinearDecoder(w, config["lam"], config["fs_hz"])
