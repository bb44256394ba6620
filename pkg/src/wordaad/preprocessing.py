"""Band-pass filtering, rational resampling, epoching and amplitude rejection.

The chain runs at the acquisition rate first (zero-phase band-pass at 1 kHz),
then resamples to 256 Hz, cuts word-locked epochs and drops epochs whose
peak-to-peak swing exceeds the rejection threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps
from sklearn.base import BaseEstimator, TransformerMixin

from .data import FS_HZ, N_CHANNELS, T_MAX_S, T_MIN_S, EpochSet, make_uid

logger = logging.getLogger(__name__)

RAW_FS_HZ = 1000.0
UP, DOWN = 32, 125


@dataclass(frozen=True)
class ContinuousRecording:
    subject_id: int
    paradigm: int
    fs_hz: float
    data: np.ndarray
    event_samples: np.ndarray
    event_labels: np.ndarray
    event_trials: np.ndarray = None

    def __post_init__(self):
        samples = np.asarray(self.event_samples, dtype=np.int64)
        object.__setattr__(self, "event_samples", samples)
        object.__setattr__(self, "event_labels", np.asarray(self.event_labels, dtype=np.int64))
        trials = self.event_trials
        trials = np.zeros(len(samples), np.int64) if trials is None else np.asarray(trials, np.int64)
        object.__setattr__(self, "event_trials", trials)
        if self.data.ndim != 2 or self.data.shape[0] != N_CHANNELS:
            raise ValueError(f"recording must be {N_CHANNELS} x N, got {self.data.shape}")
        if not (len(samples) == len(self.event_labels) == len(trials)):
            raise ValueError("event arrays must have equal length")
        if len(samples) and (np.any(np.diff(samples) <= 0) or samples[0] < 0
                             or samples[-1] >= self.data.shape[1]):
            raise ValueError("event samples must be strictly increasing and inside the recording")


@dataclass(frozen=True)
class FirFilter:
    taps: np.ndarray
    lo_hz: float
    hi_hz: float
    fs_hz: float
    meta: dict = field(default_factory=dict)

    @property
    def n_taps(self):
        return len(self.taps)

    def gain_db(self, freqs_hz) -> np.ndarray:
        """Magnitude response in dB at the given frequencies."""
        _, h = sps.freqz(self.taps, worN=np.atleast_1d(np.asarray(freqs_hz, float)), fs=self.fs_hz)
        return 20 * np.log10(np.maximum(np.abs(h), 1e-300))


def design_bandpass(lo_hz=0.5, hi_hz=40.0, fs_hz=RAW_FS_HZ, n_taps=3301) -> FirFilter:
    """Linear-phase Hamming windowed-sinc band-pass."""
    if not 0 < lo_hz < hi_hz < fs_hz / 2:
        raise ValueError(f"band edges must satisfy 0 < lo < hi < fs/2, got ({lo_hz}, {hi_hz}) at {fs_hz} Hz")
    if n_taps % 2 == 0:
        raise ValueError(f"tap count must be odd for a type-I linear-phase filter, got {n_taps}")
    taps = sps.firwin(n_taps, [lo_hz, hi_hz], pass_zero=False, window="hamming", fs=fs_hz)
    return FirFilter(taps, lo_hz, hi_hz, fs_hz, {"window": "hamming", "n_taps": n_taps})


def filtfilt(x, f: FirFilter) -> np.ndarray:
    """Forward-backward FIR filtering along the last axis (zero phase).

    Edges are extended by reflection over ``n_taps - 1`` samples.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    pad = f.n_taps - 1
    if n <= 3 * f.n_taps:
        raise ValueError(f"signal of {n} samples is too short for a {f.n_taps}-tap filter")
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    xp = np.pad(x, widths, mode="reflect")
    h = f.taps.reshape((1,) * (x.ndim - 1) + (-1,))
    y = sps.fftconvolve(xp, h, mode="full", axes=-1)[..., :xp.shape[-1]]
    y = sps.fftconvolve(y[..., ::-1], h, mode="full", axes=-1)[..., :xp.shape[-1]][..., ::-1]
    return y[..., pad:pad + n]


def resample_1000_to_256(x) -> np.ndarray:
    """Polyphase resampling by 32/125 along the last axis; length floor(N*32/125)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("cannot resample an empty signal")
    n_out = (x.shape[-1] * UP) // DOWN
    return sps.resample_poly(x, UP, DOWN, axis=-1)[..., :n_out]


def resample_events(samples, n_out) -> np.ndarray:
    idx = np.rint(np.asarray(samples, dtype=np.float64) * UP / DOWN).astype(np.int64)
    return np.minimum(idx, n_out - 1)


def epoch_bounds(fs_hz=FS_HZ, t_min=T_MIN_S, t_max=T_MAX_S) -> tuple[int, int]:
    """Half-open sample offsets ``[round(t_min*fs), round(t_max*fs))`` around the event."""
    return int(round(t_min * fs_hz)), int(round(t_max * fs_hz))


def extract_epochs(r: ContinuousRecording, t_min=T_MIN_S, t_max=T_MAX_S, baseline=False,
                   first_index=0):
    """Cut event-locked epochs. Returns ``(epochs, skipped_event_positions)``."""
    lo, hi = epoch_bounds(r.fs_hz, t_min, t_max)
    n = r.data.shape[1]
    keep, skipped = [], []
    for i, s in enumerate(r.event_samples):
        if s + lo < 0 or s + hi > n:
            skipped.append(i)
        else:
            keep.append(i)
    if skipped:
        logger.info("subject %s paradigm %s: skipped %d events too close to the recording edge",
                    r.subject_id, r.paradigm, len(skipped))
    if not keep:
        return EpochSet.empty(n_channels=r.data.shape[0], n_times=hi - lo, fs_hz=r.fs_hz, t_min_s=t_min), skipped
    keep = np.asarray(keep)
    starts = r.event_samples[keep] + lo
    idx = starts[:, None] + np.arange(hi - lo)[None, :]
    data = np.transpose(r.data[:, idx], (1, 0, 2)).astype(np.float64)
    if baseline:
        data -= data[:, :, :-lo].mean(axis=2, keepdims=True)
    uids = [make_uid(r.subject_id, r.paradigm, first_index + int(i)) for i in keep]
    epochs = EpochSet(
        data.astype(np.float32),
        np.full(len(keep), r.subject_id),
        np.full(len(keep), r.paradigm),
        r.event_trials[keep],
        r.event_labels[keep],
        uid=uids,
        fs_hz=r.fs_hz,
        t_min_s=t_min,
    )
    return epochs, skipped


def peak_to_peak_reject(s: EpochSet, threshold_uv=200.0):
    """Drop epochs whose largest per-channel peak-to-peak swing exceeds the threshold."""
    if len(s) == 0:
        return s, 0
    ptp = (s.data.max(axis=2) - s.data.min(axis=2)).max(axis=1)
    ok = ptp <= threshold_uv
    return s.subset(ok), int((~ok).sum())


class EpochingPipeline(TransformerMixin, BaseEstimator):
    """Turn 1 kHz continuous recordings into a rejected, 256 Hz :class:`EpochSet`.

    ``fit`` is a no-op kept for pipeline composition; ``transform`` accepts a
    list of :class:`ContinuousRecording`. ``reject_uv=None`` keeps every epoch.
    """

    def __init__(self, lo_hz=0.5, hi_hz=40.0, n_taps=3301, reject_uv=200.0, baseline=False):
        self.lo_hz = lo_hz
        self.hi_hz = hi_hz
        self.n_taps = n_taps
        self.reject_uv = reject_uv
        self.baseline = baseline

    def fit(self, X, y=None):
        self.filter_ = design_bandpass(self.lo_hz, self.hi_hz, RAW_FS_HZ, self.n_taps)
        return self

    def transform(self, X) -> EpochSet:
        if not hasattr(self, "filter_"):
            self.fit(X)
        self.skipped_ = {}
        self.rejected_ = {}
        sets = []
        for rec in X:
            if rec.fs_hz != RAW_FS_HZ:
                raise ValueError(f"expected {RAW_FS_HZ:g} Hz input, got {rec.fs_hz}")
            filtered = filtfilt(rec.data, self.filter_)
            down = resample_1000_to_256(filtered)
            rec256 = ContinuousRecording(
                rec.subject_id, rec.paradigm, FS_HZ, down.astype(np.float32),
                resample_events(rec.event_samples, down.shape[1]), rec.event_labels, rec.event_trials)
            epochs, skipped = extract_epochs(rec256, baseline=self.baseline)
            kept, n_rej = epochs, 0
            if self.reject_uv is not None:
                kept, n_rej = peak_to_peak_reject(epochs, self.reject_uv)
            key = (rec.subject_id, rec.paradigm)
            self.skipped_[key] = len(skipped)
            self.rejected_[key] = n_rej
            sets.append(kept)
        return EpochSet.concat(sets) if sets else EpochSet.empty()
