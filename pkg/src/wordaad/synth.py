"""Surrogate EventAAD-like recordings with planted attended-word ERPs.

Background EEG is spatially mixed 1/f^alpha noise; attended epochs add a
half-cycle sinusoidal ERP with a subject-specific latency, width and
centro-parietal topography. Per-subject epoch counts follow the published
dataset description so downstream count identities can be checked exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft

from .data import (FS_HZ, N_CHANNELS, N_TIMES, T_MIN_S, EpochSet, Label, Paradigm, make_uid)
from .preprocessing import RAW_FS_HZ, ContinuousRecording, epoch_bounds
from .rng import RngStream, as_stream

logger = logging.getLogger(__name__)

# Attended / unattended epochs per subject for paradigms 1-3.
SUBJECT_COUNTS = {Paradigm.P1: (60, 260), Paradigm.P2: (74, 400), Paradigm.P3: (109, 1172)}
# Totals over the 24 subjects after epoch rejection.
DATASET_TOTALS = {Paradigm.P1: (1440, 6240), Paradigm.P2: (1776, 9600), Paradigm.P3: (2611, 28128)}
N_SUBJECTS = 24
TRIALS_PER_PARADIGM = {Paradigm.P1: 16, Paradigm.P2: 16, Paradigm.P3: 16}

# BioSemi-style 32 channel montage, azimuthal projection (x: right, y: nose).
CHANNEL_NAMES = (
    "Fp1", "AF3", "F7", "F3", "FC1", "FC5", "T7", "C3", "CP1", "CP5", "P7", "P3", "Pz", "PO3",
    "O1", "Oz", "O2", "PO4", "P4", "P8", "CP6", "CP2", "C4", "T8", "FC6", "FC2", "F4", "F8",
    "AF4", "Fp2", "Fz", "Cz",
)
CHANNEL_XY = np.array([
    (-0.31, 0.95), (-0.33, 0.75), (-0.81, 0.59), (-0.40, 0.50), (-0.18, 0.23), (-0.63, 0.27),
    (-1.00, 0.00), (-0.50, 0.00), (-0.18, -0.23), (-0.63, -0.27), (-0.81, -0.59), (-0.40, -0.50),
    (0.00, -0.50), (-0.33, -0.75), (-0.31, -0.95), (0.00, -1.00), (0.31, -0.95), (0.33, -0.75),
    (0.40, -0.50), (0.81, -0.59), (0.63, -0.27), (0.18, -0.23), (0.50, 0.00), (1.00, 0.00),
    (0.63, 0.27), (0.18, 0.23), (0.40, 0.50), (0.81, 0.59), (0.33, 0.75), (0.31, 0.95),
    (0.00, 0.50), (0.00, 0.00),
])
P300_CENTER = np.array([0.0, -0.3])


@dataclass(frozen=True)
class ErpShape:
    latency_s: float
    width_s: float
    amplitude_uv: float
    topography: np.ndarray

    def __post_init__(self):
        topo = np.asarray(self.topography, dtype=np.float64)
        if self.width_s <= 0:
            raise ValueError("ERP width must be positive")
        if not np.isclose(np.linalg.norm(topo), 1.0, atol=1e-6):
            raise ValueError("ERP topography must have unit Euclidean norm")
        if self.latency_s + self.width_s / 2 > 1.0 + 1e-12:
            raise ValueError("ERP must end within one second of word onset")
        object.__setattr__(self, "topography", topo)

    @property
    def start_s(self):
        return self.latency_s - self.width_s / 2


@dataclass(frozen=True)
class NoiseModel:
    alpha: float = 1.0
    rms_uv: float = 10.0
    mixing: np.ndarray = None
    knee_hz: float = 1.0

    def mixing_matrix(self, n_channels=N_CHANNELS) -> np.ndarray:
        m = default_mixing(n_channels) if self.mixing is None else np.asarray(self.mixing, float)
        return m / np.linalg.norm(m, axis=1, keepdims=True)


def default_mixing(n_channels=N_CHANNELS, smoothing=0.6, length=0.45) -> np.ndarray:
    """Distance-weighted mixing: each channel sees its neighbours' sources."""
    xy = CHANNEL_XY[:n_channels]
    d2 = ((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1)
    kernel = np.exp(-d2 / (2 * length ** 2))
    m = (1 - smoothing) * np.eye(n_channels) + smoothing * kernel
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def sample_times(fs=FS_HZ, n_times=N_TIMES, t_min=T_MIN_S) -> np.ndarray:
    """Time of each epoch sample relative to word onset, on the sample grid."""
    lo, _ = epoch_bounds(fs, t_min, t_min + n_times / fs)
    return (np.arange(n_times) + lo) / fs


def gen_erp_waveform(shape: ErpShape, fs=FS_HZ, n_times=N_TIMES, t_min=T_MIN_S) -> np.ndarray:
    """Half-cycle sine ERP projected through the topography, shape ``(C, T)``."""
    t = sample_times(fs, n_times, t_min)
    if shape.start_s + shape.width_s > t[-1] + 1.0 / fs + 1e-12:
        raise ValueError("ERP extends past the end of the epoch")
    phase = (t - shape.start_s) / shape.width_s
    inside = (phase >= 0) & (phase < 1)
    wave = np.where(inside, np.sin(np.pi * np.clip(phase, 0, 1)), 0.0)
    return shape.amplitude_uv * shape.topography[:, None] * wave[None, :]


def random_topography(rng: RngStream, variability=0.5, n_channels=N_CHANNELS) -> np.ndarray:
    """Smooth unit-norm topography: a shared parietal bump plus random smooth bumps."""
    xy = CHANNEL_XY[:n_channels]

    def bump(center, width):
        return np.exp(-((xy - center) ** 2).sum(-1) / (2 * width ** 2))

    center = P300_CENTER + rng.draw_normal(2, scale=0.15)
    topo = bump(center, 0.45)
    for _ in range(3):
        c = rng.draw_uniform(2, -0.9, 0.9)
        topo = topo + variability * rng.draw_normal() * bump(c, 0.35)
    return topo / np.linalg.norm(topo)


def _spectral_shape(n, fs, alpha, knee_hz):
    f = np.fft.rfftfreq(n, 1.0 / fs)
    h = np.maximum(f, knee_hz) ** (-alpha / 2.0)
    h[0] = 0.0
    # Scale so the time-domain process has unit expected variance.
    weights = np.full(len(f), 2.0)
    weights[0] = 1.0
    if n % 2 == 0:
        weights[-1] = 1.0
    power = (weights * h ** 2).sum() / n
    return h / np.sqrt(power)


def gen_noise(model: NoiseModel, rng, n_channels=N_CHANNELS, n_samples=N_TIMES, fs=FS_HZ) -> np.ndarray:
    """Spatially mixed 1/f^alpha Gaussian noise, shape ``(C, N)`` in microvolts."""
    rng = as_stream(rng, "noise")
    n_fft = sp_fft.next_fast_len(n_samples, real=True)
    white = rng.draw_normal((n_channels, n_fft))
    h = _spectral_shape(n_fft, fs, model.alpha, model.knee_hz)
    sources = sp_fft.irfft(sp_fft.rfft(white, axis=-1) * h, n=n_fft, axis=-1)[:, :n_samples]
    mixed = model.mixing_matrix(n_channels) @ sources
    rms = np.broadcast_to(np.asarray(model.rms_uv, dtype=np.float64), (n_channels,))
    return mixed * rms[:, None]


def unit_erp_power(latency_s, width_s, topography, fs=FS_HZ, n_times=N_TIMES, reference="peak"):
    """Mean-square of a unit-amplitude ERP over its temporal support."""
    w = gen_erp_waveform(ErpShape(latency_s, width_s, 1.0, topography), fs, n_times)
    support = np.any(w != 0, axis=0)
    seg = w[:, support]
    if reference == "global":
        return float(np.mean(seg ** 2))
    if reference == "peak":
        return float(np.max(np.mean(seg ** 2, axis=1)))
    raise ValueError(f"unknown SNR reference {reference!r}")


def amplitude_for_snr(snr_db, noise_rms, latency_s, width_s, topography, reference="peak"):
    if np.isneginf(snr_db):
        return 0.0
    ratio = 10.0 ** (snr_db / 20.0)
    return ratio * float(np.mean(noise_rms)) / np.sqrt(unit_erp_power(latency_s, width_s, topography,
                                                                      reference=reference))


def random_erp_shape(rng: RngStream, snr_db, noise: NoiseModel, reference="peak") -> ErpShape:
    latency = rng.draw_uniform(low=0.35, high=0.55)
    width = rng.draw_uniform(low=0.3, high=0.6)
    width = min(width, 2 * (1.0 - latency))
    topo = random_topography(rng.child("topography"))
    amp = amplitude_for_snr(snr_db, noise.rms_uv, latency, width, topo, reference)
    return ErpShape(latency, width, amp, topo)


def _trial_blocks(n_events, n_trials, rng: RngStream):
    labels_order = rng.permutation(n_events)
    bounds = np.linspace(0, n_events, n_trials + 1).round().astype(int)
    trial = np.empty(n_events, dtype=np.int64)
    for t in range(n_trials):
        trial[bounds[t]:bounds[t + 1]] = t
    return labels_order, trial


def trial_id(subject_id, paradigm, index) -> int:
    return int(subject_id) * 10000 + int(paradigm) * 1000 + int(index)


def synth_subject(subject_id, paradigm, counts, snr_db, rng, noise: NoiseModel = None,
                  n_trials=None, snr_reference="peak", shape: ErpShape = None) -> EpochSet:
    """Epochs for one subject and paradigm: noise, plus the planted ERP when attended.

    Noise is drawn as one continuous stream per subject and paradigm and cut
    into consecutive epochs, so low-frequency content spans epoch borders.
    """
    n_att, n_un = (int(c) for c in counts)
    if n_att <= 0 or n_un <= 0:
        raise ValueError("both class counts must be positive")
    paradigm = Paradigm(paradigm)
    rng = as_stream(rng, f"synth/subject={subject_id}/paradigm={int(paradigm)}")
    noise = noise or NoiseModel()
    if shape is None:
        try:
            shape = random_erp_shape(rng.child("erp"), snr_db, noise, snr_reference)
        except ValueError as exc:
            raise ValueError(f"infeasible ERP for subject {subject_id}: {exc}") from exc
    n = n_att + n_un
    n_trials = n_trials or TRIALS_PER_PARADIGM[paradigm]
    order, trial = _trial_blocks(n, min(n_trials, n), rng.child("trials"))
    labels = np.zeros(n, dtype=np.int64)
    labels[order[:n_att]] = Label.ATTENDED

    stream = gen_noise(noise, rng.child("noise"), N_CHANNELS, n * N_TIMES)
    data = stream.reshape(N_CHANNELS, n, N_TIMES).transpose(1, 0, 2)
    erp = gen_erp_waveform(shape)
    data[labels == Label.ATTENDED] += erp[None]
    info = {
        "generator": "wordaad.synth",
        "subject": int(subject_id),
        "paradigm": int(paradigm),
        "snr_db": None if np.isneginf(snr_db) else float(snr_db),
        "snr_reference": snr_reference,
        "erp_latency_s": shape.latency_s,
        "erp_width_s": shape.width_s,
        "erp_amplitude_uv": shape.amplitude_uv,
        "noise_alpha": noise.alpha,
        "noise_rms_uv": float(np.mean(noise.rms_uv)),
    }
    return EpochSet(
        data.astype(np.float32),
        np.full(n, subject_id),
        np.full(n, int(paradigm)),
        [trial_id(subject_id, paradigm, t) for t in trial],
        labels,
        uid=[make_uid(subject_id, paradigm, i) for i in range(n)],
        info=info,
    )


def planted_counts(n_subjects, paradigm, rng: RngStream) -> list[tuple[int, int]]:
    """Per-subject counts whose totals scale the published totals to ``n_subjects``.

    Subjects start from the per-subject counts; the shortfall against the
    published (rejection-affected) totals is removed from random subjects.
    """
    paradigm = Paradigm(paradigm)
    per_att, per_un = SUBJECT_COUNTS[paradigm]
    tot_att, tot_un = DATASET_TOTALS[paradigm]
    target_att = int(round(tot_att * n_subjects / N_SUBJECTS))
    target_un = int(round(tot_un * n_subjects / N_SUBJECTS))
    att = np.full(n_subjects, per_att, dtype=np.int64)
    un = np.full(n_subjects, per_un, dtype=np.int64)
    for arr, target, label in ((att, target_att, "attended"), (un, target_un, "unattended")):
        deficit = int(arr.sum() - target)
        if deficit > 0:
            picks = rng.child(label).draw_integers(0, n_subjects, size=deficit)
            np.subtract.at(arr, picks, 1)
    return list(zip(att.tolist(), un.tolist()))


def _snr_for(snr_db, paradigm):
    if isinstance(snr_db, dict):
        return snr_db[Paradigm(paradigm)] if Paradigm(paradigm) in snr_db else snr_db[int(paradigm)]
    return snr_db


def synth_dataset(n_subjects=N_SUBJECTS, snr_db=0.0, master_seed=0, paradigms=(1, 2, 3),
                  noise: NoiseModel = None, snr_reference="peak", counts=None) -> EpochSet:
    """The union of :func:`synth_subject` over subjects and paradigms.

    ``snr_db`` is a scalar or a ``{paradigm: dB}`` mapping. ``counts`` may map
    paradigms to a fixed per-subject ``(attended, unattended)`` pair, otherwise
    the published counts are planted.
    """
    root = RngStream(master_seed, "synth")
    sets = []
    for p in paradigms:
        p = Paradigm(p)
        if counts is not None:
            per_subject = [tuple(counts[p] if p in counts else counts[int(p)])] * n_subjects
        else:
            per_subject = planted_counts(n_subjects, p, root.child(f"counts/paradigm={int(p)}"))
        for s in range(1, n_subjects + 1):
            sets.append(synth_subject(s, p, per_subject[s - 1], _snr_for(snr_db, p),
                                      root.child(f"subject={s}/paradigm={int(p)}"), noise=noise,
                                      snr_reference=snr_reference))
    info = {
        "generator": "wordaad.synth",
        "n_subjects": n_subjects,
        "master_seed": int(master_seed),
        "paradigms": [int(p) for p in paradigms],
        "snr_db": {str(int(p)): _snr_for(snr_db, p) for p in paradigms},
        "snr_reference": snr_reference,
    }
    # Subject-major order keeps a subject's paradigms adjacent.
    order = sorted(range(len(sets)), key=lambda i: (sets[i].subject[0], sets[i].paradigm[0]))
    return EpochSet.concat([sets[i] for i in order], info=info)


def synth_recording(subject_id, paradigm, counts, snr_db, rng, noise: NoiseModel = None,
                    soa_s=1.5, snr_reference="peak") -> ContinuousRecording:
    """A 1 kHz continuous recording with word events every ``soa_s`` seconds."""
    paradigm = Paradigm(paradigm)
    rng = as_stream(rng, f"recording/subject={subject_id}/paradigm={int(paradigm)}")
    noise = noise or NoiseModel()
    n_att, n_un = counts
    n = n_att + n_un
    shape = random_erp_shape(rng.child("erp"), snr_db, noise, snr_reference)
    order, trial = _trial_blocks(n, min(TRIALS_PER_PARADIGM[paradigm], n), rng.child("trials"))
    labels = np.zeros(n, dtype=np.int64)
    labels[order[:n_att]] = Label.ATTENDED
    lead = int(3.0 * RAW_FS_HZ)
    events = lead + np.arange(n) * int(soa_s * RAW_FS_HZ)
    n_samples = int(events[-1] + lead + RAW_FS_HZ)
    data = gen_noise(noise, rng.child("noise"), N_CHANNELS, n_samples, fs=RAW_FS_HZ)
    lo, hi = epoch_bounds(RAW_FS_HZ)
    erp = gen_erp_waveform(shape, fs=RAW_FS_HZ, n_times=hi - lo)
    for e in events[labels == Label.ATTENDED]:
        data[:, e + lo:e + hi] += erp
    return ContinuousRecording(subject_id, int(paradigm), RAW_FS_HZ, data.astype(np.float32),
                               events, labels, [trial_id(subject_id, paradigm, t) for t in trial])


# ---------------------------------------------------------------- envelope-driven EEG

ENVELOPE_FS_HZ = 64.0
TRF_LAGS = 17  # 0-250 ms at 64 Hz


def speech_envelope(rng, n_samples, fs=ENVELOPE_FS_HZ, band_hz=(0.5, 8.0)) -> np.ndarray:
    """A non-negative, band-limited stand-in for a speech amplitude envelope."""
    rng = as_stream(rng, "envelope")
    n_fft = sp_fft.next_fast_len(n_samples, real=True)
    spec = sp_fft.rfft(rng.draw_normal(n_fft))
    f = sp_fft.rfftfreq(n_fft, 1.0 / fs)
    spec[(f < band_hz[0]) | (f > band_hz[1])] = 0.0
    x = sp_fft.irfft(spec, n=n_fft)[:n_samples]
    x /= x.std() or 1.0
    # Soft rectification keeps the envelope positive and smooth.
    return np.logaddexp(0.0, 2.0 * x) / 2.0


def planted_trf(rng, n_channels=N_CHANNELS, n_lags=TRF_LAGS, fs=ENVELOPE_FS_HZ) -> np.ndarray:
    """Channel-specific temporal response functions, shape ``(C, L)``.

    Each channel mixes a P1-like and an N1-like lobe with its own latency and
    weights, so the lagged EEG carries several independent views of the envelope.
    """
    rng = as_stream(rng, "trf")
    lags = np.arange(n_lags) / fs
    trf = np.zeros((n_channels, n_lags))
    for c in range(n_channels):
        for centre, sign in ((0.05, 1.0), (0.11, -1.0)):
            mu = centre + rng.draw_uniform(low=-0.03, high=0.03)
            trf[c] += sign * rng.draw_uniform(low=0.3, high=1.0) * np.exp(-0.5 * ((lags - mu) / 0.02) ** 2)
    return trf


def lagged_response(trf, env) -> np.ndarray:
    """``eeg[c, t] = sum_tau trf[c, tau] * env[t - tau]`` (causal, zero initial state)."""
    n = len(env)
    out = np.zeros((trf.shape[0], n))
    for tau in range(trf.shape[1]):
        out[:, tau:] += trf[:, tau, None] * env[None, :n - tau]
    return out


@dataclass(frozen=True)
class EnvelopeTrial:
    """One continuous two-talker trial at the envelope feature rate."""

    subject_id: int
    trial_id: int
    eeg: np.ndarray  # (C, N)
    attended_env: np.ndarray
    unattended_env: np.ndarray
    fs_hz: float = ENVELOPE_FS_HZ


def synth_envelope_trial(subject_id, trial, rng, trf=None, duration_s=60.0, snr_db=20.0, unattended_gain=0.0,
                         noise: NoiseModel = None, erp: ErpShape = None, word_rate_hz=0.67,
                         fs=ENVELOPE_FS_HZ) -> EnvelopeTrial:
    """EEG driven by the attended envelope (and optionally the unattended one) plus noise.

    ``snr_db`` is the power ratio of the envelope-driven component to the
    background noise, averaged over channels. With ``erp`` given, words of the
    attended stream (Poisson, ``word_rate_hz``) also evoke that ERP.
    """
    rng = as_stream(rng, f"envelope/subject={subject_id}/trial={trial}")
    noise = noise or NoiseModel()
    n = int(round(duration_s * fs))
    trf = planted_trf(rng.child("trf")) if trf is None else np.asarray(trf)
    env_a = speech_envelope(rng.child("attended"), n, fs)
    env_u = speech_envelope(rng.child("unattended"), n, fs)
    driven = lagged_response(trf, env_a - env_a.mean())
    if unattended_gain:
        driven += unattended_gain * lagged_response(trf, env_u - env_u.mean())
    background = gen_noise(noise, rng.child("noise"), trf.shape[0], n, fs=fs)
    if np.isneginf(snr_db):
        driven[:] = 0.0
    else:
        scale = np.sqrt(np.mean(background ** 2) / max(np.mean(driven ** 2), 1e-300) * 10 ** (snr_db / 10))
        driven *= scale
    eeg = driven + background
    if erp is not None:
        n_erp = int(round((1.0 - T_MIN_S) * fs))
        wave = gen_erp_waveform(erp, fs=fs, n_times=n_erp)
        onset_shift = int(round(-T_MIN_S * fs))
        times = np.sort(rng.child("words").draw_uniform(int(duration_s * word_rate_hz), 0.0, duration_s))
        for t0 in (times * fs).astype(int) - onset_shift:
            lo, hi = max(t0, 0), min(t0 + n_erp, n)
            if hi > lo:
                eeg[:, lo:hi] += wave[:, lo - t0:hi - t0]
    return EnvelopeTrial(int(subject_id), int(trial), eeg.astype(np.float32), env_a, env_u, fs)


def synth_envelope_dataset(n_subjects=N_SUBJECTS, n_trials=TRIALS_PER_PARADIGM[Paradigm.P3], duration_s=60.0,
                           snr_db=20.0, master_seed=0, unattended_gain=0.0, erp_snr_db=None,
                           paradigm=Paradigm.P3) -> list[EnvelopeTrial]:
    """Envelope-driven trials keyed by the same subject and trial ids as :func:`synth_dataset`.

    Every subject has one TRF shared by its trials; with ``erp_snr_db`` the
    subject's attended words also carry an ERP.
    """
    root = RngStream(master_seed, "synth/envelope")
    noise = NoiseModel()
    trials = []
    for s in range(1, n_subjects + 1):
        s_rng = root.child(f"subject={s}")
        trf = planted_trf(s_rng.child("trf"))
        erp = None
        if erp_snr_db is not None:
            erp = random_erp_shape(s_rng.child("erp"), erp_snr_db, noise)
        for t in range(n_trials):
            tid = trial_id(s, paradigm, t)
            trials.append(synth_envelope_trial(s, tid, s_rng.child(f"trial={t}"), trf=trf, duration_s=duration_s,
                                               snr_db=snr_db, unattended_gain=unattended_gain, noise=noise,
                                               erp=erp))
    return trials
