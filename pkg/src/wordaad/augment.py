"""Upsampling by averaging, ERP simulation and the augmented corpus.

Augmented sets can be large (Table-1 scale is hundreds of thousands of
epochs), so they are held as *recipes*: which source epochs to average,
and for simulated attended epochs which template, width, shift and gain to
add. Payloads are materialised on demand, batch by batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import (FS_HZ, N_SOURCES, T_MIN_S, Epoch, EpochSet, Label, Origin)
from .rng import RngStream, as_stream
from .synth import sample_times

logger = logging.getLogger(__name__)

GAINS_DB = (0.0, 3.0, 6.0)
WIDTH_RANGE_S = (0.3, 0.6)
LATENCY_SD_S = 0.010
PEAK_SEARCH_S = (0.2, 0.8)
_AUG_UID_BASE = 1 << 62


class DegenerateTemplateError(ValueError):
    pass


@dataclass(frozen=True)
class ErpTemplate:
    subject_id: int
    paradigm: int
    waveform: np.ndarray
    peak_latency_s: float
    segment_s: tuple[float, float] = None
    source_uids: frozenset = frozenset()


def gfp(waveform) -> np.ndarray:
    """Global field power: cross-channel standard deviation per sample."""
    return np.asarray(waveform, dtype=np.float64).std(axis=0)


def _peak_segment(waveform, peak_idx, times):
    # Span around the peak where the waveform keeps the peak's spatial polarity.
    w = np.asarray(waveform, dtype=np.float64)
    pattern = w[:, peak_idx]
    proj = pattern @ w
    left = peak_idx
    while left > 0 and proj[left - 1] > 0:
        left -= 1
    right = peak_idx
    while right < w.shape[1] - 1 and proj[right + 1] > 0:
        right += 1
    dt = times[1] - times[0]
    # Half-open support [t_left, t_right): zero crossings lie half a sample out.
    return float(times[left] - dt / 2), float(times[right] + dt / 2)


def estimate_template(attended, unattended=None, fs=FS_HZ, t_min=T_MIN_S) -> ErpTemplate:
    """Average attended epochs of one subject and paradigm.

    ``attended`` and ``unattended`` are :class:`EpochSet` s or ``(n, C, T)``
    arrays. With ``unattended`` the template is the attended-minus-unattended
    difference wave. The peak latency is the GFP maximum in 0.2-0.8 s.
    """
    att = attended.data if isinstance(attended, EpochSet) else np.asarray(attended)
    if att.ndim == 2:
        att = att[None]
    if len(att) == 0:
        raise ValueError("cannot estimate a template from zero attended epochs")
    wave = att.astype(np.float64).mean(axis=0)
    if unattended is not None:
        un = unattended.data if isinstance(unattended, EpochSet) else np.asarray(unattended)
        if len(un):
            wave = wave - un.astype(np.float64).mean(axis=0)
    times = sample_times(fs, wave.shape[1], t_min)
    window = (times >= PEAK_SEARCH_S[0]) & (times <= PEAK_SEARCH_S[1])
    power = gfp(wave)
    subject = paradigm = 0
    uids = frozenset()
    if isinstance(attended, EpochSet):
        subject = int(attended.subject[0])
        paradigm = int(attended.paradigm[0])
        uids = frozenset(attended.uid.tolist())
    if not np.any(power[window] > 1e-9 * max(1.0, np.abs(wave).max())):
        raise DegenerateTemplateError(
            f"template for subject {subject} paradigm {paradigm} has no field power in the search window")
    idx = np.flatnonzero(window)
    peak = int(idx[np.argmax(power[idx])])
    return ErpTemplate(subject, paradigm, wave.astype(np.float32), float(times[peak]),
                       _peak_segment(wave, peak, times), uids)


def _stretch(template: ErpTemplate, width_s, shift_s, fs=FS_HZ, t_min=T_MIN_S):
    """Resample the template segment to ``width_s`` and move its peak by ``shift_s``.

    Returns ``(waveform, clipped)``.
    """
    wave = np.asarray(template.waveform, dtype=np.float64)
    n_ch, n_t = wave.shape
    times = sample_times(fs, n_t, t_min)
    seg_lo, seg_hi = template.segment_s
    peak = template.peak_latency_s
    ratio = width_s / (seg_hi - seg_lo)
    new_peak = peak + shift_s
    new_lo = new_peak - (peak - seg_lo) * ratio
    new_hi = new_peak + (seg_hi - peak) * ratio
    clipped = new_lo < times[0] - 0.5 / fs or new_hi > times[-1] + 0.5 / fs
    inside = (times >= new_lo) & (times < new_hi)
    out = np.zeros_like(wave)
    if not inside.any():
        return out, True
    # Map each output time back into the template's time axis.
    src_t = peak + (times[inside] - new_peak) / ratio
    pos = (src_t - times[0]) * fs
    i0 = np.clip(np.floor(pos).astype(int), 0, n_t - 1)
    i1 = np.clip(i0 + 1, 0, n_t - 1)
    frac = pos - np.floor(pos)
    seg_mask = (times >= seg_lo) & (times < seg_hi)
    masked = np.where(seg_mask[None, :], wave, 0.0)
    out[:, inside] = masked[:, i0] * (1 - frac) + masked[:, i1] * frac
    return out, bool(clipped)


def draw_variation(rng: RngStream, width_range=WIDTH_RANGE_S, latency_sd=LATENCY_SD_S):
    """Draw ``(width_s, shift_s)``; the shift is uniform with standard deviation ``latency_sd``."""
    half = np.sqrt(3.0) * latency_sd
    width = rng.draw_uniform(low=width_range[0], high=width_range[1])
    shift = rng.draw_uniform(low=-half, high=half)
    return float(width), float(shift)


def vary_erp(template: ErpTemplate, rng, width_s=None, shift_s=None, return_params=False):
    """A varied copy of the template ERP, shape ``(C, T)``.

    Width and latency shift are drawn from ``rng`` unless given explicitly;
    ``width_s=None, shift_s=0`` with the template's own width leaves the
    segment unchanged.
    """
    if template.segment_s is None:
        raise DegenerateTemplateError("template has no ERP segment")
    if width_s is None or shift_s is None:
        w, s = draw_variation(as_stream(rng, "vary_erp"))
        width_s = w if width_s is None else width_s
        shift_s = s if shift_s is None else shift_s
    wave, clipped = _stretch(template, width_s, shift_s)
    if clipped:
        logger.debug("varied ERP for subject %s clipped at the epoch edge", template.subject_id)
    wave = wave.astype(np.float32)
    if return_params:
        return wave, {"width_s": width_s, "shift_s": shift_s, "clipped": clipped}
    return wave


def gain_factor(gain_db) -> float:
    return float(10.0 ** (float(gain_db) / 20.0))


def simulate_attended(unattended: Epoch, waveform, gain_db) -> Epoch:
    """Add an amplified ERP to an unattended epoch and relabel it attended."""
    data = np.asarray(unattended.data, dtype=np.float32)
    waveform = np.asarray(waveform, dtype=np.float32)
    if data.shape != waveform.shape:
        raise ValueError(f"epoch shape {data.shape} does not match waveform shape {waveform.shape}")
    out = data + np.float32(gain_factor(gain_db)) * waveform
    return Epoch(unattended.subject_id, unattended.paradigm, unattended.trial_id, Label.ATTENDED,
                 out, Origin.for_gain(gain_db), unattended.fs_hz, unattended.t_min_s,
                 unattended.uid, unattended.sources)


# --------------------------------------------------------------------------- #
# recipes
# --------------------------------------------------------------------------- #


def draw_average_recipes(n_source, target_count, rng: RngStream, k_max=3) -> np.ndarray:
    """Index sets for ``target_count`` averaged epochs, shape ``(target, 3)``, -1 padded."""
    if n_source < k_max:
        raise ValueError(f"class has {n_source} epochs, fewer than k_max={k_max}")
    src = np.full((target_count, N_SOURCES), -1, dtype=np.int64)
    ks = rng.draw_integers(1, k_max + 1, size=target_count)
    for i, k in enumerate(ks):
        src[i, :k] = rng.draw_choice(n_source, int(k))
    return src


def _average(data, src) -> np.ndarray:
    """Mean over the non-negative indices in each row of ``src``."""
    valid = src >= 0
    k = valid.sum(axis=1)
    acc = np.zeros((len(src),) + data.shape[1:], dtype=np.float64)
    for j in range(src.shape[1]):
        rows = np.flatnonzero(valid[:, j])
        acc[rows] += data[src[rows, j]]
    return (acc / k[:, None, None]).astype(np.float32)


def upsample_by_averaging(class_epochs: EpochSet, target_count, rng, k_max=3) -> EpochSet:
    """``target_count`` new epochs, each the mean of k in {1..k_max} distinct source epochs."""
    rng = as_stream(rng, "upsample")
    if len(class_epochs) and (len(np.unique(class_epochs.subject)) > 1 or len(np.unique(class_epochs.label)) > 1):
        raise ValueError("upsampling expects epochs of a single subject and class")
    src = draw_average_recipes(len(class_epochs), target_count, rng, k_max)
    data = _average(class_epochs.data, src)
    first = src[:, 0]
    sources = np.where(src >= 0, class_epochs.uid[np.maximum(src, 0)], 0)
    return EpochSet(
        data, class_epochs.subject[first], class_epochs.paradigm[first], class_epochs.trial[first],
        class_epochs.label[first], np.full(target_count, Origin.UPSAMPLED_AVG),
        uid=_AUG_UID_BASE + np.arange(target_count), sources=sources,
        fs_hz=class_epochs.fs_hz, t_min_s=class_epochs.t_min_s,
    )


@dataclass
class AugmentedSet:
    """A lazily materialised augmented epoch set.

    Row ``i`` averages ``base`` epochs ``src[i]`` and, when ``template[i] >= 0``,
    adds ``10**(gain_db/20)`` times the template varied to ``width[i]`` and
    shifted by ``shift[i]``.
    """

    base: EpochSet
    src: np.ndarray
    label: np.ndarray
    origin: np.ndarray
    template: np.ndarray
    width: np.ndarray
    shift: np.ndarray
    gain_db: float
    templates: list = field(default_factory=list)
    uid_offset: int = 0

    def __len__(self):
        return len(self.src)

    @property
    def subject(self):
        return self.base.subject[self.src[:, 0]] if len(self) else np.zeros(0, np.int64)

    @property
    def paradigm(self):
        return self.base.paradigm[self.src[:, 0]] if len(self) else np.zeros(0, np.int64)

    @property
    def trial(self):
        return self.base.trial[self.src[:, 0]] if len(self) else np.zeros(0, np.int64)

    @property
    def uid(self):
        return _AUG_UID_BASE + self.uid_offset + np.arange(len(self))

    @property
    def sources(self) -> np.ndarray:
        return np.where(self.src >= 0, self.base.uid[np.maximum(self.src, 0)], 0)

    @property
    def manifest(self):
        keys = zip(self.subject.tolist(), self.paradigm.tolist(), self.label.tolist(), self.origin.tolist())
        counts: dict = {}
        for k in keys:
            counts[k] = counts.get(k, 0) + 1
        return dict(sorted(counts.items()))

    def source_ids(self) -> set[int]:
        """Provenance ids of every original epoch feeding this set, templates included."""
        ids = set(np.unique(self.sources).tolist())
        used = np.unique(self.template[self.template >= 0])
        for t in used:
            ids |= set(self.templates[int(t)].source_uids)
        ids.discard(0)
        return ids

    def materialize(self, index=None) -> np.ndarray:
        """Payload of rows ``index`` (all rows by default), shape ``(n, C, T)`` float32."""
        index = np.arange(len(self)) if index is None else np.asarray(index)
        data = _average(self.base.data, self.src[index])
        factor = np.float32(gain_factor(self.gain_db))
        for row, i in enumerate(index):
            t = self.template[i]
            if t >= 0:
                wave, _ = _stretch(self.templates[int(t)], float(self.width[i]), float(self.shift[i]))
                data[row] = data[row] + factor * wave.astype(np.float32)
        return data

    def to_epochset(self) -> EpochSet:
        return EpochSet(self.materialize(), self.subject, self.paradigm, self.trial, self.label,
                        self.origin, uid=self.uid, sources=self.sources,
                        fs_hz=self.base.fs_hz, t_min_s=self.base.t_min_s,
                        info={"gain_db": self.gain_db})

    @classmethod
    def concat(cls, parts: list["AugmentedSet"]) -> "AugmentedSet":
        """Merge parts drawn from the same base set."""
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        base = parts[0].base
        templates, t_cols = [], []
        for p in parts:
            if p.base is not base:
                raise ValueError("augmented parts must share one base set")
            t = p.template.copy()
            t[t >= 0] += len(templates)
            templates.extend(p.templates)
            t_cols.append(t)
        return cls(base, np.concatenate([p.src for p in parts]), np.concatenate([p.label for p in parts]),
                   np.concatenate([p.origin for p in parts]), np.concatenate(t_cols),
                   np.concatenate([p.width for p in parts]), np.concatenate([p.shift for p in parts]),
                   parts[0].gain_db, templates, parts[0].uid_offset)


@dataclass
class AugmentedCorpus:
    upsampled: AugmentedSet
    sim0: AugmentedSet
    sim3: AugmentedSet
    sim6: AugmentedSet
    skipped: list = field(default_factory=list)

    @property
    def sets(self) -> dict[str, AugmentedSet]:
        return {"upsampled": self.upsampled, "sim0": self.sim0, "sim3": self.sim3, "sim6": self.sim6}

    def __len__(self):
        return sum(len(s) for s in self.sets.values())

    def counts(self, paradigm) -> dict[str, tuple[int, int]]:
        """Attended/unattended counts per set for one paradigm."""
        out = {}
        for name, s in self.sets.items():
            m = s.paradigm == int(paradigm)
            out[name] = (int(np.sum(m & (s.label == Label.ATTENDED))), int(np.sum(m & (s.label == Label.UNATTENDED))))
        out["augmented"] = tuple(sum(v[i] for v in out.values()) for i in (0, 1))
        return out

    def source_ids(self) -> set[int]:
        ids = set()
        for s in self.sets.values():
            ids |= s.source_ids()
        return ids


def _empty_part(base, gain_db):
    z = np.zeros(0, np.int64)
    return AugmentedSet(base, np.zeros((0, N_SOURCES), np.int64), z, z, z, np.zeros(0), np.zeros(0), gain_db)


def _gather(idx, recipes):
    """Map recipe rows (indices into ``idx``) to base-set indices, keeping -1 padding."""
    return np.where(recipes >= 0, idx[np.maximum(recipes, 0)], -1)


def _group_upsampled(base, idx_att, idx_un, target, rng):
    src_a = _gather(idx_att, draw_average_recipes(len(idx_att), target, rng.child("attended")))
    src_u = _gather(idx_un, draw_average_recipes(len(idx_un), target, rng.child("unattended")))
    src = np.concatenate([src_a, src_u])
    n = len(src)
    labels = np.r_[np.full(target, Label.ATTENDED), np.full(target, Label.UNATTENDED)]
    return AugmentedSet(base, src, labels, np.full(n, Origin.UPSAMPLED_AVG), np.full(n, -1),
                        np.zeros(n), np.zeros(n), 0.0)


def _group_simulated(base, idx_un, template: ErpTemplate, n_unattended, gain_db, rng):
    n_scaled = 4 * n_unattended
    src = _gather(idx_un, draw_average_recipes(len(idx_un), n_scaled, rng.child("upsample")))
    half = rng.child("split").permutation(n_scaled)[: n_scaled // 2]
    is_att = np.zeros(n_scaled, dtype=bool)
    is_att[half] = True
    var_rng = rng.child("vary")
    width = np.zeros(n_scaled)
    shift = np.zeros(n_scaled)
    for i in np.flatnonzero(is_att):
        width[i], shift[i] = draw_variation(var_rng)
    labels = np.where(is_att, Label.ATTENDED, Label.UNATTENDED).astype(np.int64)
    # Attended rows first, then unattended, each in draw order.
    order = np.r_[np.flatnonzero(is_att), np.flatnonzero(~is_att)]
    return AugmentedSet(base, src[order], labels[order], np.full(n_scaled, Origin.for_gain(gain_db)),
                        np.where(is_att, 0, -1)[order], width[order], shift[order], gain_db, [template])


def build_augmented_corpus(original: EpochSet, rng, gains_db=GAINS_DB, k_max=3) -> AugmentedCorpus:
    """Upsampled and simulated sets for every subject and paradigm of ``original``.

    Each set holds ``2 * n_unattended`` epochs per class for every
    subject/paradigm group, so the corpus is class-balanced throughout.
    """
    rng = as_stream(rng, "augment")
    if len(gains_db) != 3:
        raise ValueError("the corpus has exactly three simulated sets")
    up_parts = []
    sim_parts = {g: [] for g in gains_db}
    skipped = []
    groups = sorted(set(zip(original.subject.tolist(), original.paradigm.tolist())))
    for subject, paradigm in groups:
        in_group = (original.subject == subject) & (original.paradigm == paradigm)
        idx_att = np.flatnonzero(in_group & (original.label == Label.ATTENDED))
        idx_un = np.flatnonzero(in_group & (original.label == Label.UNATTENDED))
        if len(idx_att) == 0 or len(idx_un) == 0:
            raise ValueError(f"subject {subject} paradigm {paradigm} lacks one of the classes")
        g_rng = rng.child(f"subject={subject}", f"paradigm={paradigm}")
        n_un = len(idx_un)
        up_parts.append(_group_upsampled(original, idx_att, idx_un, 2 * n_un, g_rng.child("upsampled")))
        try:
            template = estimate_template(original.subset(idx_att), original.subset(idx_un))
        except DegenerateTemplateError as exc:
            logger.warning("skipping ERP simulation: %s", exc)
            skipped.append((subject, paradigm))
            continue
        for g in gains_db:
            sim_parts[g].append(_group_simulated(original, idx_un, template, n_un, g,
                                                 g_rng.child(f"simulated={g:g}dB")))
    sets = [AugmentedSet.concat(up_parts)]
    for i, g in enumerate(gains_db):
        part = AugmentedSet.concat(sim_parts[g]) if sim_parts[g] else _empty_part(original, g)
        sets.append(part)
    offset = 0
    for s in sets:
        s.uid_offset = offset
        offset += len(s)
    return AugmentedCorpus(*sets, skipped=skipped)


class AugmentedView:
    """Concatenation of an :class:`EpochSet` and augmented sets, for batch training.

    Exposes ``labels``, ``paradigm`` and ``batch(index) -> (n, C, T)``.
    """

    def __init__(self, parts):
        self.parts = [p for p in parts if len(p)]
        sizes = [len(p) for p in self.parts]
        self.offsets = np.r_[0, np.cumsum(sizes)]
        self.label = np.concatenate([np.asarray(p.label) for p in self.parts]) if self.parts else np.zeros(0, int)
        self.paradigm = (np.concatenate([np.asarray(p.paradigm) for p in self.parts])
                         if self.parts else np.zeros(0, int))

    def __len__(self):
        return int(self.offsets[-1])

    def batch(self, index) -> np.ndarray:
        index = np.asarray(index)
        which = np.searchsorted(self.offsets, index, side="right") - 1
        out = None
        for w in np.unique(which):
            rows = np.flatnonzero(which == w)
            part = self.parts[w]
            local = index[rows] - self.offsets[w]
            chunk = part.data[local] if isinstance(part, EpochSet) else part.materialize(local)
            if out is None:
                out = np.empty((len(index),) + chunk.shape[1:], dtype=np.float32)
            out[rows] = chunk
        return out

    def source_ids(self) -> set[int]:
        ids = set()
        for p in self.parts:
            ids |= p.source_ids()
        return ids

    def select_paradigm(self, paradigm) -> "AugmentedView":
        parts = []
        for p in self.parts:
            m = np.asarray(p.paradigm) == int(paradigm)
            if isinstance(p, EpochSet):
                parts.append(p.subset(m))
            else:
                parts.append(AugmentedSet(p.base, p.src[m], p.label[m], p.origin[m], p.template[m],
                                          p.width[m], p.shift[m], p.gain_db, p.templates, p.uid_offset))
        return AugmentedView(parts)
