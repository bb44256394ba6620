"""Epoch containers, count tables and the EAAD binary file format."""

from __future__ import annotations

import enum
import io
import json
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

N_CHANNELS = 32
FS_HZ = 256.0
T_MIN_S = -0.2
T_MAX_S = 1.0
N_TIMES = 307
N_SOURCES = 3

MAGIC = b"EAAD"
VERSION = 1


class Paradigm(enum.IntEnum):
    P1 = 1
    P2 = 2
    P3 = 3


class Label(enum.IntEnum):
    UNATTENDED = 0
    ATTENDED = 1


class Origin(enum.IntEnum):
    EXPERIMENTAL = 0
    UPSAMPLED_AVG = 1
    SIMULATED_0DB = 2
    SIMULATED_3DB = 3
    SIMULATED_6DB = 4

    @classmethod
    def for_gain(cls, gain_db: float) -> "Origin":
        try:
            return {0: cls.SIMULATED_0DB, 3: cls.SIMULATED_3DB, 6: cls.SIMULATED_6DB}[int(round(gain_db))]
        except KeyError:
            raise ValueError(f"no origin tag for a {gain_db} dB gain") from None


# --------------------------------------------------------------------------- #
# single epochs
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Epoch:
    subject_id: int
    paradigm: Paradigm
    trial_id: int
    label: Label
    data: np.ndarray
    origin: Origin = Origin.EXPERIMENTAL
    fs_hz: float = FS_HZ
    t_min_s: float = T_MIN_S
    uid: int = 0
    sources: tuple[int, ...] = ()


@dataclass
class EpochValidation:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def validate_epoch(e: Epoch) -> EpochValidation:
    """Check an epoch against the shape, rate and metadata invariants."""
    bad = []
    data = np.asarray(e.data)
    if data.ndim != 2:
        bad.append("data rank")
    else:
        if data.shape[0] != N_CHANNELS:
            bad.append("channel count")
        if data.shape[1] != N_TIMES:
            bad.append("sample count")
    if data.dtype != np.float32:
        bad.append("float32 data")
    if not np.all(np.isfinite(data)):
        bad.append("finite data")
    if not 1 <= int(e.subject_id) <= 24:
        bad.append("subject id")
    if int(e.paradigm) not in {p.value for p in Paradigm}:
        bad.append("paradigm")
    if int(e.label) not in {lab.value for lab in Label}:
        bad.append("label")
    if int(e.origin) not in {o.value for o in Origin}:
        bad.append("origin")
    if e.fs_hz != FS_HZ:
        bad.append("sampling rate")
    if not np.isclose(e.t_min_s, T_MIN_S):
        bad.append("epoch start")
    if len(e.sources) > N_SOURCES:
        bad.append("source count")
    return EpochValidation(bad)


# --------------------------------------------------------------------------- #
# epoch sets
# --------------------------------------------------------------------------- #

_META_FIELDS = ("subject", "paradigm", "trial", "label", "origin", "uid")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class EpochSet:
    """An ordered, immutable collection of epochs stored column-wise.

    ``data`` has shape ``(n_epochs, C, T)``; metadata columns are 1-D integer
    arrays of length ``n_epochs``. ``sources`` holds up to three provenance ids
    per epoch (0 pads unused slots); experimental epochs list themselves.
    """

    def __init__(self, data, subject, paradigm, trial, label, origin=None, uid=None,
                 sources=None, fs_hz=FS_HZ, t_min_s=T_MIN_S, info=None):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"epoch data must be 3-D (epochs, channels, times), got shape {data.shape}")
        n = data.shape[0]

        def col(values, default=0):
            if values is None:
                return np.full(n, default, dtype=np.int64)
            arr = np.asarray(values, dtype=np.int64).reshape(-1)
            if arr.shape[0] != n:
                raise ValueError(f"metadata column has {arr.shape[0]} entries for {n} epochs")
            return arr

        self.data = _readonly(np.ascontiguousarray(data))
        self.subject = _readonly(col(subject))
        self.paradigm = _readonly(col(paradigm))
        self.trial = _readonly(col(trial))
        self.label = _readonly(col(label))
        self.origin = _readonly(col(origin, Origin.EXPERIMENTAL))
        self.uid = _readonly(col(uid))
        if sources is None:
            src = np.zeros((n, N_SOURCES), dtype=np.int64)
            src[:, 0] = self.uid
        else:
            src = np.asarray(sources, dtype=np.int64).reshape(n, N_SOURCES)
        self.sources = _readonly(src)
        self.fs_hz = float(fs_hz)
        self.t_min_s = float(t_min_s)
        self.info = dict(info or {})
        self.manifest = self._count_manifest()

    # construction helpers ---------------------------------------------------

    @classmethod
    def empty(cls, n_channels=N_CHANNELS, n_times=N_TIMES, **kwargs) -> "EpochSet":
        return cls(np.zeros((0, n_channels, n_times), np.float32), [], [], [], [], **kwargs)

    @classmethod
    def from_epochs(cls, epochs: Iterable[Epoch], info=None) -> "EpochSet":
        epochs = list(epochs)
        if not epochs:
            return cls.empty(info=info)
        sources = np.zeros((len(epochs), N_SOURCES), dtype=np.int64)
        for i, e in enumerate(epochs):
            src = e.sources or (e.uid,)
            sources[i, :len(src)] = src
        return cls(
            np.stack([np.asarray(e.data, np.float32) for e in epochs]),
            [e.subject_id for e in epochs],
            [int(e.paradigm) for e in epochs],
            [e.trial_id for e in epochs],
            [int(e.label) for e in epochs],
            [int(e.origin) for e in epochs],
            [e.uid for e in epochs],
            sources,
            fs_hz=epochs[0].fs_hz,
            t_min_s=epochs[0].t_min_s,
            info=info,
        )

    @classmethod
    def concat(cls, sets: Iterable["EpochSet"], info=None) -> "EpochSet":
        sets = [s for s in sets]
        nonempty = [s for s in sets if len(s)]
        if not nonempty:
            return sets[0] if sets else cls.empty(info=info)
        first = nonempty[0]
        for s in nonempty[1:]:
            if s.fs_hz != first.fs_hz or s.t_min_s != first.t_min_s or s.data.shape[1:] != first.data.shape[1:]:
                raise ValueError("cannot concatenate epoch sets with different layouts")
        return cls(
            np.concatenate([s.data for s in nonempty]),
            *(np.concatenate([getattr(s, f) for s in nonempty]) for f in _META_FIELDS[:5]),
            uid=np.concatenate([s.uid for s in nonempty]),
            sources=np.concatenate([s.sources for s in nonempty]),
            fs_hz=first.fs_hz,
            t_min_s=first.t_min_s,
            info=info if info is not None else first.info,
        )

    # container protocol -----------------------------------------------------

    def __len__(self):
        return self.data.shape[0]

    def __iter__(self) -> Iterator[Epoch]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Epoch:
        i = int(i)
        src = tuple(int(s) for s in self.sources[i] if s)
        return Epoch(
            subject_id=int(self.subject[i]),
            paradigm=Paradigm(int(self.paradigm[i])),
            trial_id=int(self.trial[i]),
            label=Label(int(self.label[i])),
            data=self.data[i],
            origin=Origin(int(self.origin[i])),
            fs_hz=self.fs_hz,
            t_min_s=self.t_min_s,
            uid=int(self.uid[i]),
            sources=src,
        )

    def __repr__(self):
        return f"EpochSet(n={len(self)}, shape={self.data.shape[1:]}, fs={self.fs_hz:g})"

    def subset(self, index) -> "EpochSet":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return EpochSet(
            self.data[index],
            self.subject[index],
            self.paradigm[index],
            self.trial[index],
            self.label[index],
            self.origin[index],
            self.uid[index],
            self.sources[index],
            fs_hz=self.fs_hz,
            t_min_s=self.t_min_s,
            info=self.info,
        )

    def select(self, subject=None, paradigm=None, label=None, origin=None) -> "EpochSet":
        return self.subset(self.mask(subject=subject, paradigm=paradigm, label=label, origin=origin))

    def mask(self, subject=None, paradigm=None, label=None, origin=None) -> np.ndarray:
        m = np.ones(len(self), dtype=bool)
        for column, wanted in ((self.subject, subject), (self.paradigm, paradigm),
                               (self.label, label), (self.origin, origin)):
            if wanted is None:
                continue
            if np.ndim(wanted) == 0:
                m &= column == int(wanted)
            else:
                m &= np.isin(column, [int(w) for w in wanted])
        return m

    @property
    def n_channels(self):
        return self.data.shape[1]

    @property
    def n_times(self):
        return self.data.shape[2]

    @property
    def subjects(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.subject))

    @property
    def paradigms(self) -> list[int]:
        return sorted(int(p) for p in np.unique(self.paradigm))

    def source_ids(self) -> set[int]:
        """All provenance ids feeding any epoch of the set."""
        ids = set(np.unique(self.sources).tolist())
        ids.discard(0)
        return ids

    def _count_manifest(self) -> dict[tuple[int, int, int, int], int]:
        keys = zip(self.subject.tolist(), self.paradigm.tolist(), self.label.tolist(), self.origin.tolist())
        return dict(sorted(Counter(keys).items()))

    def equals(self, other: "EpochSet") -> bool:
        """Bit-exact equality of payloads, metadata and order."""
        if len(self) != len(other) or self.data.shape != other.data.shape:
            return False
        same_meta = all(np.array_equal(getattr(self, f), getattr(other, f)) for f in _META_FIELDS)
        return (same_meta
                and np.array_equal(self.sources, other.sources)
                and self.data.tobytes() == other.data.tobytes()
                and self.fs_hz == other.fs_hz
                and self.t_min_s == other.t_min_s)


def validate_epochset(s: EpochSet) -> list[str]:
    bad = []
    if len(s) and s.n_channels != N_CHANNELS:
        bad.append("channel count")
    if len(s) and s.n_times != N_TIMES:
        bad.append("sample count")
    if s.fs_hz != FS_HZ:
        bad.append("sampling rate")
    if not np.isclose(s.t_min_s, T_MIN_S):
        bad.append("epoch start")
    if not np.all(np.isfinite(s.data)):
        bad.append("finite data")
    if np.any((s.subject < 1) | (s.subject > 24)):
        bad.append("subject id")
    if not np.all(np.isin(s.paradigm, [p.value for p in Paradigm])):
        bad.append("paradigm")
    if not np.all(np.isin(s.label, [0, 1])):
        bad.append("label")
    if not np.all(np.isin(s.origin, [o.value for o in Origin])):
        bad.append("origin")
    return bad


# --------------------------------------------------------------------------- #
# count tables
# --------------------------------------------------------------------------- #


class CountTable:
    """Epoch counts keyed by ``(subject, paradigm, label, origin)``."""

    def __init__(self, counts: dict[tuple[int, int, int, int], int]):
        self.counts = {k: int(v) for k, v in counts.items() if v}

    def __eq__(self, other):
        return isinstance(other, CountTable) and self.counts == other.counts

    def __repr__(self):
        return f"CountTable({len(self.counts)} cells, total={self.total()})"

    def total(self, paradigm=None, label=None, origin=None, subject=None) -> int:
        n = 0
        for (s, p, lab, o), c in self.counts.items():
            if subject is not None and s != int(subject):
                continue
            if paradigm is not None and p != int(paradigm):
                continue
            if label is not None and lab != int(label):
                continue
            if origin is not None and o != int(origin):
                continue
            n += c
        return n

    def per_subject(self, paradigm=None, label=None, origin=None) -> dict[int, int]:
        subjects = sorted({k[0] for k in self.counts})
        return {s: self.total(paradigm, label, origin, subject=s) for s in subjects}

    def attended_unattended(self, paradigm, origin=None) -> tuple[int, int]:
        return (self.total(paradigm, Label.ATTENDED, origin),
                self.total(paradigm, Label.UNATTENDED, origin))


def class_counts(s, paradigm=None, label=None) -> CountTable:
    """Count epochs of an :class:`EpochSet` (or anything with a ``manifest``)."""
    counts = {}
    for key, c in s.manifest.items():
        if paradigm is not None and key[1] != int(paradigm):
            continue
        if label is not None and key[2] != int(label):
            continue
        counts[key] = c
    return CountTable(counts)


# --------------------------------------------------------------------------- #
# EAAD files
# --------------------------------------------------------------------------- #


class EaadError(Exception):
    """Base class for EAAD read/write failures."""


class BadMagicError(EaadError):
    pass


class VersionMismatchError(EaadError):
    pass


class TruncatedPayloadError(EaadError):
    pass


class ManifestMismatchError(EaadError):
    pass


class InvalidEpochSetError(EaadError, ValueError):
    pass


_PREAMBLE = struct.Struct("<4sIQ")
_META_DTYPE = [
    ("uid", "<u8"),
    ("sources", "<u8", (N_SOURCES,)),
    ("subject", "<u4"),
    ("trial", "<u4"),
    ("paradigm", "u1"),
    ("label", "u1"),
    ("origin", "u1"),
    ("reserved", "u1"),
    ("fs_hz", "<f4"),
    ("t_min_s", "<f4"),
]
RECORD_SCHEMA = [name for name, *_ in _META_DTYPE] + ["data"]


def _record_dtype(n_channels, n_times) -> np.dtype:
    return np.dtype(_META_DTYPE + [("data", "<f4", (n_channels, n_times))])


def _manifest_rows(manifest):
    return [[*k, v] for k, v in manifest.items()]


def encode_epochset(s: EpochSet, validate=True) -> bytes:
    if validate:
        bad = validate_epochset(s)
        if bad:
            raise InvalidEpochSetError(f"epoch set fails validation: {', '.join(bad)}")
    header = {
        "format": "EAAD",
        "n_epochs": len(s),
        "n_channels": s.n_channels,
        "n_times": s.n_times,
        "fs_hz": s.fs_hz,
        "t_min_s": s.t_min_s,
        "manifest": _manifest_rows(s.manifest),
        "record_schema": RECORD_SCHEMA,
        "info": s.info,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    rec = np.zeros(len(s), dtype=_record_dtype(s.n_channels, s.n_times))
    rec["uid"] = s.uid
    rec["sources"] = s.sources
    rec["subject"] = s.subject
    rec["trial"] = s.trial
    rec["paradigm"] = s.paradigm
    rec["label"] = s.label
    rec["origin"] = s.origin
    rec["fs_hz"] = s.fs_hz
    rec["t_min_s"] = s.t_min_s
    rec["data"] = s.data
    return _PREAMBLE.pack(MAGIC, VERSION, len(head)) + head + rec.tobytes()


def decode_epochset(buf: bytes) -> EpochSet:
    if len(buf) < _PREAMBLE.size or buf[:4] != MAGIC:
        raise BadMagicError("not an EAAD file (bad magic)")
    _, version, head_len = _PREAMBLE.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"EAAD version {version} is not supported (expected {VERSION})")
    start = _PREAMBLE.size
    if len(buf) < start + head_len:
        raise TruncatedPayloadError("EAAD header is truncated")
    header = json.loads(buf[start:start + head_len].decode("utf-8"))
    dtype = _record_dtype(header["n_channels"], header["n_times"])
    n = header["n_epochs"]
    payload = memoryview(buf)[start + head_len:]
    if len(payload) < n * dtype.itemsize:
        raise TruncatedPayloadError(
            f"EAAD payload is truncated: {len(payload)} bytes for {n} records of {dtype.itemsize}")
    if len(payload) > n * dtype.itemsize:
        raise ManifestMismatchError("EAAD payload holds more records than the header declares")
    rec = np.frombuffer(payload, dtype=dtype, count=n)
    s = EpochSet(
        rec["data"].copy() if n else np.zeros((0, header["n_channels"], header["n_times"]), np.float32),
        rec["subject"], rec["paradigm"], rec["trial"], rec["label"], rec["origin"],
        rec["uid"].astype(np.int64), rec["sources"].astype(np.int64),
        fs_hz=header["fs_hz"], t_min_s=header["t_min_s"], info=header.get("info"),
    )
    if _manifest_rows(s.manifest) != header["manifest"]:
        raise ManifestMismatchError("EAAD manifest does not match the stored records")
    return s


def write_epochset(s: EpochSet, destination) -> int:
    """Write ``s`` to a path or binary file object; return the byte count."""
    blob = encode_epochset(s)
    if isinstance(destination, (str, os.PathLike)):
        with open(destination, "wb") as fh:
            fh.write(blob)
    else:
        destination.write(blob)
    return len(blob)


def read_epochset(source) -> EpochSet:
    if isinstance(source, (bytes, bytearray)):
        return decode_epochset(bytes(source))
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return decode_epochset(fh.read())
    if isinstance(source, io.IOBase) or hasattr(source, "read"):
        return decode_epochset(source.read())
    raise TypeError(f"cannot read an EAAD set from {type(source).__name__}")


def make_uid(subject_id: int, paradigm: int, index: int) -> int:
    """Provenance id of the ``index``-th experimental epoch of a subject/paradigm."""
    return (int(subject_id) << 40) | (int(paradigm) << 32) | (int(index) + 1)


def uid_subject(uid) -> np.ndarray:
    return (np.asarray(uid, dtype=np.int64) >> 40) & 0xFFFF
