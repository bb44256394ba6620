"""Checkpoint files: EAAD-style preamble, JSON header, named float32 blobs."""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from ..data import BadMagicError, TruncatedPayloadError, VersionMismatchError
from .optim import AdamState

MAGIC = b"EACK"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")


def encode_checkpoint(state: dict[str, np.ndarray], adam: AdamState = None, config: dict = None,
                      meta: dict = None) -> bytes:
    blobs = []
    entries = []
    offset = 0

    def add(group, name, arr):
        nonlocal offset
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"group": group, "name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes

    for name in sorted(state):
        add("state", name, state[name])
    header = {"config": config or {}, "meta": meta or {}, "blobs": entries, "adam": None}
    if adam is not None:
        for name in sorted(adam.m):
            add("adam_m", name, adam.m[name])
            add("adam_v", name, adam.v[name])
        header["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                          "step": adam.step}
    header["payload_bytes"] = offset
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs)


def decode_checkpoint(buf: bytes):
    """Return ``(state, adam_state_or_None, config, meta)``."""
    if len(buf) < _PREAMBLE.size or buf[:4] != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    _, version, head_len = _PREAMBLE.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} is not supported")
    start = _PREAMBLE.size + head_len
    if len(buf) < start:
        raise TruncatedPayloadError("checkpoint header is truncated")
    header = json.loads(buf[_PREAMBLE.size:start].decode("utf-8"))
    payload = buf[start:]
    if len(payload) < header["payload_bytes"]:
        raise TruncatedPayloadError("checkpoint payload is truncated")
    groups = {"state": {}, "adam_m": {}, "adam_v": {}}
    for e in header["blobs"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        groups[e["group"]][e["name"]] = arr.astype(np.float32)
    adam = None
    if header["adam"] is not None:
        adam = AdamState(**header["adam"], m=groups["adam_m"], v=groups["adam_v"])
    return groups["state"], adam, header["config"], header["meta"]


def save_checkpoint(path, state, adam=None, config=None, meta=None) -> int:
    blob = encode_checkpoint(state, adam, config, meta)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load_checkpoint(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
