"""Binary checkpoint format.

Layout (little-endian)::

    b"MSDK" | u16 version
    u32 len + config JSON
    u32 len + state JSON (epoch, step, history, mask/model metadata)
    u32 tensor count, then per tensor:
        u16 len + name | u8 len + dtype tag | u8 ndim | ndim * u64 shape | payload
    u32 len + RNG state JSON
    32-byte SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from typing import Dict

import numpy as np

from .models import ParamStore
from .pruning import PruneMask
from .training import AdagradState, TrainConfig, TrainState

MAGIC = b"MSDK"
VERSION = 1
_DTYPES = {"f8": "<f8", "b1": "|b1", "i8": "<i8"}


class CheckpointError(ValueError):
    pass


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.bool_:
        return "b1"
    if arr.dtype.kind == "f":
        return "f8"
    return "i8"


def _blob(buf, data: bytes):
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def _collect_tensors(state: TrainState) -> Dict[str, np.ndarray]:
    out = {f"param/{k}": v for k, v in state.params.tensors.items()}
    if state.mask is not None:
        out.update({f"mask/{k}": v for k, v in state.mask.bits.items()})
    for path, acc in state.opt.accumulators.items():
        out.update({f"opt/{path}/{k}": v for k, v in acc.items()})
    if state.student is not None:
        out.update({f"student/{k}": v for k, v in state.student.items()})
    return out


def to_bytes(state: TrainState) -> bytes:
    p = state.params
    meta = {
        "epoch": state.epoch,
        "step": state.step,
        "history": state.history,
        "model": {"backbone": p.backbone, "dim": p.dim, "entity_count": p.entity_count,
                  "relation_count": p.relation_count},
        "mask": None if state.mask is None else {
            "gamma": state.mask.gamma, "scope": state.mask.scope,
            "refreshed_at": list(state.mask.refreshed_at)},
        "adagrad_eps": state.opt.epsilon,
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    _blob(buf, json.dumps(state.config.to_dict(), sort_keys=True).encode())
    _blob(buf, json.dumps(meta, sort_keys=True).encode())
    tensors = _collect_tensors(state)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        tag = _dtype_tag(arr)
        name_b = name.encode()
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", len(tag)))
        buf.write(tag.encode())
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    _blob(buf, json.dumps(state.rng_state, sort_keys=True).encode())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, state: TrainState) -> None:
    data = to_bytes(state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def from_bytes(data: bytes, source: str = "<bytes>") -> TrainState:
    if len(data) < 6 + 32:
        raise CheckpointError(f"{source}: corrupt checkpoint (truncated)")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<H", data[4:6])
    if version != VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version}, expected {VERSION}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{source}: corrupt checkpoint (checksum mismatch)")
    view = memoryview(body)
    pos = 6

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError(f"{source}: corrupt checkpoint (truncated)")
        out = view[pos:pos + n]
        pos += n
        return out

    def blob():
        (n,) = struct.unpack("<I", take(4))
        return bytes(take(n))

    config = TrainConfig.from_dict(json.loads(blob()))
    meta = json.loads(blob())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode()
        (n,) = struct.unpack("<B", take(1))
        tag = bytes(take(n)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = np.dtype(_DTYPES[tag])
        size = int(np.prod(shape)) * dtype.itemsize
        tensors[name] = np.frombuffer(take(size), dtype=dtype).reshape(shape).copy()
    rng = json.loads(blob())

    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    model = meta["model"]
    params = ParamStore(model["backbone"], model["dim"], model["entity_count"],
                        model["relation_count"], group("param/"))
    mask = None
    if meta["mask"] is not None:
        mask = PruneMask(group("mask/"), meta["mask"]["gamma"], meta["mask"]["scope"],
                         tuple(meta["mask"]["refreshed_at"]))
    opt = AdagradState({"student": group("opt/student/"), "teacher": group("opt/teacher/")},
                       meta["adagrad_eps"])
    student = group("student/") or None
    state = TrainState(config, params, mask, opt, student, meta["epoch"], meta["step"],
                       meta["history"])
    if rng.get("epoch") != state.epoch or rng.get("step") != state.step:
        raise CheckpointError(f"{source}: RNG state does not match counters")
    return state


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        data = fh.read()
    return from_bytes(data, str(path))
