"""Global magnitude pruning with an overlay mask, plus the sparse export format.

The mask never destroys weights: the student is ``weights * mask`` over the
same store, so a later refresh can revive a pruned entry whose magnitude grew.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass
from decimal import Decimal
from typing import Dict, Mapping, Optional

import numpy as np

from .models import ParamStore, Tensors, _shapes

SCOPES = ("global", "per-tensor")
SPARSE_MAGIC = b"MSDS"
SPARSE_VERSION = 1


class SparseFormatError(ValueError):
    pass


def prune_count(gamma: float, size: int) -> int:
    """``floor(gamma * size)`` evaluated on the decimal value of ``gamma``.

    Plain float products such as ``0.29 * 100`` land just below the integer.
    """
    return int(math.floor(Decimal(repr(float(gamma))) * size))


@dataclass
class PruneMask:
    bits: Dict[str, np.ndarray]
    gamma: float = 0.0
    scope: str = "global"
    refreshed_at: tuple = (0, 0)

    def apply(self, tensors: Mapping[str, np.ndarray]) -> Tensors:
        return {k: np.where(self.bits[k], v, 0.0) for k, v in tensors.items()}

    @property
    def size(self) -> int:
        return int(sum(b.size for b in self.bits.values()))

    @property
    def zeros(self) -> int:
        return int(sum(b.size - np.count_nonzero(b) for b in self.bits.values()))

    def copy(self) -> "PruneMask":
        return PruneMask({k: v.copy() for k, v in self.bits.items()}, self.gamma, self.scope,
                         tuple(self.refreshed_at))

    def equals(self, other: "PruneMask") -> bool:
        return self.bits.keys() == other.bits.keys() and all(
            np.array_equal(self.bits[k], other.bits[k]) for k in self.bits)


def _check_gamma(gamma):
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")


def _lowest(values: np.ndarray, k: int) -> np.ndarray:
    # stable sort: equal magnitudes are pruned in ascending flat-index order
    return np.argsort(values, kind="stable")[:k]


def compute_mask(params, gamma: float, scope: str = "global",
                 refreshed_at=(0, 0)) -> PruneMask:
    """Zero out the ``floor(gamma * P)`` smallest-magnitude weights.

    ``params`` may be a :class:`ParamStore` or a plain dict of arrays. Under
    ``per-tensor`` scope the fraction is applied inside each tensor.
    """
    _check_gamma(gamma)
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    tensors = params.tensors if isinstance(params, ParamStore) else params
    bits = {k: np.ones(v.shape, dtype=bool) for k, v in tensors.items()}
    if scope == "global":
        names = list(tensors)
        flat = np.concatenate([np.abs(tensors[k]).ravel() for k in names])
        pruned = np.zeros(flat.size, dtype=bool)
        pruned[_lowest(flat, prune_count(gamma, flat.size))] = True
        offset = 0
        for k in names:
            n = tensors[k].size
            bits[k] = ~pruned[offset:offset + n].reshape(tensors[k].shape)
            offset += n
    else:
        for k, v in tensors.items():
            flat_bits = bits[k].reshape(-1)
            flat_bits[_lowest(np.abs(v).ravel(), prune_count(gamma, v.size))] = False
    return PruneMask(bits, float(gamma), scope, tuple(refreshed_at))


def random_mask(params, gamma: float, seed: int, scope: str = "global") -> PruneMask:
    """Mask with the same cardinality as :func:`compute_mask` but random positions."""
    _check_gamma(gamma)
    tensors = params.tensors if isinstance(params, ParamStore) else params
    rng = np.random.default_rng(seed)
    noise = {k: rng.random(v.shape) for k, v in tensors.items()}
    return compute_mask(noise, gamma, scope)


def refresh_policy(step: int, epoch: int, config) -> bool:
    """Whether the mask must be recomputed before this step."""
    mode = getattr(config, "mask_mode", "dynamic")
    if mode != "dynamic":
        return step == 0 and epoch == 0
    if getattr(config, "refresh", "epoch") == "step":
        return True
    return step == 0


def sparsity_stats(mask: PruneMask) -> dict:
    per_tensor = {}
    for k, b in mask.bits.items():
        ones = int(np.count_nonzero(b))
        per_tensor[k] = {"size": int(b.size), "zeros": int(b.size - ones), "ones": ones,
                         "sparsity": (b.size - ones) / b.size if b.size else 0.0}
    total = mask.size
    zeros = mask.zeros
    return {
        "size": total,
        "zeros": zeros,
        "ones": total - zeros,
        "sparsity": zeros / total if total else 0.0,
        "effective_params": total - zeros,
        "gamma": mask.gamma,
        "scope": mask.scope,
        "per_tensor": per_tensor,
    }


# Sparse export: little-endian throughout.
#   b"MSDS" | u16 version | 32-byte config digest | u32 len + model JSON |
#   u32 tensor count | per tensor: u16 len + name, u64 element count, u64 nnz,
#   nnz * u64 ascending flat indices, nnz * f32 values

def config_digest(config) -> bytes:
    if config is None:
        return bytes(32)
    if hasattr(config, "to_dict"):
        config = config.to_dict()
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).digest()


def export_sparse(params: ParamStore, mask: Optional[PruneMask], path, config=None) -> int:
    """Write the surviving weights of the student; returns the number of stored values."""
    if mask is None:
        mask = compute_mask(params, 0.0)
    for k, v in params.tensors.items():
        if mask.bits[k].shape != v.shape:
            raise ValueError(f"mask for {k} has shape {mask.bits[k].shape}, params {v.shape}")
    meta = {"backbone": params.backbone, "dim": params.dim,
            "entity_count": params.entity_count, "relation_count": params.relation_count,
            "gamma": mask.gamma, "scope": mask.scope}
    buf = io.BytesIO()
    buf.write(SPARSE_MAGIC)
    buf.write(struct.pack("<H", SPARSE_VERSION))
    buf.write(config_digest(config))
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(params.tensors)))
    stored = 0
    for name, values in params.tensors.items():
        idx = np.flatnonzero(mask.bits[name].ravel()).astype("<u8")
        name_bytes = name.encode()
        buf.write(struct.pack("<H", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<QQ", values.size, idx.size))
        buf.write(idx.tobytes())
        buf.write(values.ravel()[idx].astype("<f4").tobytes())
        stored += idx.size
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    return stored


def load_sparse(path):
    """Read a sparse export back as ``(ParamStore, PruneMask, digest)``.

    Pruned positions come back as zeros; stored values carry float32 precision.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise SparseFormatError(f"{path}: truncated sparse export")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != SPARSE_MAGIC:
        raise SparseFormatError(f"{path}: not a sparse export (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != SPARSE_VERSION:
        raise SparseFormatError(f"{path}: unsupported version {version}")
    digest = bytes(take(32))
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)))
    shapes = _shapes(meta["backbone"], meta["entity_count"], meta["relation_count"], meta["dim"])
    (count,) = struct.unpack("<I", take(4))
    tensors, bits = {}, {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        size, nnz = struct.unpack("<QQ", take(16))
        if name not in shapes or int(np.prod(shapes[name])) != size:
            raise SparseFormatError(f"{path}: tensor {name!r} does not match model metadata")
        idx = np.frombuffer(take(8 * nnz), dtype="<u8").astype(np.int64)
        vals = np.frombuffer(take(4 * nnz), dtype="<f4").astype(np.float64)
        dense = np.zeros(size)
        dense[idx] = vals
        keep = np.zeros(size, dtype=bool)
        keep[idx] = True
        tensors[name] = dense.reshape(shapes[name])
        bits[name] = keep.reshape(shapes[name])
    if set(tensors) != set(shapes):
        raise SparseFormatError(f"{path}: expected tensors {sorted(shapes)}, found {sorted(tensors)}")
    params =ParamStore(meta["backbone"], meta["dim"], meta["entity_count"],
                        meta["relation_count"], {k: tensors[k] for k in shapes})
    mask = PruneMask({k: bits[k] for k in shapes}, meta["gamma"], meta["scope"])
    return params, mask, digest
