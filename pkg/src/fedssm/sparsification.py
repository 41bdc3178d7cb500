"""Sparse masks, mask selection rules and the uplink wire format.

Masks are boolean numpy arrays of length ``d``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, as_tensor


class SsmVariant(str, enum.Enum):
    SSM = "ssm"  # Top-k of the model update
    SSM_M = "ssm_m"  # Top-k of the first-moment update
    SSM_V = "ssm_v"  # Top-k of the second-moment update
    FAIRNESS_TOP = "fairness_top"
    RAND_K = "rand_k"


class WireMode(str, enum.Enum):
    MASK = "mask"
    INDEX = "index"


class DecodeError(ValueError):
    pass


def _check_k(k: int, d: int) -> None:
    if not 1 <= k <= d:
        raise ValueError(f"k={k} outside [1, {d}]")


def topk_mask(x, k: int) -> np.ndarray:
    """Keep the ``k`` largest ``|x_j|``; equal magnitudes go to the lower index."""
    x = as_tensor(x, "x")
    _check_k(k, x.size)
    order = np.argsort(-np.abs(x), kind="stable")
    mask = np.zeros(x.size, dtype=bool)
    mask[order[:k]] = True
    return mask


def randk_mask(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    _check_k(k, d)
    mask = np.zeros(d, dtype=bool)
    mask[rng.choice(d, size=k, replace=False)] = True
    return mask


def complement(mask: np.ndarray) -> np.ndarray:
    return ~np.asarray(mask, dtype=bool)


def apply_mask(x, mask) -> np.ndarray:
    x = as_tensor(x, "x")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError("mask and tensor differ in length")
    return np.where(mask, x, 0.0)


def _max_normalized(x: np.ndarray) -> np.ndarray:
    a = np.abs(x)
    peak = a.max()
    return a / peak if peak > 0 else a


def fairness_scores(dW, dM, dV) -> np.ndarray:
    """Per-coordinate max of the three max-normalized magnitudes."""
    return np.maximum.reduce([_max_normalized(as_tensor(t)) for t in (dW, dM, dV)])


def ssm_select(dW, dM, dV, k: int, variant: SsmVariant, rng: np.random.Generator | None = None) -> np.ndarray:
    """Choose the one mask shared by the model and both moment updates."""
    dW, dM, dV = as_tensor(dW, "dW"), as_tensor(dM, "dM"), as_tensor(dV, "dV")
    if not dW.shape == dM.shape == dV.shape:
        raise DimensionError("update tensors differ in length")
    variant = SsmVariant(variant)
    if variant is SsmVariant.SSM:
        return topk_mask(dW, k)
    if variant is SsmVariant.SSM_M:
        return topk_mask(dM, k)
    if variant is SsmVariant.SSM_V:
        return topk_mask(dV, k)
    if variant is SsmVariant.FAIRNESS_TOP:
        return topk_mask(fairness_scores(dW, dM, dV), k)
    if rng is None:
        raise ValueError("rand_k selection needs an rng")
    return randk_mask(dW.size, k, rng)


@dataclass(frozen=True)
class SparseUpdate:
    """One shared mask plus the kept values of all three update tensors."""

    mask: np.ndarray
    values_w: np.ndarray
    values_m: np.ndarray
    values_v: np.ndarray

    @property
    def d(self) -> int:
        return int(self.mask.size)

    @property
    def k(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass(frozen=True)
class SparseVector:
    """A single masked tensor, used where each tensor carries its own mask."""

    mask: np.ndarray
    values: np.ndarray

    @property
    def k(self) -> int:
        return int(np.count_nonzero(self.mask))


def encode_vector(x, mask) -> SparseVector:
    x = as_tensor(x, "x")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError("mask and tensor differ in length")
    return SparseVector(mask.copy(), x[mask].copy())


def decode_vector(sv: SparseVector, d: int) -> np.ndarray:
    if sv.mask.size != d:
        raise DecodeError(f"mask length {sv.mask.size} != d={d}")
    if sv.values.size != sv.k:
        raise DecodeError(f"{sv.values.size} values for a mask with {sv.k} bits set")
    out = np.zeros(d)
    out[sv.mask] = sv.values
    return out


def encode_update(dW, dM, dV, mask) -> SparseUpdate:
    mask = np.asarray(mask, dtype=bool)
    parts = [encode_vector(t, mask).values for t in (dW, dM, dV)]
    return SparseUpdate(mask.copy(), *parts)


def decode_update(update: SparseUpdate, d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return tuple(
        decode_vector(SparseVector(update.mask, vals), d)
        for vals in (update.values_w, update.values_m, update.values_v)
    )


def index_bits(d: int) -> int:
    """``ceil(log2 d)`` computed exactly on integers."""
    return (int(d) - 1).bit_length()


def wire_bits(mode: WireMode | str, d: int, k: int, q: int, tensors: int = 3) -> int:
    """Bits for ``tensors`` value lists sharing one mask (or one index list)."""
    mode = WireMode(mode)
    if mode is WireMode.MASK:
        return tensors * k * q + d
    return k * (tensors * q + index_bits(d))


def choose_wire_mode(d: int, k: int, q: int, tensors: int = 3) -> tuple[WireMode, int]:
    """Cheaper of the two encodings; a tie keeps the mask form."""
    mask_bits = wire_bits(WireMode.MASK, d, k, q, tensors)
    idx_bits = wire_bits(WireMode.INDEX, d, k, q, tensors)
    if idx_bits < mask_bits:
        return WireMode.INDEX, idx_bits
    return WireMode.MASK, mask_bits


# Canonical byte form, little-endian:
#   u64 d | u64 k | u8 mode (0 mask, 1 index)
#   mask: ceil(d/8) bytes, MSB-first bit packing | index: k x u32 ascending
#   then values_w, values_m, values_v as k x f64 each.
_MODE_TAG = {WireMode.MASK: 0, WireMode.INDEX: 1}
_TAG_MODE = {v: k for k, v in _MODE_TAG.items()}


def serialize_update(update: SparseUpdate, mode: WireMode | str | None = None) -> bytes:
    d, k = update.d, update.k
    if mode is None:
        mode, _ = choose_wire_mode(d, k, 64)
    mode = WireMode(mode)
    head = struct.pack("<QQB", d, k, _MODE_TAG[mode])
    if mode is WireMode.MASK:
        body = np.packbits(update.mask).tobytes()
    else:
        body = np.flatnonzero(update.mask).astype("<u4").tobytes()
    vals = b"".join(np.asarray(v, dtype="<f8").tobytes() for v in (update.values_w, update.values_m, update.values_v))
    return head + body + vals


def deserialize_update(data: bytes) -> SparseUpdate:
    head = struct.calcsize("<QQB")
    if len(data) < head:
        raise DecodeError("buffer shorter than header")
    d, k, tag = struct.unpack_from("<QQB", data)
    if tag not in _TAG_MODE:
        raise DecodeError(f"unknown mode tag {tag}")
    off = head
    if _TAG_MODE[tag] is WireMode.MASK:
        nbytes = (d + 7) // 8
        mask = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, off), count=d).astype(bool)
        off += nbytes
    else:
        idx = np.frombuffer(data, "<u4", k, off).astype(np.int64)
        off += 4 * k
        if np.any(np.diff(idx) <= 0) or (k and idx[-1] >= d):
            raise DecodeError("indices must be strictly ascending and < d")
        mask = np.zeros(d, dtype=bool)
        mask[idx] = True
    if int(mask.sum()) != k:
        raise DecodeError(f"mask has {int(mask.sum())} bits set, header says k={k}")
    if len(data) != off + 3 * 8 * k:
        raise DecodeError("value section has the wrong length")
    vals = [np.frombuffer(data, "<f8", k, off + 8 * k * i).astype(np.float64) for i in range(3)]
    return SparseUpdate(mask, *vals)
