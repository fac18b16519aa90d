"""Snapshot wire format and the snapshot all-gather.

Sparse layout (little-endian), one record per sample, records back to back:

    u32 active_count | u32 ids[active_count] | f32 values[active_count]

The number of samples is implied by the framed payload length. Values are
f32 when training in single precision and f64 in double precision. The
dense-baseline layout is just ``values[n_samples * local_count]`` row-major,
with neuron ids implied by the shard plan.
"""
from __future__ import annotations

import struct

import numpy as np

from ..layer import LayerSnapshot
from .base import Endpoint, PayloadKind, Phase, ProtocolError

COUNT_BYTES = 4
ID_BYTES = 4


def value_dtype(dtype) -> np.dtype:
    return np.dtype("<f8") if np.dtype(dtype) == np.float64 else np.dtype("<f4")


def sparse_payload_size(counts: np.ndarray, dtype=np.float32) -> int:
    w = value_dtype(dtype).itemsize
    return int(counts.size * COUNT_BYTES + counts.sum() * (ID_BYTES + w))


def _byte_regions(counts: np.ndarray, w: int) -> np.ndarray:
    """Per-byte tag of a sparse payload: 0 count word, 1 id bytes, 2 value bytes."""
    n = counts.size
    lengths = np.empty(3 * n, dtype=np.int64)
    lengths[0::3] = COUNT_BYTES
    lengths[1::3] = counts * ID_BYTES
    lengths[2::3] = counts * w
    return np.repeat(np.tile(np.array([0, 1, 2], dtype=np.uint8), n), lengths)


def encode_sparse(offsets: np.ndarray, ids: np.ndarray, values: np.ndarray,
                  dtype=np.float32) -> bytes:
    vdt = value_dtype(dtype)
    counts = np.diff(offsets).astype(np.int64)
    if counts.size == 0:
        return b""
    tag = _byte_regions(counts, vdt.itemsize)
    out = np.empty(tag.size, dtype=np.uint8)
    out[tag == 0] = counts.astype("<u4").view(np.uint8)
    out[tag == 1] = np.ascontiguousarray(ids, dtype="<u4").view(np.uint8)
    out[tag == 2] = np.ascontiguousarray(values, dtype=vdt).view(np.uint8)
    return out.tobytes()


def decode_sparse(buf: bytes, dtype=np.float32):
    """Inverse of ``encode_sparse``; returns ``(offsets, ids, values)``."""
    vdt = value_dtype(dtype)
    w = vdt.itemsize
    counts = []
    p, end = 0, len(buf)
    unpack = struct.Struct("<I").unpack_from
    while p < end:
        if p + COUNT_BYTES > end:
            raise ProtocolError("truncated snapshot record header")
        c = unpack(buf, p)[0]
        counts.append(c)
        p += COUNT_BYTES + c * (ID_BYTES + w)
    if p != end:
        raise ProtocolError("truncated snapshot record body")
    counts = np.asarray(counts, dtype=np.int64)
    offsets = np.zeros(counts.size + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    if offsets[-1] == 0:
        return offsets, np.zeros(0, np.int32), np.zeros(0, vdt.newbyteorder("="))
    raw = np.frombuffer(buf, dtype=np.uint8)
    tag = _byte_regions(counts, w)
    ids = raw[tag == 1].view("<u4").astype(np.int32)
    vals = raw[tag == 2].view(vdt).astype(vdt.newbyteorder("="))
    return offsets, ids, vals


def encode_dense(values: np.ndarray, dtype=np.float32) -> bytes:
    return np.ascontiguousarray(values, dtype=value_dtype(dtype)).tobytes()


def decode_dense(buf: bytes, n_samples: int, local_count: int, dtype=np.float32) -> np.ndarray:
    vdt = value_dtype(dtype)
    arr = np.frombuffer(buf, dtype=vdt).astype(vdt.newbyteorder("="))
    if arr.size != n_samples * local_count:
        raise ProtocolError(f"dense snapshot has {arr.size} values, expected "
                            f"{n_samples} x {local_count}")
    return arr.reshape(n_samples, local_count)


def merge_shards(parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]], width: int,
                 dtype) -> LayerSnapshot:
    """Concatenate per-rank ``(offsets, ids, values)`` sample by sample.

    Ranks own ascending contiguous ranges, so rank-order concatenation keeps
    ids sorted within every sample.
    """
    if len(parts) == 1:
        off, rid, rval = parts[0]
        return LayerSnapshot(off, rid, np.asarray(rval, dtype=dtype), width,
                             np.diff(off)[None, :])
    n = max((p[0].shape[0] - 1 for p in parts), default=0)
    counts = np.zeros((len(parts), n), dtype=np.int64)
    for r, (off, _, _) in enumerate(parts):
        c = np.diff(off)
        if c.size not in (0, n):
            raise ProtocolError(f"rank {r} sent {c.size} samples, expected {n}", r)
        counts[r, :c.size] = c
    total = counts.sum(axis=0)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(total, out=offsets[1:])
    m = int(offsets[-1])
    ids = np.empty(m, dtype=np.int32)
    vals = np.empty(m, dtype=dtype)
    before = np.zeros(n, dtype=np.int64)
    for r, (off, rid, rval) in enumerate(parts):
        k = rid.shape[0]
        if k:
            seg = np.repeat(np.arange(n), counts[r])
            dest = offsets[seg] + before[seg] + (np.arange(k) - off[seg])
            ids[dest] = rid
            vals[dest] = rval
        before += counts[r]
    return LayerSnapshot(offsets, ids, vals, width, counts)


def snapshot_sync(endpoint: Endpoint, partial: LayerSnapshot, *, width: int,
                  ranges: list[tuple[int, int]] | None = None, values: str = "activations",
                  phase=Phase.FORWARD_GATHER, layer: int | None = None,
                  dtype=np.float32) -> LayerSnapshot:
    """All-gather one layer's per-shard snapshot and merge it on every node.

    ``values`` selects which field travels (``"activations"`` or ``"errors"``).
    Dense snapshots use the dense layout and need the shard ``ranges``.
    """
    vec = partial.activations if values == "activations" else partial.errors
    kind = PayloadKind.ACTIVATIONS if values == "activations" else PayloadKind.ERRORS
    n = partial.n_samples
    if partial.dense:
        if ranges is None:
            raise ValueError("dense snapshot sync needs the shard ranges")
        blobs = endpoint.all_gather_var(encode_dense(vec, dtype), phase=phase, kind=kind,
                                        layer=layer)
        blocks = [decode_dense(blob, n, hi - lo, dtype) for blob, (lo, hi) in zip(blobs, ranges)]
        # ranks own ascending contiguous ranges, so the merge is a column concat
        full = np.concatenate(blocks, axis=1) if len(blocks) > 1 else blocks[0]
        cols = np.concatenate([np.arange(lo, hi, dtype=np.int32) for lo, hi in ranges])
        c = cols.size
        counts = np.array([[hi - lo] * n for lo, hi in ranges], dtype=np.int64).reshape(-1, n)
        merged = LayerSnapshot(np.arange(n + 1, dtype=np.int64) * c, np.tile(cols, n),
                               np.ascontiguousarray(full, dtype=vec.dtype).reshape(-1), width,
                               counts, dense=True)
    else:
        blob = encode_sparse(partial.offsets, partial.ids, vec, dtype)
        blobs = endpoint.all_gather_var(blob, phase=phase, kind=kind, layer=layer)
        parts = []
        for r, b in enumerate(blobs):
            off, rid, rval = decode_sparse(b, dtype)
            if off.shape[0] - 1 == 0 and n:
                off = np.zeros(n + 1, dtype=np.int64)
            parts.append((off, rid, rval))
        merged = merge_shards(parts, width, vec.dtype)
    if values == "errors":
        merged.errors = merged.activations
    return merged
