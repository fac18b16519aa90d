"""Per-shard binary checkpoints plus a JSON manifest.

Shard file layout (little-endian):

    header  magic "HSCK" | u16 version | u8 dtype | u8 activation
            | u32 layer | u32 in_dim | u32 out_dim | u32 shard_id
            | u32 global_offset | u32 local_count | u64 step | f64 sparsity
            | u32 crc32(body)
    body    W | b | m_W | v_W | m_b | v_b

Arrays are written raw, so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .layer import Activation, NeuronShard

MAGIC = b"HSCK"
VERSION = 1
MANIFEST = "manifest.json"
_HEADER = struct.Struct("<4sHBBIIIIIIQdI")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_ACTS = {1: Activation.RELU, 2: Activation.SOFTMAX}
_ACT_CODES = {v: k for k, v in _ACTS.items()}


class CheckpointError(ValueError):
    pass


def shard_filename(layer: int, rank: int) -> str:
    return f"layer{layer:03d}_shard{rank:04d}.bin"


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_shard(path: str | Path, shard: NeuronShard, *, layer: int, out_dim: int,
               activation: Activation, sparsity: float):
    code = _DTYPE_CODES[np.dtype(shard.dtype)]
    le = _DTYPES[code]
    body = b"".join(np.ascontiguousarray(a, dtype=le).tobytes() for a in shard.state_arrays())
    header = _HEADER.pack(MAGIC, VERSION, code, _ACT_CODES[Activation(activation)], layer,
                          shard.in_dim, out_dim, shard.shard_id, shard.global_offset,
                          shard.local_count, shard.step, float(sparsity), zlib.crc32(body))
    _atomic_write(Path(path), header + body)


def load_shard(path: str | Path) -> tuple[NeuronShard, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    (magic, version, code, act, layer, in_dim, out_dim, shard_id, offset, count, step,
     sparsity, crc) = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if code not in _DTYPES or act not in _ACTS:
        raise CheckpointError(f"{path}: bad dtype or activation code")
    body = raw[_HEADER.size:]
    dt = _DTYPES[code]
    n_w, n_b = count * in_dim, count
    if len(body) != (3 * n_w + 3 * n_b) * dt.itemsize:
        raise CheckpointError(f"{path}: body is {len(body)} bytes, header disagrees")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    arrs, pos = [], 0
    for size, shape in ((n_w, (count, in_dim)), (n_b, (count,)), (n_w, (count, in_dim)),
                        (n_w, (count, in_dim)), (n_b, (count,)), (n_b, (count,))):
        a = np.frombuffer(body, dtype=dt, count=size, offset=pos)
        arrs.append(a.astype(dt.newbyteorder("="), copy=True).reshape(shape))
        pos += size * dt.itemsize
    shard = NeuronShard(shard_id, offset, arrs[0], arrs[1], step=step, adam_m_w=arrs[2],
                        adam_v_w=arrs[3], adam_m_b=arrs[4], adam_v_b=arrs[5])
    meta = {"layer": layer, "in_dim": in_dim, "out_dim": out_dim, "activation": _ACTS[act],
            "sparsity": sparsity, "step": step}
    return shard, meta


def save_node(directory, network, cfg, plan, rank: int, shards: list[NeuronShard], *,
              epoch: int, batches_done: int, rebuilds: int, regen: list[int]):
    """Write one node's shards; rank 0 also writes the manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, (spec, shard) in enumerate(zip(network.layers, shards)):
        save_shard(d / shard_filename(k, rank), shard, layer=k, out_dim=spec.out_dim,
                   activation=spec.activation, sparsity=spec.sparsity)
    if rank != 0:
        return
    manifest = {
        "format": "hashshard-checkpoint", "version": VERSION,
        "network": network.to_dict(), "training": cfg.to_dict(),
        "nodes": len(plan.layers[0]),
        "shards": [[{"node": r, "range": list(rng), "file": shard_filename(k, r)}
                    for r, rng in layer] for k, layer in enumerate(plan.layers)],
        "epoch": epoch, "batches_done": batches_done, "rebuilds": rebuilds,
        "regen": list(regen),
    }
    _atomic_write(d / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True).encode())


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    try:
        m = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: missing manifest") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    if m.get("format") != "hashshard-checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint manifest")
    return m


def load_layer(directory, manifest: dict, layer: int) -> list[NeuronShard]:
    """All shards of one layer in node order."""
    out = []
    for ent in manifest["shards"][layer]:
        shard, meta = load_shard(Path(directory) / ent["file"])
        if list(shard.global_range) != list(ent["range"]) or meta["layer"] != layer:
            raise CheckpointError(f"{ent['file']}: shard does not match the manifest")
        out.append(shard)
    return out


def merged_shard_for(directory, manifest: dict, layer: int, lo: int, hi: int,
                     shard_id: int) -> NeuronShard:
    """Re-slice a saved layer to ``[lo, hi)`` (loading on a different node count)."""
    parts = load_layer(directory, manifest, layer)
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    W, b = cat("weights"), cat("biases")
    mw, vw, mb, vb = cat("adam_m_w"), cat("adam_v_w"), cat("adam_m_b"), cat("adam_v_b")
    return NeuronShard(shard_id, lo, W[lo:hi], b[lo:hi], step=parts[0].step,
                       adam_m_w=mw[lo:hi], adam_v_w=vw[lo:hi], adam_m_b=mb[lo:hi],
                       adam_v_b=vb[lo:hi])
