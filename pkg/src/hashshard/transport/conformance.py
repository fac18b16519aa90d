"""Recorded collective scripts replayed against any transport.

A script is a seeded list of calls; each rank derives its own buffers from
``(seed, call index, rank)``, so every transport sees identical inputs. The
replay returns a digest per call plus the final counters, which must match
between implementations.
"""
from __future__ import annotations

import hashlib
import multiprocessing as mp

import numpy as np

from ..layer import LayerSnapshot
from .base import Endpoint, Phase
from .wire import snapshot_sync

OPS = ("gather", "reduce", "barrier", "snapshot")


def make_script(seed: int, n_calls: int = 50) -> list[dict]:
    rng = np.random.default_rng(seed)
    script = []
    for i in range(n_calls):
        op = OPS[int(rng.integers(len(OPS)))]
        call = {"op": op, "seed": int(rng.integers(2 ** 31))}
        if op == "reduce":
            call["length"] = int(rng.integers(0, 200))
            call["dtype"] = "float32" if rng.random() < 0.7 else "float64"
        elif op == "snapshot":
            call["samples"] = int(rng.integers(1, 12))
            call["width"] = int(rng.integers(8, 64))
        script.append(call)
    return script


def _ranges(width: int, n: int):
    from ..engine import partition_layer
    return partition_layer(width, n)


def _payload(call: dict, rank: int, n: int):
    rng = np.random.default_rng([call["seed"], rank])
    op = call["op"]
    if op == "gather":
        return rng.integers(0, 256, size=int(rng.integers(0, 64)), dtype=np.uint8).tobytes()
    if op == "reduce":
        return rng.standard_normal(call["length"]).astype(call["dtype"])
    if op == "snapshot":
        lo, hi = _ranges(call["width"], n)[rank]
        b = call["samples"]
        counts = rng.integers(0, hi - lo + 1, size=b)
        offsets = np.zeros(b + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        ids = np.concatenate([np.sort(rng.choice(np.arange(lo, hi), size=c, replace=False))
                              for c in counts]).astype(np.int32) if counts.sum() else \
            np.zeros(0, np.int32)
        vals = rng.standard_normal(ids.size).astype(np.float32)
        return LayerSnapshot(offsets, ids, vals, call["width"], counts[None, :])
    return None


def _digest(obj) -> str:
    h = hashlib.sha256()
    if isinstance(obj, LayerSnapshot):
        for a in (obj.offsets, obj.ids, obj.activations, obj.shard_counts):
            h.update(np.ascontiguousarray(a).tobytes())
    elif isinstance(obj, np.ndarray):
        h.update(obj.dtype.str.encode())
        h.update(obj.tobytes())
    elif isinstance(obj, list):
        for part in obj:
            h.update(len(part).to_bytes(8, "little"))
            h.update(part)
    else:
        h.update(repr(obj).encode())
    return h.hexdigest()


def run_script(endpoint: Endpoint, script: list[dict]) -> dict:
    n = endpoint.size
    digests = []
    for call in script:
        part = _payload(call, endpoint.rank, n)
        op = call["op"]
        if op == "gather":
            out = endpoint.all_gather_var(part)
        elif op == "reduce":
            out = endpoint.all_reduce_sum(part, phase=Phase.GRAD_REDUCE)
        elif op == "barrier":
            endpoint.barrier()
            out = None
        else:
            out = snapshot_sync(endpoint, part, width=call["width"], layer=0)
        digests.append(_digest(out))
    return {"rank": endpoint.rank, "digests": digests, "stats": endpoint.stats.snapshot()}


def run_loopback(script: list[dict], n: int = 2, scheduler_seed: int = 0) -> list[dict]:
    from .loopback import LoopbackCluster
    return LoopbackCluster(n, scheduler_seed=scheduler_seed).run(run_script, script)


def _tcp_worker(rank: int, addresses, script, queue, timeout):
    from .tcp import TcpEndpoint
    try:
        ep = TcpEndpoint(rank, addresses, timeout=timeout)
        try:
            queue.put(run_script(ep, script))
        finally:
            ep.close()
    except Exception as exc:  # noqa: BLE001
        queue.put({"rank": rank, "error": repr(exc)})


def run_tcp_processes(script: list[dict], n: int = 2, timeout: float = 30.0) -> list[dict]:
    """Replay ``script`` over TCP with one OS process per rank on localhost."""
    from .tcp import free_ports
    ports = free_ports(n)
    addresses = [("127.0.0.1", p) for p in ports]
    ctx = mp.get_context("spawn")
    queue = ctx.Queue()
    procs = [ctx.Process(target=_tcp_worker, args=(r, addresses, script, queue, timeout))
             for r in range(n)]
    for p in procs:
        p.start()
    results = [queue.get(timeout=timeout * 4) for _ in range(n)]
    for p in procs:
        p.join(timeout)
    results.sort(key=lambda d: d["rank"])
    for res in results:
        if "error" in res:
            raise RuntimeError(f"rank {res['rank']} failed: {res['error']}")
    return results
