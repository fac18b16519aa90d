"""Deterministic in-process cluster: one thread per node, shared rendezvous.

Results never depend on thread timing: gathers are ordered by rank and
reductions accumulate in rank order. ``scheduler_seed`` perturbs the order
in which waiting nodes are released (a seeded jitter), which exercises
timing without changing outputs.
"""
from __future__ import annotations

import threading
import time

import numpy as np

from .base import DEFAULT_TIMEOUT, Endpoint, ProtocolError, TransportError, reduce_rank_order


class _Slot:
    __slots__ = ("op", "parts", "clocks", "arrived", "departed", "result", "error")

    def __init__(self, op: str, n: int):
        self.op = op
        self.parts = [None] * n
        self.clocks = [0] * n
        self.arrived = 0
        self.departed = 0
        self.result = None
        self.error: Exception | None = None


class LoopbackCluster:
    def __init__(self, n: int, scheduler_seed: int = 0, jitter: float = 0.0,
                 timeout: float = DEFAULT_TIMEOUT):
        if n < 1:
            raise ValueError("cluster needs at least one node")
        self.n = n
        self.scheduler_seed = scheduler_seed
        self.jitter = jitter
        self.timeout = timeout
        self._cond = threading.Condition()
        self._slots: dict[int, _Slot] = {}
        self.endpoints = [LoopbackEndpoint(self, r) for r in range(n)]

    def _collect(self, ep: "LoopbackEndpoint", seq: int, op: str, part):
        ep.clock += 1
        with self._cond:
            slot = self._slots.get(seq)
            if slot is None:
                slot = self._slots[seq] = _Slot(op, self.n)
            if slot.op != op:
                slot.error = ProtocolError(
                    f"collective #{seq}: rank {ep.rank} called {op}, others called {slot.op}",
                    ep.rank)
                self._cond.notify_all()
            slot.parts[ep.rank] = part
            slot.clocks[ep.rank] = ep.clock
            slot.arrived += 1
            if slot.arrived == self.n and slot.error is None:
                try:
                    slot.result = self._combine(op, slot.parts)
                except ProtocolError as exc:
                    slot.error = exc
                self._cond.notify_all()
            deadline = time.monotonic() + self.timeout
            while slot.result is None and slot.error is None:
                left = deadline - time.monotonic()
                if left <= 0:
                    missing = [r for r in range(self.n) if slot.parts[r] is None]
                    slot.error = TransportError(
                        f"collective #{seq} timed out waiting for rank(s) {missing}",
                        missing[0] if missing else None)
                    self._cond.notify_all()
                    break
                self._cond.wait(left)
            ep.clock = max(slot.clocks) + 1
            slot.departed += 1
            if slot.departed == self.n or slot.error is not None and slot.departed >= slot.arrived:
                self._slots.pop(seq, None)
        if self.jitter:
            rng = np.random.default_rng([self.scheduler_seed, seq, ep.rank])
            time.sleep(float(rng.random()) * self.jitter)
        if slot.error is not None:
            raise slot.error
        return slot.result

    @staticmethod
    def _combine(op: str, parts):
        if op == "gather" or op == "barrier":
            return list(parts)
        vecs = parts
        n0, d0 = vecs[0].shape, vecs[0].dtype
        for r, v in enumerate(vecs):
            if v.shape != n0 or v.dtype != d0:
                raise ProtocolError(
                    f"all_reduce_sum: rank {r} supplied {v.shape[0]} x {v.dtype}, "
                    f"rank 0 supplied {n0[0]} x {d0}", r)
        return reduce_rank_order(vecs)

    def run(self, fn, *args, **kwargs) -> list:
        """Call ``fn(endpoint, *args)`` on every node in its own thread."""
        results = [None] * self.n
        errors: list[BaseException | None] = [None] * self.n

        def work(r):
            try:
                results[r] = fn(self.endpoints[r], *args, **kwargs)
            except BaseException as exc:  # noqa: BLE001
                errors[r] = exc

        threads = [threading.Thread(target=work, args=(r,), name=f"node-{r}", daemon=True)
                   for r in range(self.n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for exc in errors:
            if exc is not None:
                raise exc
        return results

    def weight_bytes(self) -> int:
        return sum(ep.stats.by_kind.get("weights", 0) for ep in self.endpoints)


class LoopbackEndpoint(Endpoint):
    def __init__(self, cluster: LoopbackCluster, rank: int):
        super().__init__(rank, cluster.n, cluster.timeout)
        self.cluster = cluster
        self.clock = 0

    def _gather(self, seq, payload):
        return self.cluster._collect(self, seq, "gather", payload)

    def _reduce(self, seq, vec):
        return np.array(self.cluster._collect(self, seq, "reduce", vec), copy=True)

    def _barrier(self, seq):
        self.cluster._collect(self, seq, "barrier", b"")
