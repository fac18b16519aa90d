"""Collective endpoint contract and logical byte accounting.

Byte counters record logical payload, independent of how an implementation
routes messages: for an all-gather a node "sends" its own buffer and
"receives" everyone else's; for an all-reduce it sends its vector and
receives the reduced vector. ``payload`` is the cluster-wide logical volume
of a collective (sum of every rank's contribution) and is therefore the same
number on every node.
"""
from __future__ import annotations

import enum
import json
import threading
from collections import defaultdict

import numpy as np

DEFAULT_TIMEOUT = 30.0


class TransportError(RuntimeError):
    """A peer disconnected or a collective timed out."""

    def __init__(self, message: str, rank: int | None = None):
        super().__init__(message)
        self.rank = rank


class ProtocolError(RuntimeError):
    """Peers disagreed on the collective call sequence or on buffer shapes."""

    def __init__(self, message: str, rank: int | None = None):
        super().__init__(message)
        self.rank = rank


class Phase(str, enum.Enum):
    FORWARD_GATHER = "forward_gather"
    ERROR_SYNC = "error_sync"
    GRAD_REDUCE = "grad_reduce"
    EVAL = "eval"
    OTHER = "other"


class PayloadKind(str, enum.Enum):
    """Type tag of what a payload carries; used by the weight-locality audit."""

    ACTIVATIONS = "activations"
    ERRORS = "errors"
    INPUT_ERRORS = "input_errors"
    WEIGHTS = "weights"
    CONTROL = "control"
    RAW = "raw"


class CommStats:
    """Monotone traffic counters, safe to read while collectives run."""

    def __init__(self):
        self._lock = threading.Lock()
        self.bytes_sent = 0
        self.bytes_received = 0
        self.collective_calls = 0
        self.by_phase: dict[str, dict[str, int]] = defaultdict(
            lambda: {"sent": 0, "received": 0, "payload": 0, "calls": 0})
        self.by_layer: dict[str, dict[str, int]] = defaultdict(
            lambda: {"sent": 0, "received": 0, "payload": 0, "calls": 0})
        self.by_kind: dict[str, int] = defaultdict(int)

    def record(self, sent: int, received: int, payload: int, phase: Phase | str,
               kind: PayloadKind | str, layer: int | None = None):
        phase = Phase(phase).value
        kind = PayloadKind(kind).value
        with self._lock:
            self.bytes_sent += sent
            self.bytes_received += received
            self.collective_calls += 1
            for d in [self.by_phase[phase]] + (
                    [self.by_layer[f"{phase}/{layer}"]] if layer is not None else []):
                d["sent"] += sent
                d["received"] += received
                d["payload"] += payload
                d["calls"] += 1
            self.by_kind[kind] += sent

    def phase_payload(self, phase: Phase | str, layer: int | None = None) -> int:
        key = Phase(phase).value
        with self._lock:
            if layer is None:
                return self.by_phase[key]["payload"] if key in self.by_phase else 0
            k = f"{key}/{layer}"
            return self.by_layer[k]["payload"] if k in self.by_layer else 0

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "bytes_sent": self.bytes_sent,
                "bytes_received": self.bytes_received,
                "collective_calls": self.collective_calls,
                "by_phase": {k: dict(v) for k, v in sorted(self.by_phase.items())},
                "by_layer": {k: dict(v) for k, v in sorted(self.by_layer.items())},
                "by_kind": dict(sorted(self.by_kind.items())),
            }

    def to_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True)

    def diff(self, before: dict) -> dict:
        """Counters accumulated since ``before`` (a previous ``snapshot()``)."""
        now = self.snapshot()
        out = {k: now[k] - before.get(k, 0)
               for k in ("bytes_sent", "bytes_received", "collective_calls")}
        for group in ("by_phase", "by_layer"):
            out[group] = {}
            for key, d in now[group].items():
                prev = before.get(group, {}).get(key, {})
                delta = {f: d[f] - prev.get(f, 0) for f in d}
                if any(delta.values()):
                    out[group][key] = delta
        out["by_kind"] = {k: v - before.get("by_kind", {}).get(k, 0)
                          for k, v in now["by_kind"].items()
                          if v - before.get("by_kind", {}).get(k, 0)}
        return out


def encode_vector(vec: np.ndarray) -> bytes:
    vec = np.asarray(vec)
    if vec.dtype == np.float32:
        code = b"f"
    elif vec.dtype == np.float64:
        code = b"d"
    else:
        raise ProtocolError(f"unsupported reduce dtype {vec.dtype}")
    return code + np.ascontiguousarray(vec, dtype=vec.dtype.newbyteorder("<")).tobytes()


def decode_vector(buf: bytes) -> np.ndarray:
    code = bytes(buf[:1])
    if code == b"f":
        return np.frombuffer(buf, dtype="<f4", offset=1).astype(np.float32)
    if code == b"d":
        return np.frombuffer(buf, dtype="<f8", offset=1).astype(np.float64)
    raise ProtocolError(f"bad reduce dtype code {code!r}")


def reduce_rank_order(vectors: list[np.ndarray]) -> np.ndarray:
    """Element-wise sum accumulated strictly in rank order 0..n-1."""
    acc = np.array(vectors[0], copy=True)
    for v in vectors[1:]:
        acc += v
    return acc


class Endpoint:
    """A node's handle to the cluster.

    Subclasses implement ``_gather``, ``_reduce`` and ``_barrier``; this class
    owns sequence numbering, the one-collective-in-flight rule and the
    counters.
    """

    def __init__(self, rank: int, size: int, timeout: float = DEFAULT_TIMEOUT):
        if not 0 <= rank < size:
            raise ValueError(f"rank {rank} outside [0, {size})")
        self.rank = rank
        self.size = size
        self.timeout = timeout
        self.stats = CommStats()
        self._seq = 0
        self._busy = threading.Lock()

    def _enter(self) -> int:
        if not self._busy.acquire(blocking=False):
            raise ProtocolError("concurrent collective on one endpoint", self.rank)
        seq = self._seq
        self._seq += 1
        return seq

    def _leave(self):
        self._busy.release()

    def all_gather_var(self, payload: bytes, *, phase=Phase.OTHER, kind=PayloadKind.RAW,
                       layer: int | None = None) -> list[bytes]:
        payload = bytes(payload)
        seq = self._enter()
        try:
            parts = self._gather(seq, payload)
        finally:
            self._leave()
        total = sum(len(p) for p in parts)
        self.stats.record(len(payload), total - len(payload), total, phase, kind, layer)
        return parts

    def all_reduce_sum(self, vec, *, phase=Phase.OTHER, kind=PayloadKind.RAW,
                       layer: int | None = None) -> np.ndarray:
        vec = np.ascontiguousarray(vec)
        if vec.dtype not in (np.float32, np.float64):
            vec = vec.astype(np.float64)
        seq = self._enter()
        try:
            out = self._reduce(seq, vec)
        finally:
            self._leave()
        self.stats.record(vec.nbytes, out.nbytes, vec.nbytes * self.size, phase, kind, layer)
        return out

    def barrier(self):
        seq = self._enter()
        try:
            self._barrier(seq)
        finally:
            self._leave()
        self.stats.record(0, 0, 0, Phase.OTHER, PayloadKind.CONTROL)

    def close(self):
        pass

    def _gather(self, seq: int, payload: bytes) -> list[bytes]:
        raise NotImplementedError

    def _reduce(self, seq: int, vec: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _barrier(self, seq: int):
        raise NotImplementedError
