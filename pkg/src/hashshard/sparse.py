"""Sparse vectors, labelled records and packed batches.

Everything here is immutable after construction. ``PackedRows`` is the
row-compressed layout (offsets / indices / values) that the kernels consume;
it is what a batch of sparse inputs or a gathered layer snapshot looks like
in memory.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class InputError(ValueError):
    """Raised when caller-supplied data violates an operation's contract."""


@dataclass(frozen=True)
class SparseVector:
    indices: np.ndarray
    values: np.ndarray
    dim: int

    def __init__(self, indices, values, dim: int, *, check: bool = True):
        idx = np.ascontiguousarray(indices, dtype=np.int64)
        val = np.ascontiguousarray(values, dtype=np.float64)
        idx.setflags(write=False)
        val.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)
        object.__setattr__(self, "dim", int(dim))
        if check:
            v = sparse_vector_violation(self)
            if v is not None:
                raise InputError(str(v))

    @classmethod
    def from_dense(cls, dense) -> "SparseVector":
        dense = np.asarray(dense, dtype=np.float64)
        nz = np.flatnonzero(dense)
        return cls(nz, dense[nz], dense.shape[0])

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        out = np.zeros(self.dim, dtype=dtype)
        out[self.indices] = self.values
        return out

    def scale(self, c: float) -> "SparseVector":
        return SparseVector(self.indices, self.values * c, self.dim, check=False)

    def __eq__(self, other):
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (self.dim == other.dim
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.dim, self.indices.tobytes(), self.values.tobytes()))


@dataclass(frozen=True)
class DataRecord:
    features: SparseVector
    labels: tuple[int, ...]

    def __init__(self, features: SparseVector, labels: Sequence[int]):
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", tuple(int(x) for x in labels))


@dataclass(frozen=True)
class Batch:
    records: tuple[DataRecord, ...]
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise InputError("batch size must be >= 1")
        if not 1 <= len(self.records) <= self.size:
            raise InputError(
                f"batch holds {len(self.records)} records, capacity {self.size}")

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class Violation:
    """A structured description of the first broken invariant in a record."""

    invariant: str
    position: int | None = None
    detail: str = ""

    def __str__(self):
        where = "" if self.position is None else f" at position {self.position}"
        tail = f": {self.detail}" if self.detail else ""
        return f"{self.invariant}{where}{tail}"


def sparse_vector_violation(v: SparseVector) -> Violation | None:
    idx, val = v.indices, v.values
    if idx.ndim != 1 or val.ndim != 1 or idx.shape[0] != val.shape[0]:
        return Violation("indices and values length mismatch",
                         detail=f"{idx.shape} vs {val.shape}")
    if v.dim < 0:
        return Violation("dim is negative", detail=str(v.dim))
    if idx.shape[0] == 0:
        return None
    if idx[0] < 0:
        return Violation("index is negative", 0)
    steps = np.diff(idx)
    bad = np.flatnonzero(steps <= 0)
    if bad.size:
        return Violation("indices not strictly increasing", int(bad[0]) + 1,
                         f"index {int(idx[bad[0] + 1])} follows {int(idx[bad[0]])}")
    if idx[-1] >= v.dim:
        pos = int(np.flatnonzero(idx >= v.dim)[0])
        return Violation("index out of range", pos, f"{int(idx[pos])} >= dim {v.dim}")
    return None


def validate_record(r: DataRecord, feature_dim: int, label_dim: int,
                    *, require_labels: bool = True) -> Violation | None:
    """Return ``None`` when ``r`` is well formed, else the first violation."""
    v = sparse_vector_violation(r.features)
    if v is not None:
        return v
    if r.features.dim != feature_dim:
        return Violation("feature dim mismatch",
                         detail=f"{r.features.dim} != {feature_dim}")
    if require_labels and not r.labels:
        return Violation("labels empty")
    for pos, lab in enumerate(r.labels):
        if lab < 0 or lab >= label_dim:
            return Violation("label out of range", pos, f"{lab} not in [0, {label_dim})")
    return None


def sparse_dot(a: SparseVector, b) -> float:
    b = np.asarray(b)
    if b.ndim != 1 or b.shape[0] != a.dim:
        raise InputError(f"dimension mismatch: sparse dim {a.dim}, dense length {b.shape}")
    acc = 0.0
    for i, x in zip(a.indices.tolist(), a.values.tolist()):
        acc += x * float(b[i])
    return acc


@dataclass(frozen=True)
class PackedRows:
    """Row-compressed collection of sparse rows sharing one dimension.

    ``offsets`` has ``n_rows + 1`` entries; row ``s`` owns
    ``indices[offsets[s]:offsets[s+1]]`` (sorted) and the matching values.
    """

    offsets: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    dim: int
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def n_rows(self) -> int:
        return int(self.offsets.shape[0] - 1)

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def row(self, s: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.offsets[s], self.offsets[s + 1]
        return self.indices[lo:hi], self.values[lo:hi]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def sparse_vector(self, s: int) -> SparseVector:
        i, v = self.row(s)
        return SparseVector(i, v, self.dim, check=False)

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        out = np.zeros((self.n_rows, self.dim), dtype=dtype)
        rows = np.repeat(np.arange(self.n_rows), self.counts())
        out[rows, self.indices] = self.values
        return out

    def to_scipy(self):
        from scipy.sparse import csr_matrix
        return csr_matrix((self.values, self.indices, self.offsets),
                          shape=(self.n_rows, self.dim))

    @classmethod
    def from_vectors(cls, vectors: Sequence[SparseVector], dim: int | None = None,
                     dtype=np.float32) -> "PackedRows":
        if dim is None:
            dim = vectors[0].dim if vectors else 0
        counts = np.fromiter((v.nnz for v in vectors), dtype=np.int64, count=len(vectors))
        offsets = np.zeros(len(vectors) + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        if vectors:
            idx = np.concatenate([v.indices for v in vectors]).astype(np.int32)
            val = np.concatenate([v.values for v in vectors]).astype(dtype)
        else:
            idx = np.zeros(0, np.int32)
            val = np.zeros(0, dtype)
        return cls(offsets, idx, val, int(dim))

    @classmethod
    def from_dense(cls, dense: np.ndarray, dtype=None) -> "PackedRows":
        """Pack every entry of a dense matrix (zeros included) as a present entry."""
        dense = np.asarray(dense)
        n, d = dense.shape
        offsets = np.arange(n + 1, dtype=np.int64) * d
        idx = np.tile(np.arange(d, dtype=np.int32), n)
        val = np.ascontiguousarray(dense.reshape(-1), dtype=dtype or dense.dtype)
        return cls(offsets, idx, val, d)

    def is_full(self) -> bool:
        """True when every row holds every coordinate."""
        return self.nnz == self.n_rows * self.dim
