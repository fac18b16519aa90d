"""Hash families, per-shard LSH indices and budgeted neuron selection.

Two families are provided: signed sparse random projections (SRP) and
densified winner-take-all (DWTA). An ``LshIndex`` covers only the neurons of
one shard; selection unions the matching buckets across tables, trims with
reservoir sampling when over budget, and optionally tops up with uniformly
drawn non-candidates when under budget.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .kernels import K
from .sparse import InputError, PackedRows, SparseVector


class HashFamily(str, enum.Enum):
    SRP = "SRP"
    DWTA = "DWTA"


class FillPolicy(str, enum.Enum):
    UNIFORM_FILL = "UNIFORM_FILL"
    STOP_EARLY = "STOP_EARLY"


DEFAULT_HASHES = {HashFamily.SRP: 9, HashFamily.DWTA: 6}
DEFAULT_TABLES = 8
DEFAULT_BIN_SIZE = 8


@dataclass(frozen=True)
class LshConfig:
    family: HashFamily = HashFamily.SRP
    hashes_per_table: int | None = None
    num_tables: int = DEFAULT_TABLES
    bin_size: int = DEFAULT_BIN_SIZE
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", HashFamily(self.family))
        if self.hashes_per_table is None:
            object.__setattr__(self, "hashes_per_table", DEFAULT_HASHES[self.family])
        if self.hashes_per_table < 1 or self.num_tables < 1:
            raise InputError("hashes_per_table and num_tables must be >= 1")
        if self.family is HashFamily.DWTA:
            if self.bin_size < 2:
                raise InputError("DWTA bin_size must be >= 2")
        if self.code_width > 32:
            raise InputError(f"bucket id needs {self.code_width} bits, limit is 32")

    @property
    def bits_per_hash(self) -> int:
        if self.family is HashFamily.SRP:
            return 1
        # one extra code point for the empty-window sentinel
        return max(1, math.ceil(math.log2(self.bin_size + 1)))

    @property
    def code_width(self) -> int:
        return self.hashes_per_table * self.bits_per_hash

    @property
    def n_functions(self) -> int:
        return self.hashes_per_table * self.num_tables

    def to_dict(self) -> dict:
        return {"family": self.family.value, "hashes_per_table": self.hashes_per_table,
                "num_tables": self.num_tables, "bin_size": self.bin_size, "seed": self.seed}


def _rng(*words: int) -> np.random.Generator:
    return np.random.default_rng([int(w) & 0xFFFFFFFFFFFFFFFF for w in words])


@dataclass(frozen=True)
class SrpFamily:
    """``L_t * K_h`` ternary planes over the key dimension, row-major by table."""

    config: LshConfig
    dim: int
    planes: np.ndarray  # int8, (n_functions, dim)

    @classmethod
    def generate(cls, config: LshConfig, dim: int, seed: int | None = None) -> "SrpFamily":
        rng = _rng(config.seed if seed is None else seed, dim, 1)
        planes = rng.choice(np.array([-1, 0, 1], dtype=np.int8),
                            size=(config.n_functions, dim), p=[1 / 6, 2 / 3, 1 / 6])
        return cls(config, dim, np.ascontiguousarray(planes))

    def hash_rows(self, keys: PackedRows) -> np.ndarray:
        _check_dim(keys.dim, self.dim)
        return K.srp_hash(keys.offsets, keys.indices, keys.values, self.planes,
                          self.config.hashes_per_table, self.config.num_tables)


@dataclass(frozen=True)
class DwtaFamily:
    """``L_t * K_h`` coordinate windows of ``bin_size`` entries each.

    Windows are consecutive chunks of a stream of random permutations, so
    every coordinate is covered before any is repeated.
    """

    config: LshConfig
    dim: int
    windows: np.ndarray  # int32, (n_functions, bin_size)

    @classmethod
    def generate(cls, config: LshConfig, dim: int, seed: int | None = None) -> "DwtaFamily":
        rng = _rng(config.seed if seed is None else seed, dim, 2)
        need = config.n_functions * config.bin_size
        chunks, have = [], 0
        while have < need:
            chunks.append(rng.permutation(max(dim, 1)).astype(np.int32))
            have += chunks[-1].size
        stream = np.concatenate(chunks)[:need]
        if dim == 0:
            stream[:] = 0
        return cls(config, dim, np.ascontiguousarray(stream.reshape(config.n_functions,
                                                                    config.bin_size)))

    @property
    def sentinel_code(self) -> int:
        code = 0
        for _ in range(self.config.hashes_per_table):
            code = (code << self.config.bits_per_hash) | self.config.bin_size
        return code

    def hash_rows(self, keys: PackedRows) -> np.ndarray:
        _check_dim(keys.dim, self.dim)
        c = self.config
        return K.dwta_hash(keys.offsets, keys.indices, keys.values, self.windows,
                           max(self.dim, 1), c.hashes_per_table, c.num_tables,
                           c.bin_size, c.bits_per_hash)


def _check_dim(got: int, want: int):
    if got != want:
        raise InputError(f"dimension mismatch: key dim {got}, family dim {want}")


def make_family(config: LshConfig, dim: int, seed: int | None = None):
    if config.family is HashFamily.SRP:
        return SrpFamily.generate(config, dim, seed)
    return DwtaFamily.generate(config, dim, seed)


def _single(key: SparseVector) -> PackedRows:
    return PackedRows(np.array([0, key.nnz], dtype=np.int64),
                      key.indices.astype(np.int32), key.values.astype(np.float64), key.dim)


def _table_arg(family, table: int):
    if not 0 <= table < family.config.num_tables:
        raise InputError(f"table {table} out of range [0, {family.config.num_tables})")


def srp_hash(family: SrpFamily, table: int, key: SparseVector) -> int:
    _table_arg(family, table)
    return int(family.hash_rows(_single(key))[0, table])


def dwta_hash(family: DwtaFamily, table: int, key: SparseVector) -> int:
    _table_arg(family, table)
    return int(family.hash_rows(_single(key))[0, table])


@dataclass(frozen=True)
class LshIndex:
    """Multi-table index over the neurons of one shard.

    Buckets are stored flat: table ``t`` owns ``bucket_keys[table_offsets[t]:
    table_offsets[t+1]]`` (sorted), and bucket ``q`` holds local ids
    ``ids[bucket_ptr[q]:bucket_ptr[q+1]]`` in ascending order.
    """

    config: LshConfig
    family: SrpFamily | DwtaFamily
    owner_shard: int
    size: int
    bucket_keys: np.ndarray
    table_offsets: np.ndarray
    bucket_ptr: np.ndarray
    ids: np.ndarray
    hash_seed: int = 0
    generation: int = 0
    _dict_cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def dim(self) -> int:
        return self.family.dim

    def table(self, t: int) -> dict[int, list[int]]:
        if t not in self._dict_cache:
            lo, hi = self.table_offsets[t], self.table_offsets[t + 1]
            self._dict_cache[t] = {
                int(self.bucket_keys[q]): self.ids[self.bucket_ptr[q]:self.bucket_ptr[q + 1]].tolist()
                for q in range(lo, hi)
            }
        return self._dict_cache[t]

    @property
    def tables(self) -> list[dict[int, list[int]]]:
        return [self.table(t) for t in range(self.config.num_tables)]

    def bucket_sizes(self, t: int) -> np.ndarray:
        lo, hi = self.table_offsets[t], self.table_offsets[t + 1]
        return np.diff(self.bucket_ptr[lo:hi + 1])

    def stats(self) -> list[dict]:
        out = []
        for t in range(self.config.num_tables):
            sizes = self.bucket_sizes(t)
            hist = np.bincount(sizes) if sizes.size else np.zeros(1, dtype=np.int64)
            code_space = 2 ** self.config.code_width
            out.append({
                "table": t,
                "nonempty_buckets": int(sizes.size),
                "max_bucket_size": int(sizes.max()) if sizes.size else 0,
                "neurons": int(sizes.sum()),
                # histogram[s] = number of buckets holding exactly s neurons (s >= 1)
                "occupancy_histogram": {str(s): int(c) for s, c in enumerate(hist) if s > 0 and c},
                "empty_bucket_fraction": 1.0 - sizes.size / code_space,
            })
        return out

    def same_tables(self, other: "LshIndex") -> bool:
        return (np.array_equal(self.bucket_keys, other.bucket_keys)
                and np.array_equal(self.table_offsets, other.table_offsets)
                and np.array_equal(self.bucket_ptr, other.bucket_ptr)
                and np.array_equal(self.ids, other.ids))


def _as_weight_rows(weights) -> PackedRows:
    if isinstance(weights, PackedRows):
        return weights
    if isinstance(weights, np.ndarray):
        w = weights
    else:
        rows = list(weights)
        dims = {len(r) for r in rows}
        if len(dims) > 1:
            raise InputError(f"weight vectors have differing dimensions {sorted(dims)}")
        w = np.asarray(rows, dtype=np.float64).reshape(len(rows), dims.pop() if dims else 0)
    if w.ndim != 2:
        raise InputError("weights must be a 2-D array of neuron rows")
    return PackedRows.from_dense(w)


def index_from_codes(codes: np.ndarray, family, owner: int, *, hash_seed: int = 0,
                     generation: int = 0) -> LshIndex:
    n, l_t = codes.shape
    keys, tb_off, ptrs, ids = [], [0], [], []
    base = 0
    for t in range(l_t):
        col = codes[:, t]
        order = np.argsort(col, kind="stable")
        sorted_codes = col[order]
        uniq, starts = np.unique(sorted_codes, return_index=True)
        keys.append(uniq)
        ptrs.append(starts + base)
        ids.append(order.astype(np.int32))
        base += n
        tb_off.append(tb_off[-1] + uniq.size)
    bucket_ptr = np.concatenate(ptrs + [np.array([base])]).astype(np.int64)
    return LshIndex(
        config=family.config, family=family, owner_shard=owner, size=n,
        bucket_keys=np.ascontiguousarray(np.concatenate(keys) if keys else np.zeros(0),
                                         dtype=np.uint32),
        table_offsets=np.asarray(tb_off, dtype=np.int64),
        bucket_ptr=bucket_ptr,
        ids=np.ascontiguousarray(np.concatenate(ids) if ids else np.zeros(0), dtype=np.int32),
        hash_seed=hash_seed, generation=generation,
    )


def build_index(weights, owner: int, cfg: LshConfig, *, family=None,
                hash_seed: int | None = None, generation: int = 0) -> LshIndex:
    """Hash every neuron weight row of a shard into ``cfg.num_tables`` tables."""
    rows = _as_weight_rows(weights)
    seed = cfg.seed if hash_seed is None else hash_seed
    if family is None:
        family = make_family(cfg, rows.dim, seed)
    codes = family.hash_rows(rows) if rows.n_rows else np.zeros((0, cfg.num_tables), np.uint32)
    return index_from_codes(codes, family, owner, hash_seed=seed, generation=generation)


def rebuild(index: LshIndex, weights, new_seed: int | None = None) -> LshIndex:
    """Re-index drifted weights; fresh hash functions only when ``new_seed`` is given."""
    rows = _as_weight_rows(weights)
    if rows.n_rows != index.size or (rows.n_rows and rows.dim != index.dim):
        raise InputError(f"weights shape ({rows.n_rows}, {rows.dim}) does not match "
                         f"index ({index.size}, {index.dim})")
    if new_seed is None:
        return build_index(rows, index.owner_shard, index.config, family=index.family,
                           hash_seed=index.hash_seed, generation=index.generation + 1)
    return build_index(rows, index.owner_shard, index.config, hash_seed=new_seed,
                       generation=index.generation + 1)


@dataclass(frozen=True)
class SelectionPolicy:
    budget: int
    fill: FillPolicy = FillPolicy.UNIFORM_FILL
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fill", FillPolicy(self.fill))
        if self.budget < 1:
            raise InputError("selection budget must be >= 1")

    def with_budget(self, budget: int) -> "SelectionPolicy":
        return replace(self, budget=budget)


def reservoir_sample(stream: Sequence, k: int, rng: np.random.Generator) -> list:
    """Classic one-pass reservoir sampling (Algorithm R).

    Each of the ``len(stream)`` items ends up in the result with probability
    ``k / len(stream)``. Draws one uniform per item past the first ``k``.
    """
    if k < 0:
        raise InputError("k must be >= 0")
    items = list(stream)
    if len(items) <= k:
        return items
    if k == 0:
        return []
    reservoir = items[:k]
    u = rng.random(len(items) - k)
    for q, j in enumerate(range(k, len(items))):
        r = min(int(u[q] * (j + 1)), j)
        if r < k:
            reservoir[r] = items[j]
    return reservoir


def select_batch(index: LshIndex, keys: PackedRows, budget: int, fill: FillPolicy,
                 rng: np.random.Generator, forced: tuple[np.ndarray, np.ndarray] | None = None,
                 codes: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Select active local neurons for every row of ``keys``.

    ``forced`` is an optional ``(offsets, local_ids)`` pair of neurons that
    must be active (label forcing); they count against the budget. Returns
    ``(offsets, local_ids)`` with ids sorted within each row.
    """
    n = keys.n_rows
    if codes is None:
        codes = index.family.hash_rows(keys) if n else np.zeros((0, index.config.num_tables),
                                                                 np.uint32)
    if forced is None:
        f_off = np.zeros(n + 1, dtype=np.int64)
        f_ids = np.zeros(0, dtype=np.int32)
    else:
        f_off = np.ascontiguousarray(forced[0], dtype=np.int64)
        f_ids = np.ascontiguousarray(forced[1], dtype=np.int32)
    eff = min(budget, index.size)
    uniform = FillPolicy(fill) is FillPolicy.UNIFORM_FILL
    counts, nforced = K.candidate_counts(codes, index.bucket_keys, index.table_offsets,
                                         index.bucket_ptr, index.ids, index.size, f_off, f_ids)
    k = np.maximum(eff - nforced, 0)
    pool = index.size - nforced - counts
    over = counts > k
    fill_n = np.where(~over & uniform, np.minimum(k - counts, pool), 0)
    draws = np.where(over, np.where(k > 0, counts - k, 0), fill_n)
    out_n = nforced + np.where(over, k, counts) + fill_n
    u_off = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(draws, out=u_off[1:])
    out_off = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(out_n, out=out_off[1:])
    uniforms = rng.random(int(u_off[-1]))
    out_ids = np.zeros(int(out_off[-1]), dtype=np.int32)
    K.select_fill(codes, index.bucket_keys, index.table_offsets, index.bucket_ptr, index.ids,
                  index.size, f_off, f_ids, eff, uniform, uniforms, u_off, out_off, out_ids)
    return out_off, out_ids


def select_active(index: LshIndex, query: SparseVector, policy: SelectionPolicy,
                  rng: np.random.Generator) -> list[int]:
    if query.dim != index.dim:
        raise InputError(f"dimension mismatch: query dim {query.dim}, index dim {index.dim}")
    _, ids = select_batch(index, _single(query), policy.budget, policy.fill, rng)
    return ids.tolist()
