"""Extreme-classification datasets: text format I/O, batching, synthetic data.

Text format (UTF-8, LF or CRLF)::

    num_points feature_dim label_dim
    l1,l2,... idx:val idx:val ...

A line whose first token contains ``:`` (or that starts with whitespace) has
no labels. Datasets are held packed in memory: one row-compressed feature
matrix plus a row-compressed label list.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .sparse import Batch, DataRecord, PackedRows, SparseVector, validate_record


class DatasetError(ValueError):
    def __init__(self, kind: str, line: int | None = None, detail: str = ""):
        self.kind = kind
        self.line = line
        loc = f" (line {line})" if line is not None else ""
        super().__init__(f"{kind}{loc}{': ' + detail if detail else ''}")


@dataclass(frozen=True)
class DatasetHeader:
    num_points: int
    feature_dim: int
    label_dim: int

    def __post_init__(self):
        if min(self.num_points, self.feature_dim, self.label_dim) < 1:
            raise DatasetError("header fields must be positive", 1, str(self))

    def line(self) -> str:
        return f"{self.num_points} {self.feature_dim} {self.label_dim}"


class DatasetHandle:
    """Memory-resident dataset with packed features and labels."""

    def __init__(self, header: DatasetHeader, features: PackedRows, label_offsets: np.ndarray,
                 label_ids: np.ndarray, source: str | None = None):
        if features.n_rows != header.num_points:
            raise DatasetError("record count mismatch", None,
                               f"header says {header.num_points}, found {features.n_rows}")
        self.header = header
        self.features = features
        self.label_offsets = np.asarray(label_offsets, dtype=np.int64)
        self.label_ids = np.asarray(label_ids, dtype=np.int64)
        self.source = source

    def __len__(self):
        return self.header.num_points

    def labels(self, i: int) -> np.ndarray:
        return self.label_ids[self.label_offsets[i]:self.label_offsets[i + 1]]

    def record(self, i: int) -> DataRecord:
        idx, val = self.features.row(i)
        return DataRecord(SparseVector(idx, val, self.header.feature_dim, check=False),
                          self.labels(i).tolist())

    def records(self) -> Iterator[DataRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def validate(self, require_labels: bool = True):
        """Full scan; raises ``DatasetError`` on the first bad record."""
        h = self.header
        for i in range(len(self)):
            v = validate_record(self.record(i), h.feature_dim, h.label_dim,
                                require_labels=require_labels)
            if v is not None:
                raise DatasetError(v.invariant, i + 2, str(v))

    def subset(self, rows: np.ndarray) -> "DatasetHandle":
        rows = np.asarray(rows, dtype=np.int64)
        feats = take_rows(self.features, rows)
        lo, hi = self.label_offsets[rows], self.label_offsets[rows + 1]
        counts = hi - lo
        off = np.zeros(rows.size + 1, dtype=np.int64)
        np.cumsum(counts, out=off[1:])
        ids = self.label_ids[_gather_ranges(lo, counts)]
        h = DatasetHeader(int(rows.size), self.header.feature_dim, self.header.label_dim)
        return DatasetHandle(h, feats, off, ids, self.source)


def _gather_ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    seg = np.repeat(np.arange(counts.size), counts)
    first = np.zeros(counts.size, dtype=np.int64)
    np.cumsum(counts[:-1], out=first[1:])
    return starts[seg] + (np.arange(total) - first[seg])


def take_rows(rows: PackedRows, pick: np.ndarray) -> PackedRows:
    lo = rows.offsets[pick]
    counts = rows.offsets[pick + 1] - lo
    off = np.zeros(pick.size + 1, dtype=np.int64)
    np.cumsum(counts, out=off[1:])
    src = _gather_ranges(lo, counts)
    return PackedRows(off, rows.indices[src], rows.values[src], rows.dim)


def _parse_int(tok: str, what: str, line: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise DatasetError(f"non-numeric {what}", line, repr(tok)) from None


def parse_xc(path, *, require_labels: bool = False) -> DatasetHandle:
    """Parse an extreme-classification text file into a validated handle."""
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8", newline=None) as fh:
        head = fh.readline()
        if not head.strip():
            raise DatasetError("missing header", 1)
        parts = head.split()
        if len(parts) != 3:
            raise DatasetError("malformed header", 1, head.strip())
        n, fdim, ldim = (_parse_int(t, "header field", 1) for t in parts)
        header = DatasetHeader(n, fdim, ldim)
        f_off, f_idx, f_val, l_off, l_ids = [0], [], [], [0], []
        count = 0
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\r\n")
            count += 1
            if count > n:
                raise DatasetError("more records than header num_points", lineno)
            toks = line.split()
            labels: list[int] = []
            if toks and not line[0].isspace() and ":" not in toks[0]:
                for t in toks[0].split(","):
                    if t == "":
                        continue
                    lab = _parse_int(t, "label", lineno)
                    if lab < 0 or lab >= ldim:
                        raise DatasetError("label out of range", lineno,
                                           f"{lab} not in [0, {ldim})")
                    labels.append(lab)
                toks = toks[1:]
            if require_labels and not labels:
                raise DatasetError("labels empty", lineno)
            idx, val = [], []
            for t in toks:
                k, sep, v = t.partition(":")
                if not sep:
                    raise DatasetError("malformed feature", lineno, repr(t))
                i = _parse_int(k, "feature index", lineno)
                try:
                    x = float(v)
                except ValueError:
                    raise DatasetError("non-numeric feature value", lineno, repr(t)) from None
                if i < 0 or i >= fdim:
                    raise DatasetError("feature index out of range", lineno,
                                       f"{i} not in [0, {fdim})")
                idx.append(i)
                val.append(x)
            idx_a = np.asarray(idx, dtype=np.int64)
            val_a = np.asarray(val, dtype=np.float32)
            if idx_a.size > 1:
                order = np.argsort(idx_a, kind="stable")
                idx_a, val_a = idx_a[order], val_a[order]
                if np.any(np.diff(idx_a) == 0):
                    dup = int(idx_a[np.flatnonzero(np.diff(idx_a) == 0)[0]])
                    raise DatasetError("duplicate feature index", lineno, str(dup))
            f_idx.append(idx_a)
            f_val.append(val_a)
            f_off.append(f_off[-1] + idx_a.size)
            l_ids.extend(labels)
            l_off.append(len(l_ids))
    if count != n:
        raise DatasetError("record count mismatch", None, f"header says {n}, found {count}")
    feats = PackedRows(
        np.asarray(f_off, dtype=np.int64),
        np.concatenate(f_idx).astype(np.int32) if f_idx else np.zeros(0, np.int32),
        np.concatenate(f_val).astype(np.float32) if f_val else np.zeros(0, np.float32),
        fdim)
    return DatasetHandle(header, feats, np.asarray(l_off), np.asarray(l_ids, dtype=np.int64),
                         path)


def write_xc(handle: DatasetHandle, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(handle.header.line() + "\n")
        for i in range(len(handle)):
            idx, val = handle.features.row(i)
            labs = ",".join(str(int(x)) for x in handle.labels(i))
            feats = " ".join(f"{int(k)}:{float(v):.9g}" for k, v in zip(idx, val))
            fh.write(f"{labs} {feats}".rstrip() + "\n" if labs else f" {feats}\n")


@dataclass(frozen=True)
class BatchView:
    """One batch in packed form; every node iterating with the same seed sees the same."""

    record_ids: np.ndarray
    features: PackedRows
    label_offsets: np.ndarray
    label_ids: np.ndarray
    size: int

    def __len__(self):
        return int(self.record_ids.size)

    def labels(self, s: int) -> np.ndarray:
        return self.label_ids[self.label_offsets[s]:self.label_offsets[s + 1]]

    def label_lists(self) -> list[np.ndarray]:
        return [self.labels(s) for s in range(len(self))]

    def as_batch(self, feature_dim: int | None = None) -> Batch:
        dim = feature_dim or self.features.dim
        recs = tuple(DataRecord(SparseVector(*self.features.row(s), dim, check=False),
                                self.labels(s).tolist()) for s in range(len(self)))
        return Batch(recs, self.size)


def batch_order(n: int, shuffle_seed: int | None) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng(shuffle_seed).permutation(n)


def batches(handle: DatasetHandle, B: int, shuffle_seed: int | None = None) -> Iterator[BatchView]:
    if B < 1:
        raise ValueError("batch size must be >= 1")
    order = batch_order(len(handle), shuffle_seed)
    for start in range(0, len(handle), B):
        rows = order[start:start + B]
        lo, hi = handle.label_offsets[rows], handle.label_offsets[rows + 1]
        counts = hi - lo
        off = np.zeros(rows.size + 1, dtype=np.int64)
        np.cumsum(counts, out=off[1:])
        yield BatchView(rows, take_rows(handle.features, rows), off,
                        handle.label_ids[_gather_ranges(lo, counts)], B)


def _synth(C: int, d: int, p: int, sigma: float, seed: int, test_per_class: int,
           bumps: int, radius: int):
    if min(C, d, p) < 1:
        raise ValueError("C, d and points_per_class must be >= 1")
    width = 2 * radius + 1
    rng = np.random.default_rng(seed)
    slots = max(1, d // width)
    nb = min(bumps, slots)
    profile = np.exp(-0.5 * np.arange(-radius, radius + 1) ** 2)
    centers = np.stack([rng.choice(slots, size=nb, replace=False) for _ in range(C)])
    support = (centers[:, :, None] * width + np.arange(width)).reshape(C, -1) % d
    proto_val = np.tile(profile, nb)[None, :].repeat(C, axis=0)
    # random positive gain per bump keeps classes sharing a block distinguishable
    gains = rng.uniform(0.5, 1.5, size=(C, nb)).repeat(width, axis=1)
    proto_val = proto_val * gains
    k = support.shape[1]

    def draw(per_class: int, gen: np.random.Generator):
        labels = np.repeat(np.arange(C), per_class)
        n = labels.size
        sup = support[labels]
        val = proto_val[labels] + sigma * gen.standard_normal((n, k))
        extra = gen.integers(0, d, size=(n, k))
        ext_val = sigma * gen.standard_normal((n, k))
        cand_idx = np.concatenate([sup, extra], axis=1)
        cand_val = np.concatenate([val, ext_val], axis=1)
        # an extra coordinate that collides with an earlier one contributes nothing
        order = np.argsort(cand_idx, axis=1, kind="stable")
        sidx = np.take_along_axis(cand_idx, order, axis=1)
        dup = np.zeros_like(sidx, dtype=bool)
        dup[:, 1:] = sidx[:, 1:] == sidx[:, :-1]
        dup_orig = np.zeros_like(dup)
        np.put_along_axis(dup_orig, order, dup, axis=1)
        cand_val = np.where(dup_orig, 0.0, cand_val)
        top = np.argsort(-np.abs(cand_val), axis=1, kind="stable")[:, :k]
        idx = np.take_along_axis(cand_idx, top, axis=1)
        v = np.take_along_axis(cand_val, top, axis=1)
        keep = v != 0
        o = np.argsort(np.where(keep, idx, d + 1), axis=1, kind="stable")
        idx = np.take_along_axis(idx, o, axis=1)
        v = np.take_along_axis(v, o, axis=1)
        keep = np.take_along_axis(keep, o, axis=1)
        counts = keep.sum(axis=1)
        off = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=off[1:])
        feats = PackedRows(off, idx[keep].astype(np.int32), v[keep].astype(np.float32), d)
        header = DatasetHeader(n, d, C)
        return DatasetHandle(header, feats, np.arange(n + 1, dtype=np.int64), labels)

    train = draw(p, np.random.default_rng([seed, 1]))
    test = draw(test_per_class, np.random.default_rng([seed, 2])) if test_per_class else None
    return train, test


def synth_clustered(C: int, d: int, p: int, sigma: float, seed: int = 0, *,
                    bumps: int = 4, radius: int = 2) -> DatasetHandle:
    """One sparse Gaussian-bump prototype per class; points are noisy copies."""
    return _synth(C, d, p, sigma, seed, 0, bumps, radius)[0]


def synth_clustered_split(C: int, d: int, p: int, sigma: float, seed: int = 0, *,
                          test_per_class: int = 1, bumps: int = 4, radius: int = 2):
    """Train and held-out test sets drawn around the same prototypes."""
    return _synth(C, d, p, sigma, seed, test_per_class, bumps, radius)
