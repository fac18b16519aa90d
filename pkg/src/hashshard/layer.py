"""One node's partition of a fully connected layer.

A ``NeuronShard`` owns a contiguous range of neurons: their weights, biases,
Adam moments and the per-batch gradient buffers. Forward and backward work
on packed batches; a shard either evaluates an explicit active set per sample
(sparse kernels) or, for layers with sparsity 1, every neuron (BLAS path).
"""
from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .kernels import K
from .lsh import LshConfig
from .sparse import InputError, PackedRows


class Activation(str, enum.Enum):
    RELU = "RELU"
    SOFTMAX = "SOFTMAX"


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: int | None, neuron: int, coord: int, what: str = "gradient"):
        self.layer, self.neuron, self.coord = layer, neuron, coord
        if neuron < 0:
            super().__init__(f"non-finite {what} at layer {layer}")
            return
        where = "bias" if coord < 0 else f"input coordinate {coord}"
        super().__init__(f"non-finite {what} at layer {layer}, neuron {neuron}, {where}")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: Activation = Activation.RELU
    sparsity: float = 1.0
    lsh: LshConfig = field(default_factory=LshConfig)
    per_shard_budget: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        if isinstance(self.lsh, dict):
            object.__setattr__(self, "lsh", LshConfig(**self.lsh))
        if self.in_dim < 1 or self.out_dim < 1:
            raise InputError("layer dimensions must be >= 1")
        if not 0.0 < self.sparsity <= 1.0:
            raise InputError(f"sparsity must be in (0, 1], got {self.sparsity}")
        if self.sparsity * self.out_dim < 1.0:
            raise InputError("sparsity * width must be >= 1")
        if self.per_shard_budget is not None and self.per_shard_budget < 1:
            raise InputError("per_shard_budget must be >= 1")

    @property
    def is_dense(self) -> bool:
        return self.sparsity >= 1.0 and self.per_shard_budget is None

    @property
    def total_budget(self) -> int:
        return max(1, math.ceil(self.sparsity * self.out_dim - 1e-9))

    def shard_budget(self, n: int) -> int:
        if self.per_shard_budget is not None:
            return self.per_shard_budget
        return math.ceil(self.total_budget / n)

    def to_dict(self) -> dict:
        d = {"in_dim": self.in_dim, "out_dim": self.out_dim,
             "activation": self.activation.value, "sparsity": self.sparsity,
             "lsh": self.lsh.to_dict()}
        if self.per_shard_budget is not None:
            d["per_shard_budget"] = self.per_shard_budget
        return d


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise InputError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InputError("betas must be in [0, 1)")
        if not self.epsilon > 0:
            raise InputError("epsilon must be > 0")


class NeuronShard:
    """Weights and optimizer state for neurons ``[global_offset, global_offset + local_count)``."""

    def __init__(self, shard_id: int, global_offset: int, weights: np.ndarray,
                 biases: np.ndarray, *, step: int = 0, adam_m_w=None, adam_v_w=None,
                 adam_m_b=None, adam_v_b=None):
        self.shard_id = shard_id
        self.global_offset = global_offset
        self.weights = np.ascontiguousarray(weights)
        self.dtype = self.weights.dtype
        self.biases = np.ascontiguousarray(biases, dtype=self.dtype)
        n, d = self.weights.shape
        if self.biases.shape != (n,):
            raise InputError("bias shape does not match weights")
        z = lambda shape: np.zeros(shape, dtype=self.dtype)  # noqa: E731
        self.adam_m_w = z((n, d)) if adam_m_w is None else np.ascontiguousarray(adam_m_w, self.dtype)
        self.adam_v_w = z((n, d)) if adam_v_w is None else np.ascontiguousarray(adam_v_w, self.dtype)
        self.adam_m_b = z(n) if adam_m_b is None else np.ascontiguousarray(adam_m_b, self.dtype)
        self.adam_v_b = z(n) if adam_v_b is None else np.ascontiguousarray(adam_v_b, self.dtype)
        self.step = step
        self.grad_w = z((n, d))
        self.grad_b = z(n)
        self.touched = np.zeros((n, d), dtype=np.uint8)
        self.touched_rows = np.zeros(n, dtype=np.uint8)

    @property
    def local_count(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def global_range(self) -> tuple[int, int]:
        return self.global_offset, self.global_offset + self.local_count

    def state_arrays(self) -> list[np.ndarray]:
        return [self.weights, self.biases, self.adam_m_w, self.adam_v_w,
                self.adam_m_b, self.adam_v_b]

    def copy(self) -> "NeuronShard":
        return NeuronShard(self.shard_id, self.global_offset, self.weights.copy(),
                           self.biases.copy(), step=self.step, adam_m_w=self.adam_m_w.copy(),
                           adam_v_w=self.adam_v_w.copy(), adam_m_b=self.adam_m_b.copy(),
                           adam_v_b=self.adam_v_b.copy())


@dataclass
class LayerSnapshot:
    """Per-batch record of active neurons, activations and errors for one layer.

    Entries are stored row-compressed by sample with global ids sorted inside
    each sample. ``shard_counts[r, s]`` is how many of sample ``s``'s entries
    came from shard ``r``. ``dense`` marks snapshots in which every neuron of
    every contributing shard is present (the dense-baseline wire layout).
    """

    offsets: np.ndarray
    ids: np.ndarray
    activations: np.ndarray
    width: int
    shard_counts: np.ndarray
    errors: np.ndarray | None = None
    dense: bool = False

    @property
    def n_samples(self) -> int:
        return int(self.offsets.shape[0] - 1)

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def sample(self, s: int):
        lo, hi = self.offsets[s], self.offsets[s + 1]
        err = None if self.errors is None else self.errors[lo:hi]
        return self.ids[lo:hi], self.activations[lo:hi], err

    def as_rows(self) -> PackedRows:
        return PackedRows(self.offsets, self.ids, self.activations, self.width)

    def check(self):
        """Raise if the snapshot is not well formed."""
        if self.ids.size:
            if self.ids.min() < 0 or self.ids.max() >= self.width:
                raise InputError("snapshot id out of range")
            seg = np.repeat(np.arange(self.n_samples), self.counts())
            key = seg.astype(np.int64) * self.width + self.ids
            if np.any(np.diff(key) <= 0):
                raise InputError("snapshot ids not sorted and unique per sample")
        if self.activations.shape != self.ids.shape:
            raise InputError("activations length mismatch")
        if self.errors is not None and self.errors.shape != self.ids.shape:
            raise InputError("errors length mismatch")


def _chunks(n: int, workers: int):
    workers = max(1, min(workers, n)) if n else 1
    step = math.ceil(n / workers) if n else 0
    return [(i, min(n, i + step)) for i in range(0, n, step)] if n else []


def _run_chunks(fn, n: int, workers: int):
    spans = _chunks(n, workers)
    if len(spans) <= 1:
        for s0, s1 in spans:
            fn(s0, s1)
        return
    # HOGWILD: chunks race on shared gradient rows without locks
    with ThreadPoolExecutor(max_workers=len(spans)) as pool:
        for f in [pool.submit(fn, s0, s1) for s0, s1 in spans]:
            f.result()


def _check_active(shard: NeuronShard, active):
    off, loc = active
    if loc.size and (loc.min() < 0 or loc.max() >= shard.local_count):
        raise InputError(f"active id out of shard range [0, {shard.local_count})")


def _dense_input(inputs: PackedRows, dtype):
    if inputs.is_full():
        return inputs.values.reshape(inputs.n_rows, inputs.dim).astype(dtype, copy=False)
    return None


def _compact_columns(inputs: PackedRows, dtype):
    """Batch matrix restricted to the input columns that occur in it."""
    cols, inv = np.unique(inputs.indices, return_inverse=True)
    Xc = sp.csr_matrix((np.asarray(inputs.values, dtype=dtype), inv.astype(np.int32),
                        inputs.offsets), shape=(inputs.n_rows, cols.size))
    return cols, Xc


def _dense_backward_sparse_input(shard: NeuronShard, inputs: PackedRows, errors: np.ndarray,
                                 want_input_error: bool):
    # every neuron active, sparse inputs: only columns present in the batch are touched
    n, c = inputs.n_rows, shard.local_count
    E = errors.reshape(n, c)
    shard.grad_b += E.sum(axis=0)
    if n:
        shard.touched_rows[:] = 1
    cols, Xc = _compact_columns(inputs, shard.dtype)
    if cols.size:
        Gt = np.asarray(Xc.T @ E)
        shard.grad_w[:, cols] += Gt.T
        shard.touched[:, cols] = 1
    if not want_input_error:
        return None
    if not cols.size:
        return np.zeros(0, dtype=shard.dtype)
    Wc_t = np.ascontiguousarray(shard.weights[:, cols].T)
    seg = _segment_ids(inputs.offsets)
    inv = Xc.indices
    return np.einsum("kl,kl->k", E[seg], Wc_t[inv]).astype(shard.dtype)


def dense_active(shard: NeuronShard, n: int) -> tuple[np.ndarray, np.ndarray]:
    c = shard.local_count
    return (np.arange(n + 1, dtype=np.int64) * c,
            np.tile(np.arange(c, dtype=np.int32), n))


def forward_shard(shard: NeuronShard, inputs: PackedRows, active, activation: Activation,
                  *, workers: int = 1) -> LayerSnapshot:
    """Compute this shard's activations for a batch.

    ``active`` is ``(offsets, local_ids)`` or ``None`` for every neuron. RELU
    layers clamp at zero; the output layer returns raw pre-softmax values.
    """
    if inputs.dim != shard.in_dim:
        raise InputError(f"input dim {inputs.dim} != layer in_dim {shard.in_dim}")
    n = inputs.n_rows
    relu = Activation(activation) is Activation.RELU
    dense = active is None
    X = _dense_input(inputs, shard.dtype) if dense else None
    if X is not None:
        # every neuron, full input rows: one GEMM
        Z = X @ shard.weights.T
        Z += shard.biases
        if relu:
            np.maximum(Z, 0, out=Z)
        off, loc = dense_active(shard, n)
        vals = np.ascontiguousarray(Z.reshape(-1), dtype=shard.dtype)
    elif dense:
        cols, Xc = _compact_columns(inputs, shard.dtype)
        Wc_t = np.ascontiguousarray(shard.weights[:, cols].T)
        Z = np.asarray(Xc @ Wc_t) if cols.size else np.zeros((n, shard.local_count),
                                                              dtype=shard.dtype)
        Z += shard.biases
        if relu:
            np.maximum(Z, 0, out=Z)
        off, loc = dense_active(shard, n)
        vals = np.ascontiguousarray(Z.reshape(-1), dtype=shard.dtype)
    else:
        _check_active(shard, active)
        off, loc = active
        vals = np.zeros(loc.shape[0], dtype=shard.dtype)
        iv = np.ascontiguousarray(inputs.values, dtype=shard.dtype)

        def run(s0, s1):
            K.forward(inputs.offsets, inputs.indices, iv, shard.weights, shard.biases,
                      off, loc, relu, vals, s0, s1)
        _run_chunks(run, n, workers)
    ids = (loc + shard.global_offset).astype(np.int32)
    return LayerSnapshot(off, ids, vals, width=-1, shard_counts=np.diff(off)[None, :],
                         dense=dense)


def _segment_ids(offsets: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(offsets.shape[0] - 1), np.diff(offsets))


def _uniform_width(offsets: np.ndarray) -> int | None:
    """Common per-sample entry count, or None if samples differ."""
    c = np.diff(offsets)
    if c.size and np.all(c == c[0]):
        return int(c[0])
    return None


def compute_output_distribution(gathered: LayerSnapshot) -> np.ndarray:
    """Softmax over each sample's active output neurons, aligned to ``gathered.ids``.

    Computed in the activation dtype with max subtraction.
    """
    counts = gathered.counts()
    if np.any(counts == 0):
        s = int(np.flatnonzero(counts == 0)[0])
        raise InputError(f"sample {s} has an empty active output set")
    if gathered.n_samples == 0:
        return np.zeros(0, dtype=gathered.activations.dtype)
    z = gathered.activations
    w = _uniform_width(gathered.offsets)
    if w is not None:
        e = z.reshape(-1, w) - z.reshape(-1, w).max(axis=1, keepdims=True)
        np.exp(e, out=e)
        e /= e.sum(axis=1, keepdims=True)
        return e.reshape(-1)
    starts = gathered.offsets[:-1]
    seg = _segment_ids(gathered.offsets)
    e = z - np.maximum.reduceat(z, starts)[seg]
    np.exp(e, out=e)
    e /= np.add.reduceat(e, starts)[seg]
    return e


@dataclass(frozen=True)
class LabelPositions:
    """Where each (sample, label) pair sits in a gathered output snapshot."""

    pos: np.ndarray
    sample: np.ndarray
    weight: np.ndarray


def label_positions(gathered: LayerSnapshot, labels) -> LabelPositions:
    n = gathered.n_samples
    uniq = [np.unique(np.asarray(labels[s], dtype=np.int64)) for s in range(n)]
    sizes = np.array([u.size for u in uniq], dtype=np.int64)
    if not sizes.sum():
        z = np.zeros(0, dtype=np.int64)
        return LabelPositions(z, z, np.zeros(0))
    labs = np.concatenate(uniq)
    owner = np.repeat(np.arange(n, dtype=np.int64), sizes)
    weight = 1.0 / sizes[owner]
    w = _uniform_width(gathered.offsets)
    if gathered.dense and w == gathered.width and labs.max() < w:
        return LabelPositions(owner * w + labs, owner, weight)
    width = max(gathered.width, int(gathered.ids.max()) + 1 if gathered.ids.size else 1,
                int(labs.max()) + 1)
    seg = _segment_ids(gathered.offsets).astype(np.int64)
    keys = seg * width + gathered.ids
    want = owner * width + labs
    pos = np.searchsorted(keys, want)
    ok = pos < keys.size
    ok[ok] &= keys[pos[ok]] == want[ok]
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise AssertionError(f"label {labs[bad]} of sample {owner[bad]} is not in the active set")
    return LabelPositions(pos, owner, weight)


def label_targets(gathered: LayerSnapshot, labels) -> np.ndarray:
    """Target distribution ``y`` aligned to the snapshot entries (1/|labels| per label)."""
    lp = label_positions(gathered, labels)
    y = np.zeros(gathered.ids.shape[0], dtype=np.float64)
    y[lp.pos] = lp.weight
    return y


def output_error(gathered: LayerSnapshot, probabilities: np.ndarray, labels, *,
                 positions: LabelPositions | None = None) -> np.ndarray:
    """Cross-entropy gradient ``p - y``; also stored into ``gathered.errors``."""
    lp = label_positions(gathered, labels) if positions is None else positions
    err = np.array(probabilities, dtype=gathered.activations.dtype)
    err[lp.pos] -= lp.weight.astype(err.dtype)
    gathered.errors = err
    return err


def cross_entropy(probabilities: np.ndarray, gathered: LayerSnapshot, labels, *,
                  positions: LabelPositions | None = None) -> np.ndarray:
    """Per-sample cross-entropy against the label distribution."""
    lp = label_positions(gathered, labels) if positions is None else positions
    p = np.maximum(probabilities[lp.pos].astype(np.float64), 1e-300)
    return np.bincount(lp.sample, weights=-lp.weight * np.log(p),
                       minlength=gathered.n_samples)


def backward_shard(shard: NeuronShard, inputs: PackedRows, active, errors: np.ndarray,
                   *, want_input_error: bool = True, workers: int = 1) -> np.ndarray | None:
    """Accumulate gradients for this shard and return partial input errors.

    ``errors`` is aligned to the active entries (local order as produced by
    ``forward_shard``). The returned array is aligned to ``inputs`` entries
    and holds only this shard's contribution; summing across shards happens
    in the collective.
    """
    if inputs.dim != shard.in_dim:
        raise InputError(f"input dim {inputs.dim} != layer in_dim {shard.in_dim}")
    n = inputs.n_rows
    errors = np.ascontiguousarray(errors, dtype=shard.dtype)
    X = _dense_input(inputs, shard.dtype) if active is None else None
    if X is not None:
        E = errors.reshape(n, shard.local_count)
        shard.grad_w += E.T @ X
        shard.grad_b += E.sum(axis=0)
        if n:
            shard.touched[:] = 1
            shard.touched_rows[:] = 1
        if not want_input_error:
            return None
        return np.ascontiguousarray((E @ shard.weights).reshape(-1), dtype=shard.dtype)
    if active is None:
        return _dense_backward_sparse_input(shard, inputs, errors, want_input_error)
    _check_active(shard, active)
    off, loc = active
    in_err = np.zeros(inputs.nnz if want_input_error else 0, dtype=shard.dtype)
    iv = np.ascontiguousarray(inputs.values, dtype=shard.dtype)

    def run(s0, s1):
        K.backward(inputs.offsets, inputs.indices, iv, shard.weights, off, loc, errors,
                   shard.grad_w, shard.grad_b, shard.touched, shard.touched_rows,
                   in_err, want_input_error, s0, s1)
    _run_chunks(run, n, workers)
    return in_err if want_input_error else None


def adam_step(shard: NeuronShard, cfg: OptimizerConfig, *, layer: int | None = None) -> int:
    """One lazy Adam step over the weights touched since the last step."""
    t = shard.step + 1
    status, row, col = K.adam(shard.weights, shard.biases, shard.adam_m_w, shard.adam_v_w,
                              shard.adam_m_b, shard.adam_v_b, shard.grad_w, shard.grad_b,
                              shard.touched, shard.touched_rows, cfg.lr, cfg.beta1,
                              cfg.beta2, cfg.epsilon, t)
    if status:
        raise NonFiniteError(layer, shard.global_offset + row, col)
    shard.step = t
    return t


def relu_mask_(in_err: np.ndarray, activations: np.ndarray) -> np.ndarray:
    """Zero errors where the upstream RELU output was not positive (in place)."""
    in_err[activations <= 0] = 0
    return in_err
