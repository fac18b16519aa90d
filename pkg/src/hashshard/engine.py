"""Model-parallel training loop over sharded layers.

Every node holds one shard of every layer and sees every sample. Per batch
and per layer, each node selects its active neurons from its own LSH index,
computes their activations and all-gathers the per-shard snapshot. The
output errors are synchronised through the same snapshot path, and on the
way back each node all-reduces its partial input errors. Weights never
leave the node that owns them.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import checkpoint as ckpt
from .dataset import BatchView, DatasetHandle, batches
from .layer import (Activation, LayerSnapshot, LayerSpec, NeuronShard, NonFiniteError,
                    OptimizerConfig, adam_step, backward_shard, compute_output_distribution,
                    cross_entropy, forward_shard, label_positions, output_error,
                    relu_mask_)
from .lsh import FillPolicy, LshIndex, build_index, rebuild, select_batch
from .sparse import InputError, PackedRows
from .transport.base import Endpoint, PayloadKind, Phase, TransportError
from .transport.wire import snapshot_sync

log = logging.getLogger(__name__)

INIT_CHUNK_ROWS = 1024


class ConfigError(ValueError):
    pass


class Mode(str, enum.Enum):
    SPARSE = "SPARSE"
    DENSE_BASELINE = "DENSE_BASELINE"


class Parallelism(str, enum.Enum):
    DETERMINISTIC = "DETERMINISTIC"
    HOGWILD = "HOGWILD"


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    seed: int = 0

    def __post_init__(self):
        layers = tuple(LayerSpec(**l) if isinstance(l, dict) else l for l in self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ConfigError("network needs at least one layer")
        for k in range(len(layers) - 1):
            if layers[k].out_dim != layers[k + 1].in_dim:
                raise ConfigError(f"layer {k} out_dim {layers[k].out_dim} != layer {k + 1} "
                                  f"in_dim {layers[k + 1].in_dim}")
            if layers[k].activation is Activation.SOFTMAX:
                raise ConfigError("SOFTMAX is only allowed on the final layer")
        if layers[-1].activation is not Activation.SOFTMAX:
            raise ConfigError("final layer must be SOFTMAX")

    @classmethod
    def mlp(cls, dims: list[int], sparsity: list[float] | float = 1.0, *, lsh=None,
            seed: int = 0, per_shard_budget: list | None = None) -> "NetworkSpec":
        n = len(dims) - 1
        sp = [sparsity] * n if isinstance(sparsity, (int, float)) else list(sparsity)
        budgets = per_shard_budget or [None] * n
        layers = []
        for k in range(n):
            kw = {} if lsh is None else {"lsh": lsh if not isinstance(lsh, list) else lsh[k]}
            layers.append(LayerSpec(dims[k], dims[k + 1],
                                    Activation.SOFTMAX if k == n - 1 else Activation.RELU,
                                    sp[k], per_shard_budget=budgets[k], **kw))
        return cls(tuple(layers), seed)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(LayerSpec(**l) for l in d["layers"]), d.get("seed", 0))


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 128
    epochs: int = 1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    rebuild_period: int = 50
    regen_every: int = 4
    mode: Mode = Mode.SPARSE
    parallelism: Parallelism = Parallelism.DETERMINISTIC
    workers: int = 1
    fill: FillPolicy = FillPolicy.UNIFORM_FILL
    shuffle_seed: int | None = 0
    dtype: str = "float32"
    label_forcing: bool = True

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            object.__setattr__(self, "optimizer", OptimizerConfig(**self.optimizer))
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "parallelism", Parallelism(self.parallelism))
        object.__setattr__(self, "fill", FillPolicy(self.fill))
        if self.batch_size < 1 or self.epochs < 1 or self.rebuild_period < 1:
            raise ConfigError("batch_size, epochs and rebuild_period must be >= 1")
        if self.regen_every < 1 or self.workers < 1:
            raise ConfigError("regen_every and workers must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def effective_workers(self) -> int:
        return 1 if self.parallelism is Parallelism.DETERMINISTIC else self.workers

    def to_dict(self) -> dict:
        o = self.optimizer
        return {"batch_size": self.batch_size, "epochs": self.epochs,
                "optimizer": {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2,
                              "epsilon": o.epsilon},
                "rebuild_period": self.rebuild_period, "regen_every": self.regen_every,
                "mode": self.mode.value, "parallelism": self.parallelism.value,
                "workers": self.workers, "fill": self.fill.value,
                "shuffle_seed": self.shuffle_seed, "dtype": self.dtype,
                "label_forcing": self.label_forcing}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**d)


def partition_layer(L_w: int, n: int) -> list[tuple[int, int]]:
    """Contiguous balanced ranges; the first ``L_w mod n`` shards get one extra neuron."""
    if n < 1:
        raise ConfigError("need at least one node")
    if L_w < n:
        raise ConfigError(f"layer width {L_w} is smaller than node count {n}")
    base, extra = divmod(L_w, n)
    out, lo = [], 0
    for r in range(n):
        hi = lo + base + (1 if r < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


@dataclass(frozen=True)
class ShardPlan:
    layers: tuple[tuple[tuple[int, tuple[int, int]], ...], ...]

    @classmethod
    def build(cls, network: NetworkSpec, n: int) -> "ShardPlan":
        return cls(tuple(tuple((r, rng) for r, rng in enumerate(partition_layer(l.out_dim, n)))
                         for l in network.layers))

    def ranges(self, layer: int) -> list[tuple[int, int]]:
        return [rng for _, rng in self.layers[layer]]

    def range_of(self, layer: int, node: int) -> tuple[int, int]:
        return self.layers[layer][node][1]


def init_shard(spec: LayerSpec, layer: int, lo: int, hi: int, seed: int, dtype,
               shard_id: int) -> NeuronShard:
    """Seeded uniform init in +-1/sqrt(in_dim), generated in fixed row chunks.

    Any node can produce exactly its slice of the full matrix without
    materialising the rest.
    """
    a = 1.0 / math.sqrt(spec.in_dim)
    W = np.empty((hi - lo, spec.in_dim), dtype=dtype)
    b = np.empty(hi - lo, dtype=dtype)
    for c in range(lo // INIT_CHUNK_ROWS, (hi - 1) // INIT_CHUNK_ROWS + 1 if hi > lo else 0):
        c_lo = c * INIT_CHUNK_ROWS
        c_hi = min(c_lo + INIT_CHUNK_ROWS, spec.out_dim)
        rng = np.random.default_rng([seed, layer, c, 0x5EED])
        block = rng.uniform(-a, a, size=(c_hi - c_lo, spec.in_dim))
        bias = rng.uniform(-a, a, size=c_hi - c_lo)
        s, e = max(lo, c_lo), min(hi, c_hi)
        W[s - lo:e - lo] = block[s - c_lo:e - c_lo]
        b[s - lo:e - lo] = bias[s - c_lo:e - c_lo]
    return NeuronShard(shard_id, lo, W, b)


def full_init(network: NetworkSpec, dtype=np.float64) -> list[tuple[np.ndarray, np.ndarray]]:
    """Unsharded initial weights (what the shards jointly hold at step 0)."""
    out = []
    for k, spec in enumerate(network.layers):
        s = init_shard(spec, k, 0, spec.out_dim, network.seed, dtype, 0)
        out.append((s.weights, s.biases))
    return out


@dataclass
class LayerTrace:
    """What one node keeps from the forward pass of one layer for backprop."""

    inputs: PackedRows
    active: tuple[np.ndarray, np.ndarray] | None
    partial: LayerSnapshot
    gathered: LayerSnapshot


@dataclass
class BatchResult:
    loss: float
    samples: int
    snapshots: list[LayerSnapshot]
    probabilities: np.ndarray


def _hash_seed(network: NetworkSpec, spec: LayerSpec, layer: int, regen: int) -> int:
    words = np.random.SeedSequence([spec.lsh.seed, network.seed, layer, regen]).generate_state(2)
    return int(words[0]) | (int(words[1]) << 32)


class Trainer:
    """One node's engine. Call every collective-issuing method on all nodes."""

    def __init__(self, network: NetworkSpec, cfg: TrainingConfig, endpoint: Endpoint, *,
                 shards: list[NeuronShard] | None = None,
                 recorder: Callable[[dict], None] | None = None):
        self.network = network
        self.cfg = cfg
        self.ep = endpoint
        self.rank = endpoint.rank
        self.n = endpoint.size
        self.plan = ShardPlan.build(network, self.n)
        self.dtype = cfg.np_dtype
        self.recorder = recorder
        if shards is None:
            shards = [init_shard(spec, k, *self.plan.range_of(k, self.rank), network.seed,
                                 self.dtype, self.rank)
                      for k, spec in enumerate(network.layers)]
        for k, s in enumerate(shards):
            if s.global_range != self.plan.range_of(k, self.rank):
                raise ConfigError(f"layer {k} shard range {s.global_range} does not match plan "
                                  f"{self.plan.range_of(k, self.rank)}")
        self.shards = shards
        self.batches_done = 0
        self.rebuilds = 0
        self.regen = [0] * len(network.layers)
        self.epoch = 0
        self.indices: list[LshIndex | None] = [self._build_index(k) for k in
                                               range(len(network.layers))]

    # -- LSH ---------------------------------------------------------------
    def _sparse_layer(self, k: int) -> bool:
        return self.cfg.mode is Mode.SPARSE and not self.network.layers[k].is_dense

    def _build_index(self, k: int, *, previous: LshIndex | None = None) -> LshIndex | None:
        if not self._sparse_layer(k):
            return None
        spec = self.network.layers[k]
        seed = _hash_seed(self.network, spec, k, self.regen[k])
        W = self.shards[k].weights
        if previous is not None:
            new_seed = None if seed == previous.hash_seed else seed
            return rebuild(previous, W, new_seed)
        return build_index(W, self.rank, spec.lsh, hash_seed=seed)

    def maybe_rebuild(self):
        if self.batches_done % self.cfg.rebuild_period:
            return
        self.rebuilds += 1
        regen = self.rebuilds % self.cfg.regen_every == 0
        for k in range(len(self.network.layers)):
            if self.indices[k] is None:
                continue
            if regen:
                self.regen[k] += 1
            # built off to the side, swapped in at the batch boundary
            self.indices[k] = self._build_index(k, previous=self.indices[k])

    # -- helpers -----------------------------------------------------------
    def _own(self, gathered: LayerSnapshot, k: int, values: np.ndarray) -> np.ndarray:
        """The entries of ``values`` (aligned to ``gathered``) that this node's shard produced."""
        if self.n == 1:
            return np.ascontiguousarray(values)
        lo, hi = self.plan.range_of(k, self.rank)
        if gathered.dense and gathered.n_samples and \
                gathered.offsets[-1] == gathered.n_samples * gathered.width:
            return np.ascontiguousarray(values.reshape(-1, gathered.width)[:, lo:hi]).reshape(-1)
        return np.ascontiguousarray(values[(gathered.ids >= lo) & (gathered.ids < hi)])

    def _forced(self, labels: list[np.ndarray], k: int):
        lo, hi = self.plan.range_of(k, self.rank)
        off = [0]
        ids = []
        for labs in labels:
            own = np.unique(labs[(labs >= lo) & (labs < hi)]) - lo
            ids.append(own)
            off.append(off[-1] + own.size)
        return (np.asarray(off, dtype=np.int64),
                np.concatenate(ids).astype(np.int32) if ids else np.zeros(0, np.int32))

    def _selection_rng(self, epoch: int, batch: int, k: int) -> np.random.Generator:
        return np.random.default_rng([self.network.seed, 17, epoch, batch, k, self.rank])

    def _inputs(self, batch: BatchView) -> PackedRows:
        f = batch.features
        return PackedRows(f.offsets, f.indices, f.values.astype(self.dtype, copy=False), f.dim)

    # -- forward -----------------------------------------------------------
    def forward(self, batch: BatchView, *, training: bool, epoch: int = 0, batch_idx: int = 0,
                force_dense: bool = False) -> list[LayerTrace]:
        labels = batch.label_lists()
        inputs = self._inputs(batch)
        traces = []
        last = len(self.network.layers) - 1
        dense_wire = self.cfg.mode is Mode.DENSE_BASELINE or force_dense
        workers = self.cfg.effective_workers
        for k, spec in enumerate(self.network.layers):
            shard = self.shards[k]
            if force_dense or not self._sparse_layer(k):
                active = None
            else:
                forced = self._forced(labels, k) if (training and k == last
                                                     and self.cfg.label_forcing) else None
                active = select_batch(self.indices[k], inputs, spec.shard_budget(self.n),
                                      self.cfg.fill, self._selection_rng(epoch, batch_idx, k),
                                      forced)
            partial = forward_shard(shard, inputs, active, spec.activation, workers=workers)
            partial.width = spec.out_dim
            partial.dense = dense_wire
            gathered = snapshot_sync(self.ep, partial, width=spec.out_dim,
                                     ranges=self.plan.ranges(k),
                                     phase=Phase.FORWARD_GATHER if training else Phase.EVAL,
                                     layer=k, dtype=self.dtype)
            traces.append(LayerTrace(inputs, active, partial, gathered))
            inputs = gathered.as_rows()
        return traces

    # -- one training step -------------------------------------------------
    def train_batch(self, batch: BatchView, epoch: int = 0, batch_idx: int = 0) -> BatchResult:
        res = self.accumulate_gradients(batch, epoch, batch_idx)
        for k, shard in enumerate(self.shards):
            adam_step(shard, self.cfg.optimizer, layer=k)
        self.batches_done += 1
        self.maybe_rebuild()
        return res

    def accumulate_gradients(self, batch: BatchView, epoch: int = 0,
                             batch_idx: int = 0) -> BatchResult:
        """Forward, error sync and backward; gradients land in the shard buffers.

        The gradient is the sum over samples of the per-sample cross-entropy
        gradient; the returned loss is the per-sample mean.
        """
        labels = batch.label_lists()
        traces = self.forward(batch, training=True, epoch=epoch, batch_idx=batch_idx)
        if self.recorder is not None:
            self.recorder({"epoch": epoch, "batch": batch_idx, "rank": self.rank,
                           "record_ids": batch.record_ids.copy(),
                           "active": [None if t.active is None else
                                      (t.active[0].copy(), t.active[1].copy())
                                      for t in traces]})
        last = len(traces) - 1
        out = traces[last].gathered
        probs = compute_output_distribution(out)
        lp = label_positions(out, labels)
        errors = output_error(out, probs, labels, positions=lp)
        losses = cross_entropy(probs, out, labels, positions=lp)
        loss = float(losses.mean()) if losses.size else 0.0
        if not math.isfinite(loss):
            raise NonFiniteError(last, -1, -1, what=f"loss (epoch {epoch}, batch {batch_idx})")

        err_part = LayerSnapshot(traces[last].partial.offsets, traces[last].partial.ids,
                                 traces[last].partial.activations, out.width,
                                 traces[last].partial.shard_counts,
                                 errors=self._own(out, last, errors),
                                 dense=traces[last].partial.dense)
        synced = snapshot_sync(self.ep, err_part, width=out.width, ranges=self.plan.ranges(last),
                               values="errors", phase=Phase.ERROR_SYNC, layer=last,
                               dtype=self.dtype)
        out.errors = synced.errors
        err_local = self._own(out, last, synced.errors)

        workers = self.cfg.effective_workers
        for k in range(last, -1, -1):
            tr = traces[k]
            part = backward_shard(self.shards[k], tr.inputs, tr.active, err_local,
                                  want_input_error=k > 0, workers=workers)
            if k == 0:
                break
            reduced = self.ep.all_reduce_sum(part, phase=Phase.GRAD_REDUCE,
                                             kind=PayloadKind.INPUT_ERRORS, layer=k)
            prev = traces[k - 1].gathered
            relu_mask_(reduced, prev.activations)
            prev.errors = reduced
            err_local = self._own(prev, k - 1, reduced)
        return BatchResult(loss, len(batch), [t.gathered for t in traces], probs)

    # -- epochs ------------------------------------------------------------
    def epoch_batches(self, data: DatasetHandle, epoch: int) -> Iterable[BatchView]:
        seed = None if self.cfg.shuffle_seed is None else \
            int(np.random.SeedSequence([self.cfg.shuffle_seed, epoch]).generate_state(1)[0])
        return batches(data, self.cfg.batch_size, seed)

    def fit(self, data: DatasetHandle, *, epochs: int | None = None,
            metrics: Callable[[dict], None] | None = None,
            checkpoint_dir: str | Path | None = None,
            on_batch: Callable[["Trainer", BatchResult], None] | None = None) -> list[float]:
        """Run ``epochs`` epochs; returns the mean training loss per epoch."""
        epochs = self.cfg.epochs if epochs is None else epochs
        per_epoch = []
        start_epoch = self.epoch
        for e in range(start_epoch, start_epoch + epochs):
            tot, cnt = 0.0, 0
            for b, batch in enumerate(self.epoch_batches(data, e)):
                before = self.ep.stats.snapshot()
                t0 = time.perf_counter()
                try:
                    res = self.train_batch(batch, e, b)
                except TransportError:
                    if checkpoint_dir is not None:
                        self.save(checkpoint_dir)
                    raise
                tot += res.loss * res.samples
                cnt += res.samples
                if on_batch is not None:
                    on_batch(self, res)
                if metrics is not None:
                    d = self.ep.stats.diff(before)
                    metrics({"epoch": e, "batch": b, "loss": res.loss, "samples": res.samples,
                             "bytes": {k: v["payload"] for k, v in d["by_phase"].items()},
                             "wall_time": time.perf_counter() - t0})
            per_epoch.append(tot / max(cnt, 1))
            self.epoch = e + 1
            if checkpoint_dir is not None:
                self.save(checkpoint_dir)
        return per_epoch

    # -- evaluation --------------------------------------------------------
    def predict_scores(self, batch: BatchView) -> np.ndarray:
        traces = self.forward(batch, training=False, force_dense=True)
        out = traces[-1].gathered
        return out.activations.reshape(len(batch), out.width)

    def evaluate(self, data: DatasetHandle, batch_size: int = 1024, top: int = 5) -> dict:
        """Dense inference; precision@1 and precision@``top``."""
        hit1, hitk, n = 0, 0.0, 0
        for batch in batches(data, batch_size, None):
            scores = self.predict_scores(batch)
            order = np.argsort(-scores, axis=1, kind="stable")[:, :top]
            for s in range(len(batch)):
                labs = set(batch.labels(s).tolist())
                hit1 += order[s, 0] in labs
                hitk += len(labs.intersection(order[s].tolist())) / top
            n += len(batch)
        return {"precision@1": hit1 / max(n, 1), f"precision@{top}": hitk / max(n, 1),
                "samples": n}

    # -- checkpoints -------------------------------------------------------
    def save(self, directory: str | Path):
        ckpt.save_node(directory, self.network, self.cfg, self.plan, self.rank, self.shards,
                       epoch=self.epoch, batches_done=self.batches_done,
                       rebuilds=self.rebuilds, regen=self.regen)

    @classmethod
    def from_checkpoint(cls, directory: str | Path, endpoint: Endpoint,
                        cfg: TrainingConfig | None = None, **kw) -> "Trainer":
        manifest = ckpt.read_manifest(directory)
        network = NetworkSpec.from_dict(manifest["network"])
        cfg = cfg or TrainingConfig.from_dict(manifest["training"])
        if manifest["nodes"] != endpoint.size:
            shards = [ckpt.merged_shard_for(directory, manifest, k,
                                            *ShardPlan.build(network, endpoint.size)
                                            .range_of(k, endpoint.rank), endpoint.rank)
                      for k in range(len(network.layers))]
        else:
            shards = [ckpt.load_shard(Path(directory) / ckpt.shard_filename(k, endpoint.rank))[0]
                      for k in range(len(network.layers))]
        t = cls(network, cfg, endpoint, shards=shards, **kw)
        t.epoch = manifest.get("epoch", 0)
        t.batches_done = manifest.get("batches_done", 0)
        t.rebuilds = manifest.get("rebuilds", 0)
        t.regen = list(manifest.get("regen", t.regen))
        t.indices = [t._build_index(k) for k in range(len(network.layers))]
        return t


def train(network: NetworkSpec, data: DatasetHandle, cfg: TrainingConfig, endpoint: Endpoint,
          **fit_kw) -> tuple[Trainer, list[float]]:
    trainer = Trainer(network, cfg, endpoint)
    losses = trainer.fit(data, **fit_kw)
    return trainer, losses


def evaluate(trainer: Trainer, data: DatasetHandle, **kw) -> dict:
    return trainer.evaluate(data, **kw)


def dense_baseline_config(cfg: TrainingConfig) -> TrainingConfig:
    return replace(cfg, mode=Mode.DENSE_BASELINE)


class MetricsWriter:
    """Append-only JSON-lines metrics sink."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def __call__(self, row: dict):
        self._fh.write(json.dumps(row, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()
