"""Declarative run configuration (one JSON document) with env overrides.

Any key can be overridden with ``HASHSHARD_<PATH>`` where nested keys are
joined by a double underscore, e.g. ``HASHSHARD_TRAINING__EPOCHS=3`` or
``HASHSHARD_NETWORK__LAYERS__1__SPARSITY=0.1``. Override values are parsed
as JSON when possible and kept as strings otherwise.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .engine import ConfigError, NetworkSpec, ShardPlan, TrainingConfig
from .sparse import InputError

CONFIG_VERSION = 1
ENV_PREFIX = "HASHSHARD_"


@dataclass(frozen=True)
class ClusterConfig:
    transport: str = "loopback"
    nodes: int = 1
    peers: tuple[str, ...] = ()
    timeout: float = 30.0
    scheduler_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "peers", tuple(self.peers))
        if self.transport not in ("loopback", "tcp"):
            raise ConfigError(f"cluster.transport: unknown transport {self.transport!r}")
        if self.transport == "tcp":
            if len(self.peers) < 1:
                raise ConfigError("cluster.peers: tcp transport needs a peer list")
            object.__setattr__(self, "nodes", len(self.peers))
            for p in self.peers:
                host, _, port = p.rpartition(":")
                if not host or not port.isdigit():
                    raise ConfigError(f"cluster.peers: {p!r} is not host:port")
        if self.nodes < 1:
            raise ConfigError("cluster.nodes: must be >= 1")
        if self.timeout <= 0:
            raise ConfigError("cluster.timeout: must be > 0")

    def addresses(self) -> list[tuple[str, int]]:
        out = []
        for p in self.peers:
            host, _, port = p.rpartition(":")
            out.append((host, int(port)))
        return out

    def to_dict(self) -> dict:
        d = {"transport": self.transport, "nodes": self.nodes, "timeout": self.timeout,
             "scheduler_seed": self.scheduler_seed}
        if self.peers:
            d["peers"] = list(self.peers)
        return d


@dataclass(frozen=True)
class DataConfig:
    train: str | None = None
    test: str | None = None
    synth: dict | None = None

    def __post_init__(self):
        if self.train is None and self.synth is None:
            raise ConfigError("data.train: a dataset path or a data.synth block is required")
        if self.synth is not None:
            missing = {"classes", "features", "per_class"} - set(self.synth)
            if missing:
                raise ConfigError(f"data.synth.{sorted(missing)[0]}: required")
        for name in ("train", "test"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"data.{name}: no such file {path!r}")

    def to_dict(self) -> dict:
        return {k: v for k, v in (("train", self.train), ("test", self.test),
                                  ("synth", self.synth)) if v is not None}


@dataclass(frozen=True)
class BenchConfig:
    batches: int = 4
    batch_size: int | None = None

    def to_dict(self) -> dict:
        d = {"batches": self.batches}
        if self.batch_size is not None:
            d["batch_size"] = self.batch_size
        return d


@dataclass(frozen=True)
class RunConfig:
    network: NetworkSpec
    training: TrainingConfig
    data: DataConfig
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    output_dir: str = "run"
    bench: BenchConfig = field(default_factory=BenchConfig)
    version: int = CONFIG_VERSION

    def validate(self):
        """Cross-field checks that must hold before any compute starts."""
        n = self.cluster.nodes
        plan = ShardPlan.build(self.network, n) if all(
            l.out_dim >= n for l in self.network.layers) else None
        if plan is None:
            raise ConfigError(f"network.layers: every layer needs at least {n} neurons")
        for k, spec in enumerate(self.network.layers):
            smallest = min(hi - lo for lo, hi in plan.ranges(k))
            if spec.shard_budget(n) > smallest and not spec.is_dense:
                raise ConfigError(f"network.layers.{k}: per-shard budget "
                                  f"{spec.shard_budget(n)} exceeds shard size {smallest}")
        s = self.data.synth
        if s is not None:
            if s["features"] != self.network.layers[0].in_dim:
                raise ConfigError("data.synth.features: does not match network input dim")
            if s["classes"] != self.network.layers[-1].out_dim:
                raise ConfigError("data.synth.classes: does not match network output dim")
        return self

    def to_dict(self) -> dict:
        return {"version": self.version, "network": self.network.to_dict(),
                "training": self.training.to_dict(), "data": self.data.to_dict(),
                "cluster": self.cluster.to_dict(), "output_dir": self.output_dir,
                "bench": self.bench.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        if "version" not in d:
            raise ConfigError("version: required field is missing")
        if d["version"] != CONFIG_VERSION:
            raise ConfigError(f"version: unsupported config version {d['version']!r}")
        unknown = set(d) - {"version", "network", "training", "data", "cluster", "output_dir",
                            "bench"}
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown top-level key")
        for key in ("network", "data"):
            if key not in d:
                raise ConfigError(f"{key}: required field is missing")
        try:
            network = NetworkSpec.from_dict(d["network"])
            training = TrainingConfig.from_dict(d.get("training", {}))
            data = DataConfig(**d["data"])
            cluster = ClusterConfig(**d.get("cluster", {}))
            bench = BenchConfig(**d.get("bench", {}))
        except (TypeError, KeyError, InputError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config: {exc}") from exc
        return cls(network, training, data, cluster, d.get("output_dir", "run"), bench,
                   d["version"]).validate()


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env_overrides(d: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    d = copy.deepcopy(d)
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in name[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        node = d
        for i, key in enumerate(path):
            last = i == len(path) - 1
            if isinstance(node, list):
                if not key.isdigit() or int(key) >= len(node):
                    raise ConfigError(f"{name}: list index {key!r} out of range")
                key = int(key)
            if last:
                node[key] = _parse_env_value(environ[name])
            else:
                if isinstance(node, dict) and key not in node:
                    node[key] = {}
                node = node[key]
    return d


def load_config(path: str | Path, environ=None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"--config: no such file {str(path)!r}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--config: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("--config: top level must be an object")
    return RunConfig.from_dict(apply_env_overrides(raw, environ))
