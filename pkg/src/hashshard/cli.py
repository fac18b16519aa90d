"""Command-line entry point: ``hashshard <command> ...``.

Exit codes: 0 ok, 2 configuration / checkpoint / dataset problems, 3
transport failures, 4 non-finite numerics.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt
from .config import RunConfig, load_config
from .dataset import DatasetError, batches, parse_xc, synth_clustered_split, write_xc
from .engine import ConfigError, MetricsWriter, Mode, Trainer, _hash_seed
from .layer import NonFiniteError
from .lsh import build_index
from .sparse import InputError
from .transport import LoopbackCluster, ProtocolError, TcpEndpoint, TransportError

log = logging.getLogger("hashshard")

EXIT_OK, EXIT_CONFIG, EXIT_TRANSPORT, EXIT_NUMERIC = 0, 2, 3, 4


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(obj) + "\n", encoding="utf-8")


def load_data(cfg: RunConfig):
    """Training and (optional) test sets named by the config."""
    d = cfg.data
    if d.train is not None:
        train = parse_xc(d.train, require_labels=True)
        test = parse_xc(d.test, require_labels=True) if d.test else None
    else:
        s = d.synth
        train, test = synth_clustered_split(s["classes"], s["features"], s["per_class"],
                                            s.get("sigma", 0.1), s.get("seed", 0),
                                            test_per_class=s.get("test_per_class", 1))
    net = cfg.network
    for name, h in (("train", train), ("test", test)):
        if h is None:
            continue
        if h.header.feature_dim != net.layers[0].in_dim:
            raise ConfigError(f"data.{name}: feature_dim {h.header.feature_dim} != network "
                              f"input dim {net.layers[0].in_dim}")
        if h.header.label_dim != net.layers[-1].out_dim:
            raise ConfigError(f"data.{name}: label_dim {h.header.label_dim} != network "
                              f"output dim {net.layers[-1].out_dim}")
    return train, test


def run_nodes(cfg: RunConfig, node_id: int, fn):
    """Run ``fn(endpoint)`` on every local node; returns results in rank order.

    Loopback runs the whole cluster in this process. TCP runs only ``node_id``.
    """
    c = cfg.cluster
    if c.transport == "loopback":
        return LoopbackCluster(c.nodes, scheduler_seed=c.scheduler_seed,
                               timeout=c.timeout).run(fn)
    if not 0 <= node_id < c.nodes:
        raise ConfigError(f"--node-id: {node_id} outside [0, {c.nodes})")
    ep = TcpEndpoint(node_id, c.addresses(), timeout=c.timeout)
    try:
        return [fn(ep)]
    finally:
        ep.close()


def _check_manifest(manifest: dict, cfg: RunConfig):
    if manifest["network"] != cfg.network.to_dict():
        raise ConfigError("--checkpoint: network in checkpoint does not match the config")


# -- commands ----------------------------------------------------------------
def cmd_train(cfg: RunConfig, node_id: int = 0) -> dict:
    train, test = load_data(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck_dir = out / "checkpoint"

    def node(ep):
        mpath = out / f"metrics-node{ep.rank}.jsonl"
        mpath.unlink(missing_ok=True)
        writer = MetricsWriter(mpath)
        try:
            trainer = Trainer(cfg.network, cfg.training, ep)
            losses = trainer.fit(train, metrics=writer, checkpoint_dir=ck_dir)
            ev = trainer.evaluate(test) if test is not None else {}
        finally:
            writer.close()
        return {"rank": ep.rank, "losses": losses, "eval": ev,
                "bytes": {k: v["payload"] for k, v in ep.stats.snapshot()["by_phase"].items()}}

    results = run_nodes(cfg, node_id, node)
    first = results[0]
    summary = {"nodes": cfg.cluster.nodes, "mode": cfg.training.mode.value,
               "epochs": len(first["losses"]), "epoch_loss": first["losses"],
               "final_loss": first["losses"][-1] if first["losses"] else None,
               "bytes_by_phase": first["bytes"], **first["eval"]}
    summary["summary_sha256"] = hashlib.sha256(_dump(summary).encode()).hexdigest()
    if first["rank"] == 0:
        _write_json(out / "summary.json", summary)
    return summary


def cmd_eval(cfg: RunConfig, checkpoint: str) -> dict:
    manifest = ckpt.read_manifest(checkpoint)
    _check_manifest(manifest, cfg)
    train, test = load_data(cfg)
    data = test if test is not None else train
    # evaluation is a single-node dense pass over the merged shards
    ep = LoopbackCluster(1).endpoints[0]
    trainer = Trainer.from_checkpoint(checkpoint, ep)
    report = trainer.evaluate(data)
    report["checkpoint"] = str(checkpoint)
    _write_json(Path(cfg.output_dir) / "eval.json", report)
    return report


def _bench_mode(cfg: RunConfig, train, mode: Mode, B: int, n_batches: int) -> dict:
    tcfg = replace(cfg.training, mode=mode, batch_size=B)

    def node(ep):
        t = Trainer(cfg.network, tcfg, ep)
        done = 0
        for b, batch in enumerate(batches(train, B, None)):
            if done == n_batches:
                break
            t.train_batch(batch, 0, b)
            done += 1
        return done, ep.stats.snapshot()

    res = LoopbackCluster(cfg.cluster.nodes, scheduler_seed=cfg.cluster.scheduler_seed,
                          timeout=cfg.cluster.timeout).run(node)
    done = res[0][0]
    if done == 0:
        raise ConfigError("bench.batches: dataset yields no batches")
    snap = res[0][1]
    per = {k: v["payload"] / done for k, v in snap["by_phase"].items()}
    return {"batches": done,
            "bytes_per_batch": per,
            "forward_gather_by_layer": {k.split("/")[1]: v["payload"] / done
                                        for k, v in snap["by_layer"].items()
                                        if k.startswith("forward_gather/")},
            "total_bytes_per_batch": sum(per.values()),
            "max_node_received_per_batch": max(s["bytes_received"] for _, s in res) / done}


def cmd_bench_comm(cfg: RunConfig, bandwidths: list[float]) -> dict:
    train, _ = load_data(cfg)
    B = cfg.bench.batch_size or cfg.training.batch_size
    sparse = _bench_mode(cfg, train, Mode.SPARSE, B, cfg.bench.batches)
    dense = _bench_mode(cfg, train, Mode.DENSE_BASELINE, B, cfg.bench.batches)
    fg = "forward_gather"
    ratio = sparse["bytes_per_batch"][fg] / dense["bytes_per_batch"][fg]
    ratio_total = sparse["total_bytes_per_batch"] / dense["total_bytes_per_batch"]
    proj = []
    for gbps in bandwidths:
        bps = gbps * 1e9 / 8
        proj.append({"gbps": gbps,
                     "sparse_seconds_per_batch": sparse["max_node_received_per_batch"] / bps,
                     "dense_seconds_per_batch": dense["max_node_received_per_batch"] / bps})
    return {"nodes": cfg.cluster.nodes, "batch_size": B, "SPARSE": sparse,
            "DENSE_BASELINE": dense, "forward_gather_ratio": ratio,
            "total_ratio": ratio_total, "forward_gather_compression": 1.0 - ratio,
            "projection": proj}


def cmd_inspect_tables(cfg: RunConfig, checkpoint: str) -> dict:
    manifest = ckpt.read_manifest(checkpoint)
    _check_manifest(manifest, cfg)
    net = cfg.network
    regen = manifest.get("regen", [0] * len(net.layers))
    layers = []
    for k, spec in enumerate(net.layers):
        if spec.is_dense:
            continue
        seed = _hash_seed(net, spec, k, regen[k])
        shards = []
        for shard in ckpt.load_layer(checkpoint, manifest, k):
            idx = build_index(shard.weights, shard.shard_id, spec.lsh, hash_seed=seed)
            shards.append({"node": shard.shard_id, "neurons": shard.local_count,
                           "tables": idx.stats()})
        layers.append({"layer": k, "family": spec.lsh.family.value,
                       "hashes_per_table": spec.lsh.hashes_per_table, "shards": shards})
    report = {"checkpoint": str(checkpoint), "layers": layers}
    _write_json(Path(cfg.output_dir) / "tables.json", report)
    return report


def cmd_synth(classes: int, features: int, per_class: int, out: str, *, sigma: float = 0.1,
              seed: int = 0, test_out: str | None = None, test_per_class: int = 1) -> dict:
    train, test = synth_clustered_split(classes, features, per_class, sigma, seed,
                                        test_per_class=test_per_class if test_out else 0)
    write_xc(train, out)
    if test_out:
        write_xc(test, test_out)
    return {"train": out, "points": len(train), "test": test_out,
            "test_points": len(test) if test is not None else 0}


# -- argument parsing ----------------------------------------------------------
def _floats(s: str) -> list[float]:
    try:
        vals = [float(x) for x in s.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {s}") from exc
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("bandwidths must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hashshard", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train (all loopback nodes, or one tcp node)")
    t.add_argument("--config", required=True)
    t.add_argument("--node-id", type=int, default=0)

    e = sub.add_parser("eval", help="precision@1/@5 of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)

    b = sub.add_parser("bench-comm", help="sparse vs dense-baseline traffic")
    b.add_argument("--config", required=True)
    b.add_argument("--bandwidth-gbps", type=_floats, default=[1.0, 100.0])

    i = sub.add_parser("inspect-tables", help="hash-table occupancy report")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--config", required=True)

    s = sub.add_parser("synth", help="write a synthetic clustered dataset")
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--features", type=int, required=True)
    s.add_argument("--per-class", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--sigma", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--test-out")
    s.add_argument("--test-per-class", type=int, default=1)
    return p


def _run(args) -> dict:
    if args.command == "synth":
        return cmd_synth(args.classes, args.features, args.per_class, args.out,
                         sigma=args.sigma, seed=args.seed, test_out=args.test_out,
                         test_per_class=args.test_per_class)
    cfg = load_config(args.config)
    if args.command == "train":
        return cmd_train(cfg, args.node_id)
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoint)
    if args.command == "bench-comm":
        rep = cmd_bench_comm(cfg, args.bandwidth_gbps)
        print(f"forward-gather compression: {100 * rep['forward_gather_compression']:.1f}% "
              f"(sparse/dense = {rep['forward_gather_ratio']:.4f})", file=sys.stderr)
        _write_json(Path(cfg.output_dir) / "bench-comm.json", rep)
        return rep
    return cmd_inspect_tables(cfg, args.checkpoint)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args)
    except (ConfigError, ckpt.CheckpointError, DatasetError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TransportError, ProtocolError) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except NonFiniteError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(_dump(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
