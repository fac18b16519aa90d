"""Compiled kernels vs the numpy fallback, one row per kernel.

    python benchmarks/bench_kernels.py [--repeat 3] [--json out.json]

Sizes mimic one node's output-layer shard in the desk-scale learning run:
2,500 local neurons, a 256-wide dense hidden input, 125 active neurons per
sample and 256 samples per batch.
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from hashshard.kernels import compiled_available, get_backend
from hashshard.lsh import DwtaFamily, LshConfig, SrpFamily, build_index


def _setup(seed=0, samples=256, width=2500, dim=256, active=125):
    rng = np.random.default_rng(seed)
    W = (rng.standard_normal((width, dim)) * 0.05).astype(np.float32)
    b = np.zeros(width, np.float32)
    in_off = np.arange(samples + 1, dtype=np.int64) * dim
    in_idx = np.tile(np.arange(dim, dtype=np.int32), samples)
    in_val = rng.random(samples * dim).astype(np.float32)
    act_off = np.arange(samples + 1, dtype=np.int64) * active
    act_loc = np.concatenate([np.sort(rng.choice(width, active, replace=False))
                              for _ in range(samples)]).astype(np.int32)
    err = rng.standard_normal(act_loc.size).astype(np.float32)
    srp = SrpFamily.generate(LshConfig(), dim, seed)
    dwta = DwtaFamily.generate(LshConfig(family="DWTA"), dim, seed)
    index = build_index(W, 0, LshConfig(), hash_seed=seed)
    return dict(W=W, b=b, in_off=in_off, in_idx=in_idx, in_val=in_val, act_off=act_off,
                act_loc=act_loc, err=err, srp=srp, dwta=dwta, index=index, samples=samples)


def _cases(K, d):
    W, b, n = d["W"], d["b"], d["samples"]
    w_off = np.arange(W.shape[0] + 1, dtype=np.int64) * W.shape[1]
    w_idx = np.tile(np.arange(W.shape[1], dtype=np.int32), W.shape[0])
    w_val = W.reshape(-1)
    srp, dwta, idx = d["srp"], d["dwta"], d["index"]
    c = dwta.config

    def fwd():
        out = np.zeros(d["act_loc"].size, np.float32)
        K.forward(d["in_off"], d["in_idx"], d["in_val"], W, b, d["act_off"], d["act_loc"],
                  True, out, 0, n)

    def bwd():
        gW, gb = np.zeros_like(W), np.zeros_like(b)
        tW, tb = np.zeros(W.shape, np.uint8), np.zeros(b.size, np.uint8)
        ie = np.zeros(d["in_idx"].size, np.float32)
        K.backward(d["in_off"], d["in_idx"], d["in_val"], W, d["act_off"], d["act_loc"],
                   d["err"], gW, gb, tW, tb, ie, True, 0, n)
        return gW, gb, tW, tb

    grads = bwd()

    def adam():
        gW, gb, tW, tb = (a.copy() for a in grads)
        z = lambda a: np.zeros_like(a)  # noqa: E731
        K.adam(W.copy(), b.copy(), z(W), z(W), z(b), z(b), gW, gb, tW, tb,
               1e-3, 0.9, 0.999, 1e-8, 1)

    def srp_rows():
        K.srp_hash(w_off, w_idx, w_val, srp.planes, srp.config.hashes_per_table,
                   srp.config.num_tables)

    def dwta_rows():
        K.dwta_hash(w_off, w_idx, w_val, dwta.windows, dwta.dim, c.hashes_per_table,
                    c.num_tables, c.bin_size, c.bits_per_hash)

    codes = K.srp_hash(d["in_off"], d["in_idx"], d["in_val"], srp.planes,
                       idx.config.hashes_per_table, idx.config.num_tables)
    no_off = np.zeros(n + 1, np.int64)
    no_ids = np.zeros(0, np.int32)
    ix = (codes, idx.bucket_keys, idx.table_offsets, idx.bucket_ptr, idx.ids, idx.size,
          no_off, no_ids)

    def select():
        counts, _ = K.candidate_counts(*ix)
        budget = 125
        draws = np.where(counts > budget, counts - budget, budget - counts)
        u_off = np.concatenate([[0], np.cumsum(draws)]).astype(np.int64)
        out_off = np.arange(n + 1, dtype=np.int64) * budget
        out = np.zeros(int(out_off[-1]), np.int32)
        K.select_fill(*ix, budget, True, np.random.default_rng(0).random(int(u_off[-1])),
                      u_off, out_off, out)

    return {"forward": fwd, "backward": bwd, "adam": adam, "srp_hash": srp_rows,
            "dwta_hash": dwta_rows, "select": select}


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)
    if not compiled_available():
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")
    # the index is built with the default backend; identical either way
    d = _setup()
    backends = {name: _cases(get_backend(name), d) for name in ("python", "cython")}
    rows = []
    print(f"{'kernel':<10} {'numpy (ms)':>12} {'cython (ms)':>12} {'speedup':>9}")
    for name in backends["python"]:
        py = _best(backends["python"][name], args.repeat)
        cy = _best(backends["cython"][name], args.repeat)
        rows.append({"kernel": name, "python_s": py, "cython_s": cy, "speedup": py / cy})
        print(f"{name:<10} {py * 1e3:>12.2f} {cy * 1e3:>12.2f} {py / cy:>8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
