import json
import struct
import threading
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hashshard.layer import LayerSnapshot
from hashshard.transport import (LoopbackCluster, PayloadKind, Phase, ProtocolError, TcpEndpoint,
                                 TransportError)
from hashshard.transport.conformance import make_script, run_loopback
from hashshard.transport.tcp import free_ports
from hashshard.transport.wire import (decode_dense, decode_sparse, encode_dense, encode_sparse,
                                      merge_shards, snapshot_sync, sparse_payload_size)


@st.composite
def packed(draw):
    counts = draw(st.lists(st.integers(0, 6), min_size=1, max_size=8))
    off = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    ids = np.array(draw(st.lists(st.integers(0, 2 ** 31 - 1), min_size=int(off[-1]),
                                 max_size=int(off[-1]))), dtype=np.int32)
    vals = np.array(draw(st.lists(st.floats(allow_nan=False, width=32), min_size=int(off[-1]),
                                  max_size=int(off[-1]))), dtype=np.float32)
    return off, ids, vals


@given(packed(), st.sampled_from([np.float32, np.float64]))
def test_sparse_wire_round_trip(p, dtype):
    off, ids, vals = p
    buf = encode_sparse(off, ids, vals.astype(dtype), dtype)
    assert len(buf) == sparse_payload_size(np.diff(off), dtype)
    o2, i2, v2 = decode_sparse(buf, dtype)
    np.testing.assert_array_equal(o2, off)
    np.testing.assert_array_equal(i2, ids)
    np.testing.assert_array_equal(v2, vals.astype(dtype))


def test_sparse_wire_layout_is_little_endian_records():
    off = np.array([0, 2, 2, 3])
    buf = encode_sparse(off, np.array([5, 9, 1]), np.array([1.5, -2.0, 0.25]), np.float32)
    want = (struct.pack("<I2I2f", 2, 5, 9, 1.5, -2.0) + struct.pack("<I", 0)
            + struct.pack("<IIf", 1, 1, 0.25))
    assert buf == want


def test_truncated_payloads_raise_protocol_errors():
    buf = encode_sparse(np.array([0, 2]), np.array([1, 2]), np.array([1.0, 2.0]))
    with pytest.raises(ProtocolError, match="body"):
        decode_sparse(buf[:-1])
    with pytest.raises(ProtocolError, match="header"):
        decode_sparse(buf + b"\x01")
    with pytest.raises(ProtocolError, match="dense snapshot"):
        decode_dense(encode_dense(np.ones(5)), 2, 3)


def test_merge_keeps_ids_sorted_per_sample():
    a = (np.array([0, 1, 3]), np.array([0, 1, 2], np.int32), np.array([1., 2., 3.]))
    b = (np.array([0, 2, 2]), np.array([5, 7], np.int32), np.array([4., 5.]))
    m = merge_shards([a, b], 8, np.float64)
    assert m.offsets.tolist() == [0, 3, 5]
    assert m.ids.tolist() == [0, 5, 7, 1, 2]
    assert m.activations.tolist() == [1, 4, 5, 2, 3]
    assert m.shard_counts.tolist() == [[1, 2], [2, 0]]
    with pytest.raises(ProtocolError, match="rank 1"):
        merge_shards([a, (np.array([0, 1]), b[1][:1], b[2][:1])], 8, np.float64)


def _partial(rank, n_samples, lo, hi, seed, dense=False):
    rng = np.random.default_rng([seed, rank])
    if dense:
        counts = np.full(n_samples, hi - lo)
        ids = np.tile(np.arange(lo, hi), n_samples)
    else:
        counts = rng.integers(0, hi - lo + 1, n_samples)
        ids = np.concatenate([np.sort(rng.choice(np.arange(lo, hi), c, replace=False))
                              for c in counts])
    off = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return LayerSnapshot(off, ids.astype(np.int32), rng.standard_normal(ids.size).astype(
        np.float32), -1, counts[None, :], dense=dense)


@pytest.mark.parametrize("dense", [False, True])
def test_snapshot_sync_replicates_and_counts_bytes(dense):
    ranges = [(0, 4), (4, 7), (7, 10)]

    def node(ep):
        p = _partial(ep.rank, 5, *ranges[ep.rank], seed=1, dense=dense)
        g = snapshot_sync(ep, p, width=10, ranges=ranges, layer=2)
        g.check()
        return g, p, ep.stats.snapshot()

    res = LoopbackCluster(3).run(node)
    g0 = res[0][0]
    for g, _, _ in res[1:]:
        for f in ("offsets", "ids", "activations", "shard_counts"):
            np.testing.assert_array_equal(getattr(g, f), getattr(g0, f))
    for s in range(5):
        want = []
        for _, p, _ in res:
            i, v, _ = p.sample(s)
            want += list(zip(i.tolist(), v.tolist()))
        got = list(zip(*g0.sample(s)[:2]))
        assert [(int(a), float(b)) for a, b in got] == want
    sizes = [sparse_payload_size(p.counts()) if not dense else p.ids.size * 4 for _, p, _ in res]
    for r, (_, _, st_) in enumerate(res):
        ph = st_["by_phase"]["forward_gather"]
        assert ph["sent"] == sizes[r]
        assert ph["received"] == sum(sizes) - sizes[r]
        assert ph["payload"] == sum(sizes)
        assert st_["by_layer"]["forward_gather/2"]["payload"] == sum(sizes)
        assert st_["by_kind"] == {"activations": sizes[r]}


def test_all_reduce_is_rank_ordered_and_deterministic():
    vals = [np.array([1e16, 1.0, 3.0]), np.array([1.0, -1e16, 2.0]), np.array([-1e16, 1e16, 1])]

    def node(ep):
        return ep.all_reduce_sum(vals[ep.rank], kind=PayloadKind.INPUT_ERRORS)

    for seed in range(3):
        out = LoopbackCluster(3, scheduler_seed=seed, jitter=0.002).run(node)
        want = (vals[0] + vals[1]) + vals[2]
        for o in out:
            np.testing.assert_array_equal(o, want)


def test_mismatched_collectives_raise_protocol_error():
    def node(ep):
        if ep.rank == 0:
            return ep.all_gather_var(b"x")
        return ep.all_reduce_sum(np.ones(2))

    with pytest.raises(ProtocolError, match="called"):
        LoopbackCluster(2, timeout=5).run(node)


def test_shape_mismatch_in_reduce():
    def node(ep):
        return ep.all_reduce_sum(np.ones(2 + ep.rank))

    with pytest.raises(ProtocolError, match="rank 1"):
        LoopbackCluster(2, timeout=5).run(node)


def test_missing_rank_times_out_with_rank_id():
    def node(ep):
        if ep.rank == 1:
            return None
        return ep.all_gather_var(b"x")

    with pytest.raises(TransportError) as e:
        LoopbackCluster(2, timeout=0.3).run(node)
    assert e.value.rank == 1


def test_one_collective_in_flight_per_endpoint():
    cluster = LoopbackCluster(2, timeout=2)
    ep = cluster.endpoints[0]
    errors = []
    started = threading.Event()

    def first():
        started.set()
        try:
            ep.all_gather_var(b"a")
        except TransportError:
            pass

    t = threading.Thread(target=first)
    t.start()
    started.wait()
    time.sleep(0.1)
    try:
        ep.all_gather_var(b"b")
    except ProtocolError as exc:
        errors.append(exc)
    t.join()
    assert errors and "concurrent" in str(errors[0])


def test_stats_json_and_diff():
    def node(ep):
        ep.all_gather_var(b"abc", phase=Phase.EVAL)
        before = ep.stats.snapshot()
        ep.all_reduce_sum(np.ones(4, np.float32), phase=Phase.GRAD_REDUCE, layer=1)
        return ep.stats.diff(before), ep.stats.to_json()

    (d, js), _ = LoopbackCluster(2).run(node)
    assert d["collective_calls"] == 1
    assert d["by_phase"] == {"grad_reduce": {"sent": 16, "received": 16, "payload": 32,
                                             "calls": 1}}
    assert json.loads(js)["by_phase"]["eval"]["payload"] == 6


def _tcp_cluster(n, fn, timeout=10.0):
    addrs = [("127.0.0.1", p) for p in free_ports(n)]
    out, errs = [None] * n, [None] * n

    def work(r):
        try:
            ep = TcpEndpoint(r, addrs, timeout=timeout)
            try:
                out[r] = fn(ep)
            finally:
                ep.close()
        except Exception as exc:  # noqa: BLE001
            errs[r] = exc

    ts = [threading.Thread(target=work, args=(r,)) for r in range(n)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    return out, errs


def test_tcp_collectives_in_threads():
    def fn(ep):
        g = ep.all_gather_var(bytes([ep.rank]) * (ep.rank + 1))
        ep.barrier()
        r = ep.all_reduce_sum(np.arange(3, dtype=np.float32) * (ep.rank + 1))
        return g, r, ep.stats.snapshot()

    out, errs = _tcp_cluster(3, fn)
    assert errs == [None] * 3
    for g, r, _ in out:
        assert g == [b"\x00", b"\x01\x01", b"\x02\x02\x02"]
        np.testing.assert_array_equal(r, np.arange(3, dtype=np.float32) * 6)
    assert out[1][2]["by_phase"]["other"]["payload"] == 6 + 12 * 3


def test_tcp_peer_disconnect_is_a_transport_error():
    def fn(ep):
        if ep.rank == 1:
            return None
        return ep.all_gather_var(b"x")

    _, errs = _tcp_cluster(2, fn, timeout=3.0)
    assert isinstance(errs[0], TransportError)
    assert errs[0].rank == 1


def test_loopback_scripts_are_deterministic():
    script = make_script(3, 20)
    a = run_loopback(script, 3, scheduler_seed=0)
    b = run_loopback(script, 3, scheduler_seed=9)
    assert [r["digests"] for r in a] == [r["digests"] for r in b]
    assert [r["stats"] for r in a] == [r["stats"] for r in b]


def test_forward_gather_bytes_for_a_fixed_budget():
    # 16 samples, 32 active per shard, 2 shards: each shard sends 16 x (count + 32 x (id, f32))
    ranges = [(0, 64), (64, 128)]

    def node(ep):
        lo, hi = ranges[ep.rank]
        ids = np.tile(np.arange(lo, lo + 32, dtype=np.int32), 16)
        p = LayerSnapshot(np.arange(17, dtype=np.int64) * 32, ids,
                          np.ones(ids.size, np.float32), -1, np.full((1, 16), 32))
        snapshot_sync(ep, p, width=128, ranges=ranges, layer=0)
        return ep.stats.phase_payload(Phase.FORWARD_GATHER)

    assert LoopbackCluster(2).run(node) == [8320, 8320]
