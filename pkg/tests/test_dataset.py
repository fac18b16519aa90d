from collections import Counter

import numpy as np
import pytest

from hashshard.dataset import (DatasetError, batches, parse_xc, synth_clustered,
                               synth_clustered_split, write_xc)


def _write(tmp_path, text, name="d.txt"):
    p = tmp_path / name
    p.write_bytes(text.encode())
    return p


def test_parse_basic(tmp_path):
    p = _write(tmp_path, "3 10 5\n1,3 0:1.5 4:2\n0 9:0.25\n 2:1\n")
    d = parse_xc(p)
    assert len(d) == 3
    assert d.labels(0).tolist() == [1, 3]
    assert d.labels(2).tolist() == []
    idx, val = d.features.row(0)
    assert idx.tolist() == [0, 4] and val.tolist() == [1.5, 2.0]
    assert d.features.values.dtype == np.float32


def test_parse_crlf_and_unsorted_features(tmp_path):
    p = _write(tmp_path, "1 10 5\r\n2 7:1 3:2\r\n")
    idx, val = parse_xc(p).features.row(0)
    assert idx.tolist() == [3, 7] and val.tolist() == [2.0, 1.0]


def test_zero_feature_record_is_kept(tmp_path):
    d = parse_xc(_write(tmp_path, "2 4 3\n1\n2 0:1\n"))
    assert d.features.counts().tolist() == [0, 1]


@pytest.mark.parametrize("text, kind, line", [
    ("", "missing header", 1),
    ("2 x 3\n", "non-numeric header field", 1),
    ("1 4 3\n5 0:1\n", "label out of range", 2),
    ("1 4 3\n1 4:1\n", "feature index out of range", 2),
    ("1 4 3\n1 0:1 0:2\n", "duplicate feature index", 2),
    ("1 4 3\n1 0:abc\n", "non-numeric feature value", 2),
    ("1 4 3\n1 01\n", "malformed feature", 2),
    ("3 4 3\n1 0:1\n", "record count mismatch", None),
    ("1 4 3\n1 0:1\n2 1:1\n", "more records than header num_points", 3),
])
def test_parse_errors(tmp_path, text, kind, line):
    with pytest.raises(DatasetError) as e:
        parse_xc(_write(tmp_path, text))
    assert e.value.kind == kind
    assert e.value.line == line


def test_require_labels(tmp_path):
    with pytest.raises(DatasetError, match="labels empty"):
        parse_xc(_write(tmp_path, "1 4 3\n 0:1\n"), require_labels=True)


def _multiset(d):
    return Counter((tuple(d.labels(i).tolist()), tuple(d.features.row(i)[0].tolist()),
                    tuple(d.features.row(i)[1].tolist())) for i in range(len(d)))


def test_write_parse_round_trip(tmp_path):
    d = synth_clustered(20, 60, 3, 0.1, seed=1)
    write_xc(d, tmp_path / "a.txt")
    back = parse_xc(tmp_path / "a.txt")
    assert back.header == d.header
    assert _multiset(back) == _multiset(d)
    write_xc(back, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_batches_cover_every_record_once(small_data):
    seen = []
    for b in batches(small_data, 25, shuffle_seed=4):
        assert 1 <= len(b) <= 25
        seen.extend(b.record_ids.tolist())
        for s in range(len(b)):
            r = int(b.record_ids[s])
            assert b.labels(s).tolist() == small_data.labels(r).tolist()
            np.testing.assert_array_equal(b.features.row(s)[0], small_data.features.row(r)[0])
    assert sorted(seen) == list(range(len(small_data)))
    sizes = [len(b) for b in batches(small_data, 25)]
    assert sizes == [25, 25, 25, 21]


def test_batch_order_is_seeded(small_data):
    a = [b.record_ids.tolist() for b in batches(small_data, 10, 7)]
    b = [b.record_ids.tolist() for b in batches(small_data, 10, 7)]
    c = [b.record_ids.tolist() for b in batches(small_data, 10, 8)]
    assert a == b and a != c


def test_synthetic_shape_and_determinism():
    tr, te = synth_clustered_split(50, 200, 4, 0.1, seed=2, test_per_class=2)
    assert len(tr) == 200 and len(te) == 100
    tr.validate()
    te.validate()
    again, _ = synth_clustered_split(50, 200, 4, 0.1, seed=2, test_per_class=2)
    np.testing.assert_array_equal(tr.features.values, again.features.values)
    assert np.bincount(tr.label_ids).tolist() == [4] * 50
