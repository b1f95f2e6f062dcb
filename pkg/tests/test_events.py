import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stdiffusion.events import (
    Dataset,
    DatasetFormatError,
    EventSequence,
    SpaceSpec,
    compute_stats,
    denormalize,
    intervals,
    load_dataset,
    normalize,
    read_sequences,
    save_dataset,
)


def seq(times, space=None, start=0.0, sid=0):
    times = np.asarray(times, dtype=float)
    if space is None:
        space = np.zeros((len(times), 2))
    return EventSequence(times, np.asarray(space), start, None, sid)


@pytest.mark.parametrize(
    "times,start,expected",
    [([1, 3, 6], 0.0, [1, 2, 3]), ([5], 5.0, [0]), ([0.5, 0.5], 0.0, [0.5, 0.0])],
)
def test_intervals(times, start, expected):
    np.testing.assert_allclose(intervals(seq(times, start=start)), expected)


def test_sequence_rejects_decreasing_times():
    with pytest.raises(ValueError, match="decrease"):
        seq([2.0, 1.0])


def test_space_spec_bounds():
    with pytest.raises(ValueError):
        SpaceSpec.continuous(4)
    with pytest.raises(ValueError):
        SpaceSpec.discrete(1)


def test_minimal_file(tmp_path):
    p = tmp_path / "ev.csv"
    p.write_text("seq_id,t,s_1,s_2\n0,1.0,0,0\n0,2.0,1,1\n")
    ds = load_dataset(p)
    assert len(ds.train) == 1 and len(ds.train[0]) == 2
    assert ds.space == SpaceSpec.continuous(2)


def test_decreasing_file_names_sequence(tmp_path):
    p = tmp_path / "ev.csv"
    p.write_text("seq_id,t,s_1\n0,1.0,0\n7,3.0,1\n7,2.0,1\n")
    with pytest.raises(DatasetFormatError, match="sequence 7"):
        load_dataset(p)


def test_malformed_row_reports_line(tmp_path):
    p = tmp_path / "ev.csv"
    p.write_text("seq_id,t,s_1\n0,1.0,0\n0,abc,1\n")
    with pytest.raises(DatasetFormatError, match=":3"):
        load_dataset(p)


def _random_dataset(rng, discrete=False):
    seqs = []
    for sid in range(9):
        L = int(rng.integers(1, 6))
        t = np.sort(rng.uniform(1, 10, L))
        sp = rng.integers(0, 4, L) if discrete else rng.normal(size=(L, 2))
        seqs.append(EventSequence(t, sp, 0.5, 12.0, sid))
    space = SpaceSpec.discrete(4) if discrete else SpaceSpec.continuous(2)
    return Dataset(space, seqs[:5], seqs[5:7], seqs[7:])


@pytest.mark.parametrize("suffix", [".csv", ".json"])
@pytest.mark.parametrize("discrete", [False, True])
def test_round_trip(tmp_path, suffix, discrete):
    ds = _random_dataset(np.random.default_rng(3), discrete)
    p = tmp_path / ("d" + suffix)
    save_dataset(ds, p)
    back = load_dataset(p, space=ds.space)
    for name in ("train", "val", "test"):
        a, b = ds.split(name), back.split(name)
        assert len(a) == len(b)
        assert all(x.same_as(y) for x, y in zip(a, b))
    # parse -> serialize -> parse is the identity
    p2 = tmp_path / ("e" + suffix)
    save_dataset(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_json_and_csv_agree(tmp_path):
    ds = _random_dataset(np.random.default_rng(5))
    save_dataset(ds, tmp_path / "a.csv")
    save_dataset(ds, tmp_path / "a.json")
    _, s1, l1 = read_sequences(tmp_path / "a.csv")
    _, s2, l2 = read_sequences(tmp_path / "a.json")
    assert l1 == l2
    assert all(x.same_as(y) for x, y in zip(s1, s2))
    assert json.loads((tmp_path / "a.json").read_text())["space"] == {"kind": "continuous", "dim": 2}


def test_normalization_arithmetic():
    s = EventSequence(np.array([1.0, 3.0, 6.0]), np.zeros((3, 1)), 0.0)
    stats = compute_stats([s], SpaceSpec.continuous(1))
    assert stats.time_interval_mean == 2.0
    np.testing.assert_allclose(stats.norm_tau([1, 2, 3]), [-1.224744871391589, 0, 1.224744871391589])


def test_constant_coordinates_clamped(caplog):
    s = EventSequence(np.array([1.0, 3.0, 6.0]), np.full((3, 2), 4.0), 0.0)
    stats = compute_stats([s], SpaceSpec.continuous(2))
    np.testing.assert_array_equal(stats.space_std, [1.0, 1.0])
    np.testing.assert_array_equal(stats.norm_space(s.space), 0.0)
    assert "zero std" in caplog.text


def test_stats_use_train_only():
    ds = _random_dataset(np.random.default_rng(4))
    ref = compute_stats(ds.train, ds.space)
    assert ds.stats.time_interval_mean == ref.time_interval_mean
    np.testing.assert_array_equal(ds.stats.space_std, ref.space_std)
    everything = compute_stats(ds.train + ds.val + ds.test, ds.space)
    assert everything.time_interval_mean != ds.stats.time_interval_mean


def test_normalize_denormalize_identity():
    ds = _random_dataset(np.random.default_rng(6))
    z = normalize(ds)
    for (tz, sz), s in zip(z["val"], ds.val):
        tau, sp = denormalize(tz, sz, ds.stats)
        np.testing.assert_allclose(tau, intervals(s), atol=1e-12)
        np.testing.assert_allclose(sp, s.space, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=20),
    st.floats(0, 1),
)
def test_intervals_nonnegative_and_telescoping(raw, frac):
    times = np.sort(np.asarray(raw))
    start = float(times[0]) * frac
    tau = intervals(seq(times, start=start))
    assert np.all(tau >= 0)
    assert tau.sum() == pytest.approx(times[-1] - start, abs=1e-9)
