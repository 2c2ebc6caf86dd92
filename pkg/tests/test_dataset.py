import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hutformer.dataset import (SyntheticSpec, TrafficDataset, apply_norm, convert_csv, fit_norm,
                               generate_synthetic, invert_norm, iter_samples, load_dataset,
                               make_batch, sample_index, save_dataset, split, synthetic_spikes)
from hutformer.errors import ConfigError, DataError
from hutformer.metrics import hi_baseline, mae


def floor_split(total, ratios):
    """Independent oracle: integer arithmetic on ratios expressed in thousandths."""
    milli = [round(r * 1000) for r in ratios]
    b1 = total * milli[0] // 1000
    b2 = total * (milli[0] + milli[1]) // 1000
    return [(0, b1), (b1, b2), (b2, total)]


@pytest.mark.parametrize("total, ratios, expected", [
    (34272, (0.7, 0.1, 0.2), [(0, 23990), (23990, 27417), (27417, 34272)]),
    (16992, (0.6, 0.2, 0.2), [(0, 10195), (10195, 13593), (13593, 16992)]),
])
def test_split_boundaries(total, ratios, expected):
    assert floor_split(total, ratios) == expected
    assert [(r.start, r.stop) for r in split(total, ratios)] == expected


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 100_000), st.integers(1, 998), st.integers(1, 998))
def test_split_cover_disjoint(total, a, b):
    a, b = sorted((a, b))
    if a == b:
        return
    ratios = (a / 1000, (b - a) / 1000, (1000 - b) / 1000)
    ranges = split(total, ratios)
    assert ranges[0].start == 0 and ranges[-1].stop == total
    assert ranges[0].stop == ranges[1].start and ranges[1].stop == ranges[2].start
    assert [(r.start, r.stop) for r in ranges] == floor_split(total, ratios)


def test_split_errors():
    with pytest.raises(ConfigError):
        split(1000, (0.5, 0.2, 0.2))
    # train-only is a valid split, but not for runs that need val/test windows
    ranges = split(1000, (1.0, 0.0, 0.0))
    assert len(ranges[1]) == len(ranges[2]) == 0
    with pytest.raises(ConfigError):
        split(1000, (1.0, 0.0, 0.0), min_len=576)


def small_ds(rng, t=40, n=3, c=1, **kw):
    return TrafficDataset(rng.normal(50, 10, size=(t, n, c)), **kw)


def test_round_trip_bit_exact(tmp_path):
    ds = generate_synthetic(SyntheticSpec(num_sensors=3, days=2), seed=5)
    save_dataset(ds, tmp_path / "syn")
    back = load_dataset(tmp_path / "syn.json")
    assert back.values.tobytes() == ds.values.tobytes()
    assert (back.name, back.sample_interval_minutes, back.start_slot_of_day, back.start_day_of_week) == \
        (ds.name, ds.sample_interval_minutes, ds.start_slot_of_day, ds.start_day_of_week)
    meta = json.loads((tmp_path / "syn.json").read_text())
    assert set(meta) == {"name", "num_steps", "num_sensors", "num_channels", "sample_interval_minutes",
                         "start_slot_of_day", "start_day_of_week", "payload_sha256"}
    raw = (tmp_path / "syn.bin").read_bytes()
    assert raw[:4] == b"HUTD" and int.from_bytes(raw[4:8], "little") == 1


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 20), st.integers(1, 4), st.integers(1, 2)),
              elements=st.floats(-1e6, 1e6, width=32)),
       st.integers(0, 287), st.integers(0, 6))
def test_round_trip_property(tmp_path_factory, values, slot, dow):
    path = tmp_path_factory.mktemp("rt") / "d"
    ds = TrafficDataset(values, start_slot_of_day=slot, start_day_of_week=dow, name="p")
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.values.tobytes() == ds.values.tobytes()
    assert back.values.shape == values.shape


def test_load_errors(tmp_path, rng):
    ds = small_ds(rng)
    save_dataset(ds, tmp_path / "d")
    bin_path = tmp_path / "d.bin"
    good = bin_path.read_bytes()

    bin_path.write_bytes(good[:-1])
    with pytest.raises(DataError, match="truncated"):
        load_dataset(tmp_path / "d")

    bin_path.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(DataError, match="magic"):
        load_dataset(tmp_path / "d")

    bin_path.write_bytes(good[:4] + (2).to_bytes(4, "little") + good[8:])
    with pytest.raises(DataError, match="version"):
        load_dataset(tmp_path / "d")

    bad = TrafficDataset(np.array([[[1.0]], [[np.nan]]]))
    save_dataset(bad, tmp_path / "nan")
    with pytest.raises(DataError, match="offset 12"):
        load_dataset(tmp_path / "nan")


def test_table1_shapes_load(tmp_path):
    # metadata-only check of the paper's dataset sizes through the file format
    for name, steps, sensors in (("METR-LA", 34272, 207), ("PEMS08", 17856, 170)):
        ds = TrafficDataset(np.ones((steps, sensors, 1), dtype=np.float32), name=name)
        save_dataset(ds, tmp_path / name)
        back = load_dataset(tmp_path / name)
        assert back.values.shape == (steps, sensors, 1)
        assert back.steps_per_day == 288


def test_norm_examples(rng):
    from hutformer.dataset import NormStats
    stats = NormStats(np.array([50.0]), np.array([10.0]))
    assert apply_norm([60.0], stats).tolist() == [1.0]
    with pytest.raises(DataError):
        fit_norm(TrafficDataset(np.full((10, 2, 1), 3.0)), range(0, 8))


def test_norm_round_trip(rng):
    ds = small_ds(rng, t=200)
    stats = fit_norm(ds, range(0, 140))
    x = rng.normal(50, 10, size=(7, 3, 1))
    assert np.max(np.abs(invert_norm(apply_norm(x, stats), stats) - x)) < 1e-10


def test_norm_uses_training_range_only(rng):
    ds = small_ds(rng, t=200)
    stats = fit_norm(ds, range(0, 140))
    mutated = ds.values.copy()
    mutated[140:] = 1e4
    stats2 = fit_norm(TrafficDataset(mutated), range(0, 140))
    assert stats.mean.tobytes() == stats2.mean.tobytes()
    assert stats.std.tobytes() == stats2.std.tobytes()


@pytest.mark.parametrize("length, offsets", [(576, 1), (580, 5)])
def test_sample_counts(length, offsets, rng):
    ds = small_ds(rng, t=length + 10)
    samples = list(iter_samples(ds, range(3, 3 + length), 288, 288))
    assert len(samples) == offsets * 3
    assert all(s.history.shape == (288, 1) and s.future.shape == (288, 1) for s in samples)


def test_temporal_indices_wrap(rng):
    ds = small_ds(rng, t=700, start_slot_of_day=280, start_day_of_week=6)
    s = next(iter_samples(ds, range(5, 700), 288, 288))
    k = np.arange(576)
    np.testing.assert_array_equal(s.tid, (280 + 5 + k) % 288)
    assert s.diw[0] == 6 and s.diw[-1] == 1  # Sunday wraps to Monday, then Tuesday
    assert np.all(s.tid < 288) and np.all(s.diw < 7)
    step = np.diff(s.tid) % 288
    assert np.all(step == 1)
    day_steps = np.diff(s.diw) % 7
    assert np.all(day_steps[s.tid[1:] != 0] == 0) and np.all(day_steps[s.tid[1:] == 0] == 1)


def test_samples_never_straddle_ranges(rng):
    ds = small_ds(rng, t=2000)
    tr, va, te = split(ds, (0.7, 0.1, 0.2))
    for rg in (tr, va, te):
        offsets, _ = sample_index(ds, rg, 100, 50)
        assert offsets.min() >= rg.start and offsets.max() + 150 <= rg.stop


def test_make_batch_matches_iter_samples(rng):
    ds = small_ds(rng, t=100)
    stats = fit_norm(ds, range(0, 70))
    offs, sens = sample_index(ds, range(0, 100), 12, 8, stride=7)
    b = make_batch(ds, offs, sens, 12, 8, stats)
    for i, s in enumerate(iter_samples(ds, range(0, 100), 12, 8, stride=7)):
        np.testing.assert_array_equal(b.history_raw[i], s.history)
        np.testing.assert_array_equal(b.future[i], s.future)
        np.testing.assert_array_equal(b.tid_hist[i], s.tid[:12])
        np.testing.assert_array_equal(b.diw_fut[i], s.diw[12:])
        assert b.sensor[i] == s.sensor_id


def test_mask_zeros(rng):
    v = rng.normal(50, 5, size=(60, 2, 1))
    v[40:45, 0] = 0.0
    ds = TrafficDataset(v)
    b = make_batch(ds, np.array([30]), np.array([0]), 8, 20, fit_norm(ds, range(0, 40)), mask_zeros=True)
    assert b.mask.sum() == 15


def test_synthetic_periodic_noiseless():
    spec = SyntheticSpec(num_sensors=3, days=4, noise_std=0.0, spike_rate_per_day=0.0)
    ds = generate_synthetic(spec, seed=2)
    v = ds.values
    assert np.array_equal(v[288:], v[:-288])
    hist = v[:288, :, :].transpose(1, 0, 2)
    fut = v[288:576].transpose(1, 0, 2)
    assert mae(hi_baseline(hist, 288), fut) == 0.0


def test_synthetic_deterministic():
    spec = SyntheticSpec(num_sensors=4, days=3)
    a, b = generate_synthetic(spec, 11), generate_synthetic(spec, 11)
    assert a.values.tobytes() == b.values.tobytes()
    assert generate_synthetic(spec, 12).values.tobytes() != a.values.tobytes()


def test_synthetic_dip_rate_counting_oracle():
    spec = SyntheticSpec(num_sensors=8, days=60, noise_std=0.0, daily_amplitude=0.0,
                         spike_rate_per_day=2.0, spike_width=6, spike_depth=25.0)
    ds = generate_synthetic(spec, seed=3)
    detected = 0
    for i in range(spec.num_sensors):
        x = ds.values[:, i, 0].astype(np.float64)
        base = x.max()
        floor = base - spec.spike_depth
        at_floor = np.abs(x - floor) < 1e-3
        # an onset is a step that hits full depth right after a step that did not
        onsets = at_floor & ~np.concatenate([[False], at_floor[:-1]])
        detected += int(onsets.sum())
    drawn = sum(len(o) for o in synthetic_spikes(spec, seed=3))
    sensor_days = spec.num_sensors * spec.days
    expected = spec.spike_rate_per_day * sensor_days
    # Poisson total: mean = variance = expected; 4 sigma band
    assert abs(drawn - expected) < 4 * math.sqrt(expected)
    # onsets hidden inside an earlier dip's hold phase are the only misses
    assert drawn - 0.05 * drawn <= detected <= drawn


def test_csv_converter(tmp_path):
    csv_path = tmp_path / "flow.csv"
    csv_path.write_text("time,s1,s2\n0,1.5,2\n1,,4\n2,5,6.25\n")
    ds = convert_csv(csv_path, tmp_path / "flow", sample_interval_minutes=5, start_day_of_week=2)
    assert ds.values[:, :, 0].tolist() == [[1.5, 2.0], [0.0, 4.0], [5.0, 6.25]]
    back = load_dataset(tmp_path / "flow")
    assert back.values.tobytes() == ds.values.tobytes() and back.start_day_of_week == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("s1,s2\n1,2\n3\n")
    with pytest.raises(DataError):
        convert_csv(bad, tmp_path / "bad")
