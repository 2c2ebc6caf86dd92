import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hutformer.checks import tiny_config, tiny_dataset
from hutformer.dataset import fit_norm, split
from hutformer.errors import ConfigError, ContractError, NumericError, ShapeError
from hutformer.evaluation import (HorizonReport, HorizonRow, evaluate, export_embeddings,
                                  export_predictions, hi_predictor, model_predictor)
from hutformer.metrics import hi_baseline, mae, mape, mse
from hutformer.model import HUTFormer


def test_metric_examples():
    assert mae([1.0, 2.0], [2.0, 4.0]) == 1.5
    assert mse([1.0, 2.0], [2.0, 4.0]) == 2.5
    assert mape([1.0, 3.0], [2.0, 4.0]) == pytest.approx(37.5)
    assert mae([1.0, 100.0], [2.0, 4.0], mask=[True, False]) == 1.0
    assert mape([5.0, 1.0], [0.0, 2.0]) == pytest.approx(50.0)  # near-zero truth excluded


def test_metric_errors():
    with pytest.raises(ShapeError):
        mae(np.zeros(2), np.zeros(3))
    with pytest.raises(NumericError):
        mae([1.0], [1.0], mask=[False])
    with pytest.raises(NumericError):
        mape([1.0], [0.0])


@given(arrays(np.float64, 10, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 10, elements=st.floats(-1e3, 1e3)))
def test_metric_laws(a, b):
    assert mae(a, b) == pytest.approx(mae(b, a))
    assert mae(a, b) ** 2 <= mse(a, b) * (1 + 1e-12) + 1e-12
    assert mae(a, a) == 0.0


def test_hi_is_last_window():
    hist = np.arange(10.0).reshape(10, 1)
    assert hi_baseline(hist, 4)[:, 0].tolist() == [6.0, 7.0, 8.0, 9.0]
    batched = np.stack([hist, hist + 1])
    assert hi_baseline(batched, 2).shape == (2, 2, 1)
    with pytest.raises(ContractError):
        hi_baseline(hist, 11)


@pytest.fixture(scope="module")
def setup():
    cfg = tiny_config()
    ds = tiny_dataset(cfg, days=20, seed=2)
    rngs = split(ds, [0.7, 0.1, 0.2])
    stats = fit_norm(ds, rngs[0])
    return cfg, ds, rngs, stats


def test_evaluate_matches_direct_metric(setup):
    cfg, ds, (_, _, test), stats = setup
    rep = evaluate(hi_predictor(cfg.horizon), ds, test, cfg.history_len, cfg.horizon, stats,
                   horizons=[1, 8], name="HI")
    # direct computation of step-1 error
    errs = []
    for t in range(test.start, test.stop - cfg.history_len - cfg.horizon + 1):
        for s in range(ds.num_sensors):
            truth = ds.values[t + cfg.history_len, s, 0]
            pred = ds.values[t + cfg.history_len - cfg.horizon, s, 0]
            errs.append(abs(float(truth) - float(pred)))
    assert rep.row(1).mae == pytest.approx(np.mean(errs), rel=1e-12)
    assert rep.row(1).samples == len(errs)


def test_cumulative_last_equals_overall(setup):
    cfg, ds, (_, _, test), stats = setup
    cum = evaluate(hi_predictor(cfg.horizon), ds, test, cfg.history_len, cfg.horizon, stats,
                   horizons=list(range(1, cfg.horizon + 1)), cumulative=True)
    per = evaluate(hi_predictor(cfg.horizon), ds, test, cfg.history_len, cfg.horizon, stats,
                   horizons=list(range(1, cfg.horizon + 1)))
    assert cum.row(cfg.horizon).mae == pytest.approx(np.mean([r.mae for r in per.rows]), rel=1e-12)
    assert cum.row(1).mae == per.row(1).mae


def test_evaluate_is_pure_and_batch_independent(setup):
    cfg, ds, (_, val, _), stats = setup
    model = HUTFormer(cfg, seed=0)
    before = [p.data.copy() for _, p in model.named_parameters()]
    values = ds.values.copy()
    a = evaluate(model_predictor(model, stats), ds, val, cfg.history_len, cfg.horizon, stats, horizons=[1, 4, 8])
    b = evaluate(model_predictor(model, stats), ds, val, cfg.history_len, cfg.horizon, stats, horizons=[1, 4, 8],
                 batch_size=3)
    assert a.to_json() == evaluate(model_predictor(model, stats), ds, val, cfg.history_len, cfg.horizon,
                                   stats, horizons=[1, 4, 8]).to_json()
    for ra, rb in zip(a.rows, b.rows):
        assert ra.mae == pytest.approx(rb.mae, rel=1e-12)
    assert all(np.array_equal(x, p.data) for x, (_, p) in zip(before, model.named_parameters()))
    assert np.array_equal(values, ds.values)


def test_evaluate_errors(setup):
    cfg, ds, (_, val, _), stats = setup
    with pytest.raises(ConfigError):
        evaluate(hi_predictor(cfg.horizon), ds, val, cfg.history_len, cfg.horizon, stats, horizons=[9])
    with pytest.raises(ConfigError):
        evaluate(hi_predictor(cfg.horizon), ds, range(0, 5), cfg.history_len, cfg.horizon, stats, horizons=[1])


def test_report_formats(tmp_path):
    rep = HorizonReport("m", "test", [HorizonRow(12, 1.25, 3.5, 2.0, 10, 100),
                                      HorizonRow(288, 2.5, math.nan, 7.0, 10, 100)])
    path = rep.write(tmp_path)
    obj = json.loads(path.read_text())
    assert [h["horizon"] for h in obj["horizons"]] == [12, 288] and obj["split"] == "test"
    rows = list(csv.DictReader((tmp_path / "report.csv").open()))
    assert rows[0]["mae"] == "1.25" and rows[1]["horizon"] == "288"
    text = (tmp_path / "report.txt").read_text().splitlines()
    assert len({len(l) for l in text[1:]}) == 1  # aligned columns


def test_export_predictions_csv(setup, tmp_path):
    cfg, ds, (_, _, test), stats = setup
    path = export_predictions(hi_predictor(cfg.horizon), ds, test, cfg.history_len, cfg.horizon, stats,
                              [0, 2], tmp_path / "p.csv")
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == ["sample", "offset", "sensor", "step", "channel", "truth", "prediction"]
    assert len(rows) == 2 * cfg.horizon * ds.num_channels
    with pytest.raises(ConfigError):
        export_predictions(hi_predictor(cfg.horizon), ds, test, cfg.history_len, cfg.horizon, stats,
                           [10**6], tmp_path / "q.csv")


def test_export_embeddings(tmp_path):
    model = HUTFormer(tiny_config(), seed=0)
    paths = export_embeddings(model, tmp_path)
    names = {p.name for p in paths}
    assert any("spatial" in n for n in names) and any("tid" in n for n in names) and any("diw" in n for n in names)
    for p in paths:
        rows = list(csv.reader(p.open()))
        assert rows[0][0] == "index" and rows[1][0] == "0"
