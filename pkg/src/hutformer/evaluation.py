"""Horizon-wise evaluation reports, prediction/embedding export and timing benchmarks."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import resource
import statistics
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .dataset import Batch, NormStats, TrafficDataset, make_batch, sample_index, split
from .errors import ConfigError
from .metrics import MAPE_FLOOR, hi_baseline
from .model import HUTFormer
from .training import predict_raw, run_config_for, train

Predictor = Callable[[Batch], np.ndarray]


@dataclass
class HorizonRow:
    horizon: int
    mae: float
    mape: float
    mse: float
    samples: int
    entries: int


@dataclass
class HorizonReport:
    name: str
    split: str
    rows: list[HorizonRow] = field(default_factory=list)
    cumulative: bool = False

    def row(self, horizon: int) -> HorizonRow:
        for r in self.rows:
            if r.horizon == horizon:
                return r
        raise KeyError(horizon)

    def to_dict(self) -> dict:
        return {"name": self.name, "split": self.split, "cumulative": self.cumulative,
                "horizons": [dataclasses.asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["horizon", "mae", "mape", "mse", "samples", "entries"])
        for r in self.rows:
            w.writerow([r.horizon, repr(r.mae), repr(r.mape), repr(r.mse), r.samples, r.entries])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{self.name} [{self.split}]",
                 f"{'horizon':>8} {'MAE':>10} {'MAPE%':>10} {'MSE':>12} {'samples':>9}"]
        for r in self.rows:
            lines.append(f"{r.horizon:>8d} {r.mae:>10.4f} {r.mape:>10.3f} {r.mse:>12.4f} {r.samples:>9d}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "report") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json(), encoding="utf-8")
        (out / f"{stem}.csv").write_text(self.to_csv(), encoding="utf-8")
        (out / f"{stem}.txt").write_text(self.to_text(), encoding="utf-8")
        return out / f"{stem}.json"


def model_predictor(model: HUTFormer, stats: NormStats, stage: str = "final") -> Predictor:
    return lambda batch: predict_raw(model, batch, stats, stage)


def hi_predictor(horizon: int) -> Predictor:
    # only the history window is handed over
    return lambda batch: hi_baseline(batch.history_raw, horizon)


def evaluate(predict: Predictor, ds: TrafficDataset, rg: range, history_len: int, horizon: int,
             stats: NormStats, horizons: Sequence[int] = (12, 48, 96, 144, 192, 288),
             stride: int = 1, mask_zeros: bool = False, cumulative: bool = False,
             batch_size: int = 256, name: str = "model", split_name: str = "test") -> HorizonReport:
    """Metrics at each 1-based horizon step (or averaged over steps 1..h when ``cumulative``)."""
    for h in horizons:
        if not 1 <= h <= horizon:
            raise ConfigError(f"horizon {h} outside [1, {horizon}]")
    offsets, sensors = sample_index(ds, rg, history_len, horizon, stride)
    if len(offsets) == 0:
        raise ConfigError(f"{split_name} range {rg.start}:{rg.stop} yields no samples")
    k = len(horizons)
    abs_sum, sq_sum, count = np.zeros(k), np.zeros(k), np.zeros(k, dtype=np.int64)
    pct_sum, pct_count = np.zeros(k), np.zeros(k, dtype=np.int64)
    for i in range(0, len(offsets), batch_size):
        b = make_batch(ds, offsets[i : i + batch_size], sensors[i : i + batch_size],
                       history_len, horizon, stats, mask_zeros)
        pred = predict(b)
        for j, h in enumerate(horizons):
            sl = slice(0, h) if cumulative else slice(h - 1, h)
            p, t, m = pred[:, sl], b.future[:, sl], b.mask[:, sl]
            d = (p - t)[m]
            abs_sum[j] += np.abs(d).sum()
            sq_sum[j] += (d * d).sum()
            count[j] += d.size
            pm = m & (np.abs(t) >= MAPE_FLOOR)
            pct_sum[j] += (np.abs(p - t)[pm] / np.abs(t[pm])).sum()
            pct_count[j] += int(pm.sum())
    rows = []
    for j, h in enumerate(horizons):
        c = count[j]
        rows.append(HorizonRow(
            horizon=int(h),
            mae=float(abs_sum[j] / c) if c else float("nan"),
            mape=float(pct_sum[j] / pct_count[j] * 100.0) if pct_count[j] else float("nan"),
            mse=float(sq_sum[j] / c) if c else float("nan"),
            samples=len(offsets),
            entries=int(c),
        ))
    return HorizonReport(name, split_name, rows, cumulative)


def export_predictions(predict: Predictor, ds: TrafficDataset, rg: range, history_len: int,
                       horizon: int, stats: NormStats, sample_ids: Sequence[int],
                       path: str | Path, stride: int = 1, mask_zeros: bool = False) -> Path:
    """CSV with columns sample, offset, sensor, step, channel, truth, prediction (de-normalized)."""
    offsets, sensors = sample_index(ds, rg, history_len, horizon, stride)
    ids = np.asarray(sample_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= len(offsets)):
        raise ConfigError(f"sample ids must lie in [0, {len(offsets)})")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "offset", "sensor", "step", "channel", "truth", "prediction"])
        if ids.size:
            b = make_batch(ds, offsets[ids], sensors[ids], history_len, horizon, stats, mask_zeros)
            pred = predict(b)
            for r, sid in enumerate(ids):
                for s in range(horizon):
                    for c in range(ds.num_channels):
                        w.writerow([int(sid), int(b.offsets[r]), int(b.sensor[r]), s + 1, c,
                                    repr(float(b.future[r, s, c])), repr(float(pred[r, s, c]))])
    return path


def export_embeddings(model: HUTFormer, out_dir: str | Path) -> list[Path]:
    """One CSV per learned positional table: index, dim0, dim1, ..."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, p in model.named_parameters():
        if p.data.ndim != 2 or not any(k in name for k in (".spatial", ".tid", ".diw", ".table")):
            continue
        path = out / (name.replace(".", "_") + ".csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index"] + [f"dim{j}" for j in range(p.data.shape[1])])
            for i, row in enumerate(p.data):
                w.writerow([i] + [repr(float(v)) for v in row])
        written.append(path)
    return written


def benchmark(ds: TrafficDataset, run: RunConfig, measured_epochs: int = 3,
              warmup_epochs: int = 1) -> dict:
    """Median seconds/epoch per stage after warm-up, plus peak resident memory."""
    if measured_epochs < 3:
        raise ConfigError("benchmark needs at least 3 measured epochs")
    run = dataclasses.replace(run, optim=dataclasses.replace(
        run.optim, max_epochs=warmup_epochs + measured_epochs))
    with tempfile.TemporaryDirectory() as tmp:
        run.output_dir = tmp
        results = train(ds, run)
    resolved = run_config_for(ds, run)
    train_range = split(ds, resolved.split_ratios)[0]
    report = {"variant": run.variant, "warmup_epochs": warmup_epochs,
              "measured_epochs": measured_epochs,
              "train_samples_per_epoch": len(sample_index(
                  ds, train_range, resolved.model.history_len, resolved.model.horizon,
                  resolved.optim.train_stride)[0])}
    for stage, res in results.items():
        secs = [h["seconds"] for h in res.history[warmup_epochs:]]
        report[f"{stage}_seconds_per_epoch"] = statistics.median(secs)
    report["num_tokens"] = resolved.model.num_segments
    report["peak_rss_mb"] = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    return report
