"""Desk-scale experiments: single-batch overfit and the ablation ordering run."""

from __future__ import annotations

import dataclasses
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .checks import sample_batch
from .config import ModelConfig, OptimConfig, RunConfig
from .dataset import (SyntheticSpec, TrafficDataset, fit_norm, generate_synthetic, multiscale_spec,
                      split)
from .encoder import masked_mae
from .evaluation import evaluate, hi_predictor, model_predictor
from .model import HUTFormer
from .numerics import backward, zero_grad
from .training import Adam, clip_gradients, load_model, norm_stats_from, run_config_for, train


@dataclass
class OverfitResult:
    steps: int
    final_mae: float
    best_mae: float
    reached: bool
    seconds: float
    trace: list[tuple[int, float]] = field(default_factory=list)


def overfit_single_batch(seed: int = 0, batch_size: int = 8, max_steps: int = 2000,
                         target: float = 1e-2, learning_rate: float = 1e-3,
                         cfg: ModelConfig | None = None) -> OverfitResult:
    """Stage-1 training on one fixed synthetic batch until normalized MAE < ``target``.

    The learning rate halves at 50%, 75% and 90% of ``max_steps``; Adam's noisy
    sign-like MAE updates need the decay to settle below 1e-2.
    """
    ds = generate_synthetic(SyntheticSpec(num_sensors=4, days=6), seed=seed)
    cfg = cfg or ModelConfig(num_sensors=ds.num_sensors)
    batch = sample_batch(ds, cfg, batch_size, seed)
    model = HUTFormer(cfg, seed=seed)
    params = model.encoder_parameters()
    opt = Adam(params, OptimConfig(weight_decay=0.0))
    plist = [p for _, p in params]
    milestones = [int(max_steps * f) for f in (0.5, 0.75, 0.9)]
    start = time.perf_counter()
    result = OverfitResult(0, float("inf"), float("inf"), False, 0.0)
    for step in range(1, max_steps + 1):
        zero_grad(plist)
        loss = masked_mae(model.encode(batch).intermediate, batch.future_norm, batch.mask)
        value = loss.item()
        result.final_mae, result.steps = value, step - 1
        result.best_mae = min(result.best_mae, value)
        if step == 1 or step % 100 == 0:
            result.trace.append((step - 1, value))
        if value < target:
            result.reached = True
            break
        backward(loss)
        clip_gradients(plist, 5.0)
        lr = learning_rate * 0.5 ** sum(step > m for m in milestones)
        opt.step(lr)
    else:
        result.steps = max_steps
    result.seconds = time.perf_counter() - start
    return result


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRun:
    variant: str
    seed: int
    test_mae: float
    horizon_mae: dict[int, float]
    seconds: float


def ablation_run_config(variant: str, seed: int, out_dir: str | Path, epochs: int = 40,
                        stride: int = 72, batch_size: int = 32) -> RunConfig:
    return RunConfig(variant=variant, output_dir=str(Path(out_dir) / f"{variant}-seed{seed}"),
                     optim=OptimConfig(max_epochs=epochs, seed=seed, train_stride=stride,
                                       eval_stride=stride, batch_size=batch_size))


def run_variant(ds: TrafficDataset, run: RunConfig, horizons: Sequence[int] = (12, 96, 288)) -> AblationRun:
    """Train every stage of ``run.variant`` and score the test split.

    ``test_mae`` is the MAE over all T_f future steps of every test sample
    (equivalently, the cumulative MAE at the last horizon).
    """
    start = time.perf_counter()
    results = train(ds, run)
    dec = results.get("decoder")
    model, manifest = load_model(results["encoder"].checkpoint, dec.checkpoint if dec else None)
    stats = norm_stats_from(manifest)
    resolved = run_config_for(ds, run)
    test = split(ds, resolved.split_ratios)[2]
    m = resolved.model
    overall = evaluate(model_predictor(model, stats), ds, test, m.history_len, m.horizon, stats,
                       horizons=[m.horizon], stride=resolved.optim.eval_stride, cumulative=True)
    per_h = evaluate(model_predictor(model, stats), ds, test, m.history_len, m.horizon, stats,
                     horizons=list(horizons), stride=resolved.optim.eval_stride)
    return AblationRun(run.variant, run.optim.seed, overall.rows[0].mae,
                       {r.horizon: r.mae for r in per_h.rows}, time.perf_counter() - start)


def hi_test_mae(ds: TrafficDataset, run: RunConfig) -> float:
    resolved = run_config_for(ds, run)
    m = resolved.model
    ranges = split(ds, resolved.split_ratios)
    stats = fit_norm(ds, ranges[0])  # HI ignores them; evaluate needs them for batching
    rep = evaluate(hi_predictor(m.horizon), ds, ranges[2], m.history_len, m.horizon, stats,
                   horizons=[m.horizon], stride=resolved.optim.eval_stride, cumulative=True)
    return rep.rows[0].mae


def ablation(seeds: Sequence[int] = (0, 1, 2), variants: Sequence[str] = ("full", "no_decoder", "no_hierarchy"),
             out_dir: str | Path = "runs/ablation", epochs: int = 40, stride: int = 72,
             batch_size: int = 32, spec: SyntheticSpec | None = None, emit: Callable[[str], None] | None = None) -> dict:
    """Criterion 9: train each variant on the multi-scale synthetic set for every seed.

    The dataset seed equals the training seed.  Returns per-run rows, per-variant
    median test MAE and the ordering verdicts; also writes ``ablation.json``.
    """
    spec = spec or multiscale_spec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[AblationRun] = []
    hi = []
    for seed in seeds:
        ds = generate_synthetic(spec, seed=seed)
        for v in variants:
            row = run_variant(ds, ablation_run_config(v, seed, out, epochs, stride, batch_size))
            rows.append(row)
            if emit:
                emit(f"seed {seed} {v:<13} test MAE {row.test_mae:.4f}  ({row.seconds:.0f} s)")
        hi.append(hi_test_mae(ds, ablation_run_config("full", seed, out, epochs, stride, batch_size)))
    median = {v: statistics.median(r.test_mae for r in rows if r.variant == v) for v in variants}
    report = {
        "spec": dataclasses.asdict(spec),
        "epochs": epochs,
        "stride": stride,
        "batch_size": batch_size,
        "seeds": list(seeds),
        "runs": [dataclasses.asdict(r) for r in rows],
        "median_test_mae": median,
        "hi_median_test_mae": statistics.median(hi),
    }
    if "full" in median:
        if "no_decoder" in median:
            report["full_over_no_decoder"] = median["full"] / median["no_decoder"]
        if "no_hierarchy" in median:
            report["full_over_no_hierarchy"] = median["full"] / median["no_hierarchy"]
    (out / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


def ablation_verdict(report: dict, ratio: float = 0.95) -> tuple[bool, str]:
    med = report["median_test_mae"]
    ok = (med["full"] < med["no_decoder"] and med["full"] < med["no_hierarchy"]
          and med["full"] <= ratio * med["no_decoder"])
    detail = (f"median test MAE full {med['full']:.4f}, no_decoder {med['no_decoder']:.4f} "
              f"(ratio {med['full'] / med['no_decoder']:.3f}, need <= {ratio}), "
              f"no_hierarchy {med['no_hierarchy']:.4f}, HI {report['hi_median_test_mae']:.4f}")
    return ok, detail
