"""Two-stage optimization: Adam + MultiStep schedule + global-norm clipping."""

from __future__ import annotations

import bisect
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import checkpoint as ckpt
from .config import ModelConfig, OptimConfig, RunConfig, model_config_from_dict
from .dataset import (Batch, NormStats, TrafficDataset, fit_norm, invert_norm, make_batch,
                      sample_index, split)
from .encoder import masked_mae
from .errors import ConfigError, ContractError, NumericError
from .model import HUTFormer, variant
from .nn import Parameter
from .numerics import backward, no_grad, zero_grad


def lr_at(epoch: int, cfg: OptimConfig) -> float:
    """base_lr * gamma ** (number of milestones <= epoch)."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return cfg.learning_rate * cfg.gamma ** bisect.bisect_right(cfg.milestones, epoch)


def global_grad_norm(params: Iterable[Parameter]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


def clip_gradients(params: Iterable[Parameter], max_norm: float = 5.0) -> float:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds max_norm.

    Returns the norm before clipping.
    """
    if max_norm <= 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    params = [p for p in params if p.grad is not None]
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * scale
    return norm


class Adam:
    """Adam with bias correction; weight decay is added to the gradient (L2) unless decoupled.

    Only parameters flagged ``decay`` (weights and embedding tables) are decayed;
    parameters with ``requires_grad`` off are never touched.
    """

    def __init__(self, named_params: Iterable[tuple[str, Parameter]], cfg: OptimConfig):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.cfg = cfg
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self, lr: float):
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params:
            if not p.requires_grad:
                continue
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {name} (max |g| = {np.nanmax(np.abs(g))})")
            decay = cfg.weight_decay if p.decay else 0.0
            if decay and not cfg.decoupled_weight_decay:
                g = g + decay * p.data
            m = self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
            v = self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
            if decay and cfg.decoupled_weight_decay:
                update = update + lr * decay * p.data
            p.data = p.data - update


def shuffle_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation of range(n) that depends only on (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


# ---------------------------------------------------------------- data plumbing


@dataclass
class Prepared:
    ds: TrafficDataset
    ranges: list[range]
    stats: NormStats
    train_index: tuple[np.ndarray, np.ndarray]
    val_index: tuple[np.ndarray, np.ndarray]
    test_index: tuple[np.ndarray, np.ndarray]
    mask_zeros: bool

    def batch(self, offsets, sensors, cfg: ModelConfig) -> Batch:
        return make_batch(self.ds, offsets, sensors, cfg.history_len, cfg.horizon,
                          self.stats, self.mask_zeros)


def prepare(ds: TrafficDataset, run: RunConfig) -> Prepared:
    m, o = run.model, run.optim
    if ds.steps_per_day != m.steps_per_day:
        raise ConfigError(f"dataset has {ds.steps_per_day} slots/day, model expects {m.steps_per_day}")
    if ds.num_sensors != m.num_sensors or ds.num_channels != m.num_channels:
        raise ConfigError(
            f"dataset has {ds.num_sensors} sensors x {ds.num_channels} channels, "
            f"model expects {m.num_sensors} x {m.num_channels}")
    ranges = split(ds, run.split_ratios, min_len=m.history_len + m.horizon)
    stats = fit_norm(ds, ranges[0])
    idx = [sample_index(ds, rg, m.history_len, m.horizon, s)
           for rg, s in zip(ranges, (o.train_stride, o.eval_stride, o.eval_stride))]
    return Prepared(ds, ranges, stats, idx[0], idx[1], idx[2], run.mask_zeros)


def run_config_for(ds: TrafficDataset, run: RunConfig) -> RunConfig:
    """Copy of ``run`` with the variant preset applied and dataset-derived sizes filled in."""
    run = dataclasses.replace(run)
    model = dataclasses.replace(run.model, num_sensors=ds.num_sensors,
                                num_channels=ds.num_channels, steps_per_day=ds.steps_per_day)
    run.model, run.optim = variant(run.variant, model, run.optim)
    return run


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    checkpoint: Path
    payload_sha256: str
    best_val_mae: float
    history: list[dict] = field(default_factory=list)
    max_clipped_norm: float = 0.0
    steps: int = 0


def _manifest_config(run: RunConfig, stats: NormStats) -> dict:
    return {
        "model": dataclasses.asdict(run.model),
        "optim": dataclasses.asdict(run.optim),
        "variant": run.variant,
        "split_ratios": list(run.split_ratios),
        "mask_zeros": run.mask_zeros,
        "norm_mean": stats.mean.tolist(),
        "norm_std": stats.std.tolist(),
    }


def predict_raw(model: HUTFormer, batch: Batch, stats: NormStats, stage: str = "final") -> np.ndarray:
    with no_grad():
        pyramid = model.encode(batch)
        out = pyramid.intermediate if stage == "encoder" else model.decode(pyramid, batch)
    return invert_norm(out.data, stats)


def validation_mae(model: HUTFormer, prep: Prepared, stage: str, batch_size: int = 256) -> float:
    offsets, sensors = prep.val_index
    total, count = 0.0, 0
    for i in range(0, len(offsets), batch_size):
        b = prep.batch(offsets[i : i + batch_size], sensors[i : i + batch_size], model.cfg)
        pred = predict_raw(model, b, prep.stats, stage)
        total += float(np.abs(pred - b.future)[b.mask].sum())
        count += int(b.mask.sum())
    return total / count if count else float("nan")


def _fit(model: HUTFormer, prep: Prepared, run: RunConfig, trainable: list[tuple[str, Parameter]],
         loss_fn: Callable, stage: str, save: Callable[[], str], log: Callable[[dict], None] | None,
         log_path: Path | None) -> TrainResult:
    o = run.optim
    opt = Adam(trainable, o)
    params = [p for _, p in opt.params]
    offsets, sensors = prep.train_index
    n = len(offsets)
    if n == 0:
        raise ConfigError("training range yields no samples")
    result = TrainResult(checkpoint=Path(), payload_sha256="", best_val_mae=math.inf)
    if log_path is not None:  # one line per finished epoch, so an aborted run keeps its history
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("", encoding="utf-8")
    for epoch in range(o.max_epochs):
        start = time.perf_counter()
        lr = lr_at(epoch, o)
        order = shuffle_order(n, o.seed, epoch)
        abs_sum, entries = 0.0, 0
        for i in range(0, n, o.batch_size):
            sel = order[i : i + o.batch_size]
            batch = prep.batch(offsets[sel], sensors[sel], model.cfg)
            zero_grad(params)
            loss, pred = loss_fn(model, batch)
            if not math.isfinite(loss.item()):
                raise NumericError(
                    f"{stage}: non-finite loss at epoch {epoch}, step {result.steps}; "
                    f"last good checkpoint: {result.checkpoint or 'none'}")
            backward(loss)
            clip_gradients(params, o.grad_clip_norm)
            result.max_clipped_norm = max(result.max_clipped_norm, global_grad_norm(params))
            opt.step(lr)
            result.steps += 1
            raw = invert_norm(pred.data, prep.stats)
            abs_sum += float(np.abs(raw - batch.future)[batch.mask].sum())
            entries += int(batch.mask.sum())
        val = validation_mae(model, prep, "encoder" if stage == "encoder" else "final")
        if val < result.best_val_mae or result.checkpoint == Path():
            result.best_val_mae = val
            result.payload_sha256 = save()
            result.checkpoint = Path(run.output_dir) / stage
        line = {"epoch": epoch, "lr": lr, "train_mae": abs_sum / max(entries, 1),
                "val_mae": val, "seconds": round(time.perf_counter() - start, 6)}
        result.history.append(line)
        if log_path is not None:
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(line) + "\n")
        if log:
            log({"stage": stage, **line})
    return result


def _encoder_loss(model, batch):
    pyramid = model.encode(batch)
    return masked_mae(pyramid.intermediate, batch.future_norm, batch.mask), pyramid.intermediate


def _decoder_loss(model, batch):
    _, out = model(batch)
    return masked_mae(out, batch.future_norm, batch.mask), out


def _joint_loss(model, batch):
    pyramid, out = model(batch)
    enc = masked_mae(pyramid.intermediate, batch.future_norm, batch.mask)
    dec = masked_mae(out, batch.future_norm, batch.mask)
    return enc + dec, out


def train_stage1(ds: TrafficDataset, run: RunConfig, log=None) -> TrainResult:
    """Train embedding + encoder on the intermediate-prediction MAE.

    ``run`` must already carry dataset-derived sizes (see :func:`run_config_for`).
    """
    prep = prepare(ds, run)
    model = HUTFormer(run.model, seed=run.optim.seed)
    out = Path(run.output_dir)
    config = _manifest_config(run, prep.stats)

    def save():
        return ckpt.save_checkpoint(out / "encoder", model.encoder_parameters(), config, stage="encoder")

    return _fit(model, prep, run, model.encoder_parameters(), _encoder_loss, "encoder", save, log,
                out / "encoder.log.jsonl")


def load_model(encoder_ckpt: str | Path, decoder_ckpt: str | Path | None = None,
               seed: int | None = None) -> tuple[HUTFormer, dict]:
    """Rebuild a model from checkpoints; returns (model, encoder manifest)."""
    manifest, params = ckpt.load_checkpoint(encoder_ckpt)
    cfg = model_config_from_dict(manifest["config"]["model"])
    model = HUTFormer(cfg, seed=manifest["config"]["optim"]["seed"] if seed is None else seed)
    ckpt.assign(model.encoder_parameters(), params)
    if decoder_ckpt is not None:
        _, dparams = ckpt.load_checkpoint(decoder_ckpt)
        ckpt.assign(model.decoder_parameters(), dparams)
        ckpt.assign(model.encoder_parameters(), dparams, strict=False)
    return model, manifest


def norm_stats_from(manifest: dict) -> NormStats:
    c = manifest["config"]
    return NormStats(np.asarray(c["norm_mean"], dtype=np.float64), np.asarray(c["norm_std"], dtype=np.float64))


def train_stage2(ds: TrafficDataset, encoder_ckpt: str | Path, run: RunConfig, log=None) -> TrainResult:
    """Train the decoder on the final-prediction MAE with the stage-1 parameters frozen.

    With ``training_mode == "no_fix"`` the encoder keeps training as well.
    """
    model, manifest = load_model(encoder_ckpt, seed=run.optim.seed)
    run = dataclasses.replace(run, model=model.cfg)
    if not model.has_decoder:
        raise ConfigError(f"variant {run.variant!r} has no decoder to train")
    prep = prepare(ds, run)
    freeze = run.optim.training_mode != "no_fix"
    if freeze:
        for _, p in model.encoder_parameters():
            p.requires_grad = False
        trainable = model.decoder_parameters()
    else:
        trainable = list(model.named_parameters())
    out = Path(run.output_dir)
    config = _manifest_config(run, prep.stats)
    enc_hash = ckpt.payload_sha256(encoder_ckpt)

    def save():
        return ckpt.save_checkpoint(out / "decoder", trainable, config, stage="decoder",
                                    encoder_checkpoint_sha256=enc_hash)

    result = _fit(model, prep, run, trainable, _decoder_loss, "decoder", save, log,
                  out / "decoder.log.jsonl")
    if freeze:
        _, frozen = ckpt.load_checkpoint(encoder_ckpt)
        for name, p in model.encoder_parameters():
            if p.data.tobytes() != frozen[name].tobytes():
                raise NumericError(f"frozen parameter {name} changed during stage 2")
    return result


def train_end2end(ds: TrafficDataset, run: RunConfig, log=None) -> tuple[TrainResult, TrainResult]:
    """Single stage on L_enc + L_dec; writes both encoder and decoder checkpoints."""
    prep = prepare(ds, run)
    model = HUTFormer(run.model, seed=run.optim.seed)
    out = Path(run.output_dir)
    config = _manifest_config(run, prep.stats)
    shas = {}

    def save():
        shas["enc"] = ckpt.save_checkpoint(out / "encoder", model.encoder_parameters(), config,
                                           stage="encoder")
        return ckpt.save_checkpoint(out / "decoder", model.decoder_parameters(), config,
                                    stage="decoder", encoder_checkpoint_sha256=shas["enc"])

    res = _fit(model, prep, run, list(model.named_parameters()), _joint_loss, "decoder", save, log,
               out / "end2end.log.jsonl")
    enc = TrainResult(out / "encoder", shas["enc"], res.best_val_mae, res.history,
                      res.max_clipped_norm, res.steps)
    return enc, res


def train(ds: TrafficDataset, run: RunConfig, log=None) -> dict[str, TrainResult]:
    """Run every stage the variant calls for. Returns results keyed by "encoder"/"decoder"."""
    run = run_config_for(ds, run)
    if run.optim.training_mode == "end2end":
        if run.model.decoder == "none":
            raise ConfigError("end2end training needs a decoder")
        enc, dec = train_end2end(ds, run, log)
        return {"encoder": enc, "decoder": dec}
    results = {"encoder": train_stage1(ds, run, log)}
    if run.model.decoder != "none":
        results["decoder"] = train_stage2(ds, Path(run.output_dir) / "encoder", run, log)
    return results
