"""Invariant suites shared by ``hutformer selftest``, ``hutformer gradcheck`` and the acceptance tests.

Every check returns a :class:`CheckResult`; none of them touch the filesystem
outside a caller-supplied directory.
"""

from __future__ import annotations

import dataclasses
import math
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as F
from .config import ModelConfig, OptimConfig
from .dataset import (SyntheticSpec, TrafficDataset, fit_norm, generate_synthetic, load_dataset,
                      make_batch, save_dataset, split)
from .decoder import CrossScaleAttention, CrossScaleTransformerLayer, QueryBuilder
from .embedding import LearnedPositional, STPositionalEncoding, SegmentEmbedding
from .encoder import WindowAttention, WindowTransformerLayer, masked_mae
from .metrics import hi_baseline
from .model import HUTFormer
from .nn import MLP, LayerNorm, Linear
from .numerics import Tensor, grad_compare, no_grad, relative_errors
from .training import clip_gradients, global_grad_norm, lr_at


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def tiny_config(**overrides) -> ModelConfig:
    """The gradient-check configuration: P=4, d=4, S=2, window=2, L=2, T_f=8."""
    base = dict(history_len=8, horizon=8, segment_len=2, num_channels=1, num_sensors=3,
                steps_per_day=12, d_model=4, d_spatial=2, d_tid=2, d_diw=2, num_blocks=2,
                window_size=2, num_heads=2, mlp_ratio=2.0, d_dec=4, dec_heads=2)
    base.update(overrides)
    return ModelConfig(**base).validate()


def tiny_dataset(cfg: ModelConfig, days: int = 4, seed: int = 0) -> TrafficDataset:
    """Noisy periodic series sized for ``cfg`` (steps_per_day slots per day)."""
    rng = np.random.default_rng(seed)
    t = np.arange(days * cfg.steps_per_day)
    phase = rng.uniform(0, 2 * np.pi, size=cfg.num_sensors)
    base = 50 + 10 * np.sin(2 * np.pi * t[:, None] / cfg.steps_per_day + phase)
    values = base[:, :, None] + rng.normal(0, 2.0, size=(len(t), cfg.num_sensors, cfg.num_channels))
    interval = 24 * 60 // cfg.steps_per_day
    return TrafficDataset(values, sample_interval_minutes=interval, name="tiny")


def sample_batch(ds: TrafficDataset, cfg: ModelConfig, size: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    span = cfg.history_len + cfg.horizon
    offsets = rng.integers(0, ds.num_steps - span + 1, size=size)
    sensors = rng.integers(0, ds.num_sensors, size=size)
    stats = fit_norm(ds, range(0, ds.num_steps))
    return make_batch(ds, offsets, sensors, cfg.history_len, cfg.horizon, stats)


# ---------------------------------------------------------------- criterion 1


@dataclass
class GradReport:
    max_rel_err: float
    entries: int
    zero_entries: int  # analytic gradient is zero up to roundoff; excluded from the ratio


def gradient_report(fn: Callable[[], Tensor], params, eps: float = 1e-5) -> GradReport:
    """Relative-error gradient check that sets aside exactly-zero gradients.

    Where the true derivative is 0 (the key-projection bias under softmax shift
    invariance, or an MAE whose residual signs cancel) the central difference is
    pure roundoff, about eps_mach*|f|/eps, and the 1e-8 denominator floor turns
    that noise into a relative error near 1e-3.  Such entries are counted
    separately and must agree in absolute terms: |analytic| <= 1e-12 and
    |numeric| <= 64*eps_mach*max(|f|, 1)/eps.  Every other entry uses the
    plain relative error of :func:`numerics.relative_errors`.
    """
    with no_grad():
        scale = max(abs(fn().item()), 1.0)
    floor = 64 * np.finfo(np.float64).eps * scale / eps
    worst, entries, zeros = 0.0, 0, 0
    for analytic, numeric in grad_compare(fn, params, eps):
        zero = (np.abs(analytic) <= 1e-12) & (np.abs(numeric) <= floor)
        rel = relative_errors(analytic, numeric)[~zero]
        if rel.size:
            worst = max(worst, float(rel.max()))
        entries += analytic.size
        zeros += int(zero.sum())
    return GradReport(worst, entries, zeros)


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    return F.sum_all(F.mul(out, rng.normal(size=out.shape)))


def gradcheck_suite(seed: int = 0, eps: float = 1e-5) -> dict[str, GradReport]:
    """Gradient report per parameterized operation and per full loss graph."""
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    errs: dict[str, GradReport] = {}

    def input_(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    x4 = input_(2, 4, 4)
    lin = Linear(4, 3, rng)
    errs["linear"] = gradient_report(lambda: _weighted(lin(x4), np.random.default_rng(1)), [x4, lin.weight, lin.bias], eps)
    ln = LayerNorm(4)
    ln.gain.data = rng.normal(size=4)
    ln.bias.data = rng.normal(size=4)
    errs["layer_norm"] = gradient_report(lambda: _weighted(ln(x4), np.random.default_rng(2)), [x4, ln.gain, ln.bias], eps)
    mlp = MLP(4, 2.0, rng, "gelu")
    errs["mlp"] = gradient_report(lambda: _weighted(mlp(x4), np.random.default_rng(3)),
                             [x4] + [p for _, p in mlp.named_parameters()], eps)

    history = input_(2, 8, 1)
    seg = SegmentEmbedding(2, 1, 4, rng)
    errs["segment_embedding"] = gradient_report(lambda: _weighted(seg(history), np.random.default_rng(4)),
                                           [history] + seg.parameters(), eps)
    stpe = STPositionalEncoding(4, 3, 12, 2, 2, 2, rng)
    sensor, tid, diw = np.array([0, 2]), np.array([[1, 3, 5, 7], [11, 0, 2, 4]]), np.array([[0] * 4, [6] * 4])
    errs["st_pe"] = gradient_report(lambda: _weighted(stpe(x4, sensor, tid, diw), np.random.default_rng(5)),
                               [x4] + stpe.parameters(), eps)
    lpe = LearnedPositional(4, 4, rng)
    errs["learned_positional"] = gradient_report(lambda: _weighted(lpe(x4), np.random.default_rng(6)),
                                            [x4] + lpe.parameters(), eps)

    wa = WindowAttention(4, 2, 2, rng)
    errs["window_attention"] = gradient_report(lambda: _weighted(wa(x4), np.random.default_rng(7)),
                                          [x4] + wa.parameters(), eps)
    wl = WindowTransformerLayer(4, 2, 2, 2.0, rng)
    errs["window_transformer_layer"] = gradient_report(lambda: _weighted(wl(x4), np.random.default_rng(8)),
                                                  [x4] + wl.parameters(), eps)
    enc8 = input_(2, 2, 8)
    ca = CrossScaleAttention(8, 4, 2, rng)
    errs["cross_scale_attention"] = gradient_report(lambda: _weighted(ca(enc8, x4), np.random.default_rng(9)),
                                               [enc8, x4] + ca.parameters(), eps)
    cl = CrossScaleTransformerLayer(8, 4, 2, 2.0, rng)
    errs["cross_scale_layer"] = gradient_report(lambda: _weighted(cl(enc8, x4), np.random.default_rng(10)),
                                           [enc8, x4] + cl.parameters(), eps)
    qb = QueryBuilder(cfg, rng)
    spatial = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    inter = input_(2, 8, 1)
    tid8, diw8 = np.tile(np.arange(8), (2, 1)), np.zeros((2, 8), dtype=np.int64)
    errs["query_builder"] = gradient_report(
        lambda: _weighted(qb(inter, sensor, tid8, diw8, spatial), np.random.default_rng(11)),
        [inter, spatial] + qb.parameters(), eps)

    ds = tiny_dataset(cfg, seed=seed)
    batch = sample_batch(ds, cfg, 1, seed)
    model = HUTFormer(cfg, seed=seed)
    enc_params = [p for _, p in model.encoder_parameters()]

    def enc_loss():
        return masked_mae(model.encode(batch).intermediate, batch.future_norm, batch.mask)

    errs["encoder_loss_graph"] = gradient_report(enc_loss, enc_params, eps)

    def dec_loss():
        _, out = model(batch)
        return masked_mae(out, batch.future_norm, batch.mask)

    errs["decoder_loss_graph"] = gradient_report(dec_loss, [p for _, p in model.named_parameters()], eps)

    concat = HUTFormer(dataclasses.replace(cfg, decoder="concat"), seed=seed)

    def concat_loss():
        _, out = concat(batch)
        return masked_mae(out, batch.future_norm, batch.mask)

    errs["concat_head_graph"] = gradient_report(concat_loss, [p for _, p in concat.decoder_parameters()], eps)
    return errs


def check_gradients(seed: int = 0, tol: float = 1e-4) -> CheckResult:
    errs = gradcheck_suite(seed)
    worst = max(errs, key=lambda k: errs[k].max_rel_err)
    zeros = sum(r.zero_entries for r in errs.values())
    entries = sum(r.entries for r in errs.values())
    return CheckResult("gradient correctness", errs[worst].max_rel_err < tol,
                       f"{len(errs)} graphs, {entries} entries ({zeros} exact zeros); worst {worst} "
                       f"rel err {errs[worst].max_rel_err:.2e} (tol {tol:g})")


# ---------------------------------------------------------------- criterion 2


def check_shape_chain() -> CheckResult:
    cfg = ModelConfig(num_sensors=4)
    expected = [(24, 32), (12, 64), (6, 128), (3, 256)]
    ds = generate_synthetic(SyntheticSpec(num_sensors=4, days=3, noise_std=1.0), seed=0)
    batch = sample_batch(ds, cfg, 2)
    model = HUTFormer(cfg)
    with no_grad():
        pyramid, out = model(batch)
    got = pyramid.shapes()
    ok = (cfg.scale_shapes() == expected and got == expected and cfg.head_in_dim == 768
          and cfg.num_dec_segments == 24 and model.encoder.head.weight.shape == (288, 768)
          and out.shape == (2, 288, 1) and pyramid.intermediate.shape == (2, 288, 1))
    return CheckResult("shape chain", ok,
                       f"pyramid {got}, head input {cfg.head_in_dim}, P_dec {cfg.num_dec_segments}")


# ---------------------------------------------------------------- criterion 3


def dependency_oracle(cfg: ModelConfig) -> list[list[set[int]]]:
    """deps[l][j] = input segments that encoder token j at block l can depend on.

    Block 0 token s sees its window; a merged token sees both children; each
    later block widens by its window over merged tokens.
    """
    w = cfg.window_size
    prev = [{s} for s in range(cfg.num_segments)]
    deps = []
    for l, (p, _) in enumerate(cfg.scale_shapes()):
        if l > 0:
            prev = [deps[-1][2 * j] | deps[-1][2 * j + 1] for j in range(p)]
        cur = []
        for j in range(p):
            start = (j // w) * w
            cur.append(set().union(*(prev[k] for k in range(start, start + w))))
        deps.append(cur)
    return deps


def empirical_dependencies(model: HUTFormer, batch) -> list[list[set[int]]]:
    """Perturb each input segment and record which encoder tokens change (bit-exactly)."""
    cfg = model.cfg
    with no_grad():
        base = [s.tokens.data.copy() for s in model.encode(batch).scales]
        deps = [[set() for _ in range(t.shape[-2])] for t in base]
        for m in range(cfg.num_segments):
            pert = dataclasses.replace(batch, history=batch.history.copy())
            pert.history[:, m * cfg.segment_len : (m + 1) * cfg.segment_len, :] += 0.37
            for l, seq in enumerate(model.encode(pert).scales):
                changed = np.any(seq.tokens.data != base[l], axis=tuple(
                    i for i in range(seq.tokens.data.ndim) if i != seq.tokens.data.ndim - 2))
                for j in np.flatnonzero(changed):
                    deps[l][j].add(m)
    return deps


def check_window_locality(seed: int = 0) -> CheckResult:
    cfg = ModelConfig(num_sensors=4)
    ds = generate_synthetic(SyntheticSpec(num_sensors=4, days=3), seed=seed)
    batch = sample_batch(ds, cfg, 1, seed)
    model = HUTFormer(cfg, seed=seed)
    got = empirical_dependencies(model, batch)
    want = dependency_oracle(cfg)
    block1 = all(got[0][s] == want[0][s] for s in range(cfg.num_segments))
    deeper = got == want
    sizes = [len(want[l][0]) for l in range(len(want))]
    return CheckResult("window locality", block1 and deeper,
                       f"block-1 windows exact for {cfg.num_segments} tokens; "
                       f"receptive field sizes per scale {sizes} match oracle: {deeper}")


# ---------------------------------------------------------------- criterion 4


def check_attention_rows(trials: int = 1000, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        heads = int(rng.choice([1, 2, 4]))
        dim = heads * int(rng.integers(1, 5))
        window = int(rng.integers(1, 5))
        p = window * int(rng.integers(1, 5))
        scale = float(10 ** rng.uniform(-2, 1.5))
        x = Tensor(rng.normal(size=(int(rng.integers(1, 4)), p, dim)) * scale)
        wa = WindowAttention(dim, heads, window, rng)
        with no_grad():
            wa(x)
        worst = max(worst, float(np.max(np.abs(wa.last_weights.sum(axis=-1) - 1.0))))
        d_enc = 2 * dim
        ca = CrossScaleAttention(d_enc, dim, heads, rng)
        enc = Tensor(rng.normal(size=(x.shape[0], int(rng.integers(1, 7)), d_enc)) * scale)
        with no_grad():
            ca(enc, x)
        worst = max(worst, float(np.max(np.abs(ca.last_weights.sum(axis=-1) - 1.0))))
    return CheckResult("attention normalization", worst <= tol,
                       f"{trials} trials x (self, cross); worst |row sum - 1| = {worst:.1e}")


# ---------------------------------------------------------------- criterion 7


def check_hi_sanity(sigma: float = 2.0, points: int = 200_000, seed: int = 0) -> CheckResult:
    clean = SyntheticSpec(num_sensors=4, days=6, noise_std=0.0, spike_rate_per_day=0.0)
    ds = generate_synthetic(clean, seed=seed)
    v = ds.values.astype(np.float64)
    windows = np.stack([v[o : o + 576] for o in range(0, len(v) - 576 + 1, 48)])  # [B, 576, N, 1]
    hist, fut = windows[:, :288], windows[:, 288:]
    exact = float(np.abs(hi_baseline(hist.transpose(0, 2, 1, 3), 288)
                         - fut.transpose(0, 2, 1, 3)).max())
    rng = np.random.default_rng(seed)
    n = math.ceil(points / 288)
    base = rng.normal(50, 5, size=(n, 288, 1))
    noisy_hist = base + rng.normal(0, sigma, size=base.shape)
    noisy_fut = base + rng.normal(0, sigma, size=base.shape)
    got = float(np.abs(hi_baseline(noisy_hist, 288) - noisy_fut).mean())
    want = 2 * sigma / math.sqrt(math.pi)
    rel = abs(got - want) / want
    return CheckResult("HI sanity", exact == 0.0 and rel < 0.02,
                       f"noiseless max error {exact}; noisy MAE {got:.4f} vs 2σ/√π {want:.4f} "
                       f"({rel:.2%} off over {n * 288} points)")


# ---------------------------------------------------------------- criterion 10


def check_schedule_and_clipping(seed: int = 0) -> CheckResult:
    cfg = OptimConfig()
    lrs = [lr_at(e, cfg) for e in (0, 50, 130)]
    ok_lr = lrs == [0.0005, 0.000125, 0.00003125]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(200):
        params = [Tensor(np.zeros(int(rng.integers(1, 20))), requires_grad=True) for _ in range(3)]
        for p in params:
            p.grad = rng.normal(size=p.shape) * 10 ** rng.uniform(-3, 4)
        clip_gradients(params, 5.0)
        worst = max(worst, global_grad_norm(params))
    return CheckResult("lr schedule and clipping", ok_lr and worst <= 5.0 + 1e-9,
                       f"lr at epochs 0/50/130 = {lrs}; max clipped norm {worst:.12f}")


# ---------------------------------------------------------------- criterion 11


def check_dataset_round_trip(workdir: str | Path | None = None, seed: int = 0) -> CheckResult:
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        ds = generate_synthetic(SyntheticSpec(num_sensors=3, days=2, start_day_of_week=4), seed=seed)
        save_dataset(ds, Path(tmp) / "rt")
        back = load_dataset(Path(tmp) / "rt")
        exact = back.values.tobytes() == ds.values.tobytes() and back.start_day_of_week == 4
    got = [[(r.start, r.stop) for r in split(t, ratios)]
           for t, ratios in ((34272, (0.7, 0.1, 0.2)), (16992, (0.6, 0.2, 0.2)))]
    want = [[(0, 23990), (23990, 27417), (27417, 34272)],
            [(0, 10195), (10195, 13593), (13593, 16992)]]
    return CheckResult("dataset round trip and splits", exact and got == want,
                       f"bit-exact reload: {exact}; split boundaries {got}")


FAST_CHECKS: dict[str, Callable[[], CheckResult]] = {
    "gradients": check_gradients,
    "shape_chain": check_shape_chain,
    "window_locality": check_window_locality,
    "attention_rows": check_attention_rows,
    "hi_sanity": check_hi_sanity,
    "schedule_clipping": check_schedule_and_clipping,
    "dataset": check_dataset_round_trip,
}


def run_selftest(names: list[str] | None = None, emit: Callable[[str], None] = print) -> bool:
    ok = True
    for name in names or list(FAST_CHECKS):
        result = FAST_CHECKS[name]()
        emit(result.line())
        ok &= result.passed
    return ok
