"""Command-line interface: ``hutformer <subcommand> [options]``.

Run settings come from an optional ``--config`` key=value file; every setting
also has a ``--<key>`` flag (underscores as dashes) that overrides the file.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Sequence

from . import config as cfgmod
from .checks import FAST_CHECKS, gradcheck_suite, run_selftest
from .config import RunConfig
from .dataset import SyntheticSpec, convert_csv, generate_synthetic, load_dataset, multiscale_spec, \
    save_dataset, split
from .errors import ConfigError, DataError, HutformerError, NumericError
from .evaluation import (benchmark, evaluate, export_embeddings, export_predictions, hi_predictor,
                         model_predictor)
from .training import (load_model, norm_stats_from, prepare, run_config_for, train_end2end, train_stage1,
                       train_stage2)


# ---------------------------------------------------------------- run-config plumbing


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value run configuration file")
    g = p.add_argument_group("run settings (override the config file)")
    for name in cfgmod.setting_names():
        g.add_argument("--" + name.replace("_", "-"), dest="set_" + name, metavar="VALUE")


def _run_config(args) -> RunConfig:
    try:
        run = cfgmod.load_file(args.config) if args.config else RunConfig()
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config file {args.config}: {e}") from e
    for name in cfgmod.setting_names():
        value = getattr(args, "set_" + name, None)
        if value is not None:
            cfgmod.set_value(run, name, value)
    run.model.validate()
    run.optim.validate()
    return run


def _dataset(run: RunConfig):
    if not run.dataset:
        raise ConfigError("no dataset given (set dataset= in the config or pass --dataset)")
    return load_dataset(run.dataset)


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _epoch_logger(line: dict):
    print(f"[{line['stage']}] epoch {line['epoch']:>3d}  lr {line['lr']:.3g}  "
          f"train_mae {line['train_mae']:.4f}  val_mae {line['val_mae']:.4f}  ({line['seconds']:.1f}s)",
          flush=True)


# ---------------------------------------------------------------- subcommands


def cmd_convert_csv(args):
    ds = convert_csv(args.csv, args.out, name=args.name, sample_interval_minutes=args.interval,
                     start_slot_of_day=args.start_slot, start_day_of_week=args.start_dow)
    print(f"wrote {args.out}.json/.bin: {ds.num_steps} steps x {ds.num_sensors} sensors x "
          f"{ds.num_channels} channels")


def cmd_generate_synthetic(args):
    overrides = {k: v for k, v in (
        ("num_sensors", args.num_sensors), ("days", args.days), ("noise_std", args.noise),
        ("spike_rate_per_day", args.spike_rate), ("spike_depth", args.spike_depth),
        ("spike_width", args.spike_width), ("start_day_of_week", args.start_dow),
        ("name", args.name)) if v is not None}
    spec = multiscale_spec(**overrides) if args.preset == "multiscale" else SyntheticSpec(**overrides)
    ds = generate_synthetic(spec, seed=args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}.json/.bin: {ds.num_steps} steps x {ds.num_sensors} sensors (seed {args.seed})")


def cmd_train_encoder(args):
    run = _run_config(args)
    ds = _dataset(run)
    run = run_config_for(ds, run)
    Path(run.output_dir).mkdir(parents=True, exist_ok=True)
    cfgmod.save_file(run, Path(run.output_dir) / "run.cfg")
    log = None if args.quiet else _epoch_logger
    if run.optim.training_mode == "end2end":
        # a single joint stage produces both checkpoints; train-decoder is not needed
        res = train_end2end(ds, run, log)[1]
        print(f"end-to-end checkpoints {Path(run.output_dir) / 'encoder'}, {res.checkpoint} "
              f"(best val MAE {res.best_val_mae:.4f})")
        return
    res = train_stage1(ds, run, log)
    print(f"encoder checkpoint {res.checkpoint} (best val MAE {res.best_val_mae:.4f}, "
          f"sha256 {res.payload_sha256})")


def cmd_train_decoder(args):
    run = _run_config(args)
    ds = _dataset(run)
    run = run_config_for(ds, run)
    enc = Path(args.encoder_checkpoint or Path(run.output_dir) / "encoder")
    res = train_stage2(ds, enc, run, log=None if args.quiet else _epoch_logger)
    print(f"decoder checkpoint {res.checkpoint} (best val MAE {res.best_val_mae:.4f}, "
          f"sha256 {res.payload_sha256})")


def _checkpoints(args, run: RunConfig):
    enc = Path(args.encoder_checkpoint or Path(run.output_dir) / "encoder")
    dec = args.decoder_checkpoint
    if dec is None and not args.encoder_only:
        default = Path(run.output_dir) / "decoder"
        dec = default if default.with_suffix(".json").exists() else None
    return enc, (Path(dec) if dec else None)


def _split_range(ds, args, run: RunConfig, name: str, manifest: dict | None = None) -> range:
    """Split used for scoring: the checkpoint's own ratios unless --split-ratios is given."""
    names = ("train", "val", "test")
    if name not in names:
        raise ConfigError(f"split must be one of {names}")
    ratios = run.split_ratios
    if manifest is not None and args.set_split_ratios is None:
        ratios = manifest["config"]["split_ratios"]
    return split(ds, ratios)[names.index(name)]


def cmd_evaluate(args):
    run = _run_config(args)
    ds = _dataset(run)
    out_dir = Path(args.out_dir or Path(run.output_dir) / "reports")
    manifest = None
    if args.baseline == "hi":
        resolved = run_config_for(ds, run)
        m = resolved.model
        stats = prepare(ds, resolved).stats
        predictor, name, stage = hi_predictor(m.horizon), "HI", "hi"
    else:
        enc, dec = _checkpoints(args, run)
        model, manifest = load_model(enc, dec)
        m, stats = model.cfg, norm_stats_from(manifest)
        stage = "encoder" if dec is None else "final"
        predictor = model_predictor(model, stats, stage)
        name = f"HUTFormer[{manifest['config']['variant']}, {stage}]"
    rg = _split_range(ds, args, run, args.split, manifest)
    report = evaluate(predictor, ds, rg, m.history_len, m.horizon, stats, horizons=run.horizons,
                      stride=run.optim.eval_stride, mask_zeros=run.mask_zeros, cumulative=run.cumulative_horizons, name=name,
                      split_name=args.split)
    path = report.write(out_dir, f"{args.split}-{stage}")
    print(report.to_text(), end="")
    print(f"report: {path} (+ .csv, .txt)")


def cmd_predict(args):
    run = _run_config(args)
    ds = _dataset(run)
    enc, dec = _checkpoints(args, run)
    model, manifest = load_model(enc, dec)
    stats = norm_stats_from(manifest)
    ids = [int(s) for s in args.samples.split(",") if s.strip()]
    path = export_predictions(model_predictor(model, stats, "encoder" if dec is None else "final"),
                              ds, _split_range(ds, args, run, args.split, manifest), model.cfg.history_len,
                              model.cfg.horizon, stats, ids, args.out, stride=run.optim.eval_stride,
                              mask_zeros=run.mask_zeros)
    print(f"wrote {path}")


def cmd_export_embeddings(args):
    model, _ = load_model(args.encoder_checkpoint, args.decoder_checkpoint)
    for path in export_embeddings(model, args.out_dir):
        print(path)


def cmd_gradcheck(args):
    errs = gradcheck_suite(seed=args.seed, eps=args.eps)
    width = max(map(len, errs))
    for name, r in errs.items():
        print(f"{name:<{width}}  max rel err {r.max_rel_err:.3e}  entries {r.entries:>5d}  "
              f"exact zeros {r.zero_entries}")
    worst = max(r.max_rel_err for r in errs.values())
    if args.out:
        Path(args.out).write_text(json.dumps({k: dataclasses.asdict(v) for k, v in errs.items()},
                                             indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if worst >= args.tol:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e} >= {args.tol:g}")
    print(f"PASS: max relative error {worst:.3e} < {args.tol:g}")


def cmd_benchmark(args):
    run = _run_config(args)
    ds = _dataset(run)
    report = benchmark(ds, run, measured_epochs=args.epochs, warmup_epochs=args.warmup)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _print_json(report)


def cmd_selftest(args):
    names = args.only.split(",") if args.only else None
    if names:
        unknown = [n for n in names if n not in FAST_CHECKS]
        if unknown:
            raise ConfigError(f"unknown check(s) {unknown}; choose from {list(FAST_CHECKS)}")
    if not run_selftest(names):
        raise NumericError("selftest failed")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hutformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert-csv", help="import a sensor-per-column CSV into the binary format")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True, help="output path stem (writes .json and .bin)")
    p.add_argument("--name")
    p.add_argument("--interval", type=int, default=5, help="sampling interval in minutes")
    p.add_argument("--start-slot", type=int, default=0, help="time-of-day slot of the first row")
    p.add_argument("--start-dow", type=int, default=0, help="day of week of the first row (Monday=0)")
    p.set_defaults(func=cmd_convert_csv)

    p = sub.add_parser("generate-synthetic", help="write a seeded synthetic traffic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=("basic", "multiscale"), default="basic")
    p.add_argument("--num-sensors", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--spike-rate", type=float, help="random dips per sensor per day")
    p.add_argument("--spike-depth", type=float)
    p.add_argument("--spike-width", type=int)
    p.add_argument("--start-dow", type=int)
    p.add_argument("--name")
    p.set_defaults(func=cmd_generate_synthetic)

    for name, func, helptext in (("train-encoder", cmd_train_encoder, "stage 1: embedding + encoder"),
                                 ("train-decoder", cmd_train_decoder, "stage 2: decoder, encoder frozen")):
        p = sub.add_parser(name, help=helptext)
        _add_run_flags(p)
        p.add_argument("--quiet", action="store_true", help="no per-epoch progress lines")
        if name == "train-decoder":
            p.add_argument("--encoder-checkpoint", help="default: <output_dir>/encoder")
        p.set_defaults(func=func)

    for name, func, helptext in (("evaluate", cmd_evaluate, "horizon-wise metrics report"),
                                 ("predict", cmd_predict, "export per-step predictions as CSV")):
        p = sub.add_parser(name, help=helptext)
        _add_run_flags(p)
        p.add_argument("--encoder-checkpoint", help="default: <output_dir>/encoder")
        p.add_argument("--decoder-checkpoint", help="default: <output_dir>/decoder if present")
        p.add_argument("--encoder-only", action="store_true", help="score the intermediate prediction")
        p.add_argument("--split", default="test")
        if name == "evaluate":
            p.add_argument("--baseline", choices=("hi",), help="score a baseline instead of a model")
            p.add_argument("--out-dir", help="default: <output_dir>/reports")
        else:
            p.add_argument("--samples", default="0", help="comma-separated sample ids")
            p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("export-embeddings", help="dump learned positional tables as CSV")
    p.add_argument("--encoder-checkpoint", required=True)
    p.add_argument("--decoder-checkpoint")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameterized op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", help="write the per-graph report as JSON")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("benchmark", help="seconds/epoch and peak memory")
    _add_run_flags(p)
    p.add_argument("--epochs", type=int, default=3, help="measured epochs (>= 3)")
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("selftest", help="run the invariant suites")
    p.add_argument("--only", help=f"comma-separated subset of {','.join(FAST_CHECKS)}")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except HutformerError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
