"""``smoothcache`` command line: calibrate, schedule, run, compare, sweep, export-curves.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 internal invariant breach.
Flags override the JSON config, which overrides ``SMOOTHCACHE_SEED``, which
overrides built-in defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .calibration import calibrate, export_csv, load_curves, save_curves, write_records
from .errors import CacheFault, ConfigError, FormatError, SmoothCacheError
from .diffusion import ddim_sample
from .experiment import ExperimentConfig, resolve_alpha, run_scheduled, run_uncached, sample_context, sweep, write_sweep
from .metrics import RunReport, bench
from .model import build_model
from .runtime import compare_runs, run_cached
from .scheduler import Schedule, predict_macs, synthesize_greedy, synthesize_uniform, validate

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INVARIANT = 0, 2, 3, 4


class _IOFailure(Exception):
    pass


def _load_config(args) -> ExperimentConfig:
    if args.config:
        try:
            cfg = ExperimentConfig.load(args.config)
        except OSError as exc:
            raise _IOFailure(f"cannot read config {args.config}: {exc.strerror}") from None
    else:
        cfg = ExperimentConfig.from_dict({})
    sampler, calib = {}, {}
    if getattr(args, "steps", None) is not None:
        sampler["steps"] = args.steps
    if getattr(args, "cfg_scale", None) is not None:
        sampler["cfg_scale"] = args.cfg_scale
    if getattr(args, "k_max", None) is not None:
        calib["k_max"] = args.k_max
    if getattr(args, "samples", None) is not None:
        calib["n_samples"] = args.samples
    try:
        if sampler:
            cfg.sampler = dataclasses.replace(cfg.sampler, **sampler)
        if calib:
            cfg.calib = dataclasses.replace(cfg.calib, **calib)
        if getattr(args, "seed", None) is not None:
            if args.command == "calibrate":
                cfg.calib = dataclasses.replace(cfg.calib, seed=args.seed)
            else:
                cfg.seeds = [args.seed]
        cfg.__post_init__()
    except TypeError as exc:
        raise ConfigError("<flags>", str(exc)) from None
    if getattr(args, "threads", None):
        nx.set_num_threads(args.threads)
    return cfg


def _read(fn, path):
    try:
        return fn(path)
    except FileNotFoundError:
        raise _IOFailure(f"no such file: {path}") from None
    except IsADirectoryError:
        raise _IOFailure(f"is a directory: {path}") from None


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or Path(cfg.output_dir) / "curves.json")
    model = build_model(cfg.model)
    result = calibrate(model, cfg.sampler, cfg.calib)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_curves(result.curves, out)
    write_records(result.records, _sibling(out, ".records.jsonl"))
    for kind, curve in result.curves.items():
        export_csv(curve, _sibling(out, f".{kind.value}.csv"))
    print(f"cells: {result.cell_count}  degenerate records: {result.degenerate_count}")
    for kind, curve in sorted(result.curves.items(), key=lambda kv: kv[0].value):
        print(f"  {kind.value}: {len(curve.cells)} cells")
    print(f"wrote {out}")
    return EXIT_OK


def _alpha_arg(text: str):
    try:
        ExperimentConfig(alphas=[text if text.startswith("p") else float(text)])
    except (ConfigError, ValueError):
        raise argparse.ArgumentTypeError(f"{text!r} is not a threshold > 0 or a 'pNN' percentile") from None
    return text if text.startswith("p") else float(text)


def cmd_schedule(args) -> int:
    if (args.alpha is None) == (args.uniform is None):
        raise ConfigError("--alpha/--uniform", "give exactly one of --alpha or --uniform")
    cfg = _load_config(args)
    curves = _read(load_curves, args.curves)
    steps = args.steps or next(iter(curves.values())).steps
    if args.alpha is not None:
        k_max = args.k_max or max(c.k_max for c in curves.values())
        alpha = resolve_alpha(args.alpha, curves)
        if isinstance(args.alpha, str):
            print(f"alpha {args.alpha} = {alpha:.6f}")
        schedule = synthesize_greedy(curves, alpha, k_max, steps)
    else:
        if args.uniform < 1:
            raise ConfigError("--uniform", "period must be >= 1")
        schedule = synthesize_uniform(args.uniform, steps, cfg.model.kinds)
    problems = validate(schedule)
    if problems:
        raise CacheFault(f"synthesized schedule is invalid: {problems[0]}")
    out = Path(args.out or Path(cfg.output_dir) / "schedule.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    schedule.save(out)
    sampler = dataclasses.replace(cfg.sampler, steps=steps)
    pred = predict_macs(schedule, cfg.model, sampler)
    for kind in cfg.model.kinds:
        print(f"  {kind.value}: {schedule.computed_steps(kind)}/{steps} steps computed")
    print(f"predicted MAC ratio: {pred.ratio:.6f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    schedule = _read(Schedule.load, args.schedule) if args.schedule else None
    if schedule is not None and schedule.steps != cfg.sampler.steps:
        raise ConfigError("schedule.steps", f"schedule has {schedule.steps} steps, sampler runs {cfg.sampler.steps}")
    model = build_model(cfg.model)
    out_dir = Path(args.out or Path(cfg.output_dir) / "samples")
    out_dir.mkdir(parents=True, exist_ok=True)

    baseline_macs = None
    fidelity = []
    total = None
    for seed in cfg.seeds:
        base = run_uncached(model, cfg, seed)
        baseline_macs = base.macs
        run = base if schedule is None else run_scheduled(model, cfg, schedule, seed)
        if schedule is not None:
            pred = predict_macs(schedule, cfg.model, cfg.sampler)
            if run.macs != pred.total:
                raise CacheFault(f"runtime MACs {run.macs} != predicted {pred.total}")
        total = run.macs
        nx.write_sctd(out_dir / f"sample_{seed}.sctd", run.x0)
        nx.write_sctd_sequence(out_dir / f"trajectory_{seed}.sctd", run.trajectory)
        fidelity.append(compare_runs(base.x0, run.x0, base.trajectory, run.trajectory))

    sampler = dataclasses.replace(cfg.sampler, seed=cfg.seeds[0])
    ctx = sample_context(cfg, cfg.seeds[0])
    if schedule is None:
        latency = bench(lambda: ddim_sample(model, sampler, context=ctx), cfg.warmup, cfg.bench_runs)
    else:
        latency = bench(lambda: run_cached(model, sampler, schedule, ctx), cfg.warmup, cfg.bench_runs)
    report = RunReport(
        macs_total=total,
        macs_baseline=baseline_macs,
        fidelity={
            "rel_l1": float(np.mean([f.rel_l1 for f in fidelity])),
            "psnr": float(np.mean([f.psnr for f in fidelity])),
            "cosine": float(np.mean([f.cosine for f in fidelity])),
        },
        latency=latency,
    )
    report_path = Path(args.report or Path(cfg.output_dir) / "report.json")
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report.to_json(include_latency=False), indent=1, sort_keys=True) + "\n")
    _sibling(report_path, ".latency.json").write_text(
        json.dumps({"latency": latency.to_json()}, indent=1, sort_keys=True) + "\n"
    )
    print(f"MAC ratio {report.mac_ratio:.6f}  rel_l1 {report.fidelity['rel_l1']:.6g}  "
          f"latency {latency.mean_s:.4f}s ± {latency.std_s:.4f}s")
    print(f"wrote {report_path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    base = _read(nx.read_sctd, args.baseline)
    cached = _read(nx.read_sctd, args.cached)
    if base.shape != cached.shape:
        raise ConfigError("--cached", f"shape {cached.shape} differs from baseline {base.shape}")
    report = compare_runs(base, cached)
    text = json.dumps(report.to_json(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    if getattr(args, "alpha", None) is not None:
        cfg.alphas = [args.alpha]
    if getattr(args, "uniform", None) is not None:
        cfg.baselines = [args.uniform]
    cfg.__post_init__()
    result = sweep(cfg)
    out = Path(args.out or cfg.output_dir)
    paths = write_sweep(result, out)
    save_curves(result.calibration.curves, out / "curves.json")
    print(paths["markdown"].read_text(), end="")
    return EXIT_OK


def cmd_export_curves(args) -> int:
    curves = _read(load_curves, args.curves)
    out = Path(args.out or Path(args.curves).parent)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.curves).stem
    for kind, curve in curves.items():
        path = out / f"{stem}.{kind.value}.csv"
        export_csv(curve, path)
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smoothcache", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *flags):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--out", help="output path")
        p.add_argument("--threads", type=int, help="matmul worker threads (results stay bitwise identical)")
        if "seed" in flags:
            p.add_argument("--seed", type=int)
        if "sampler" in flags:
            p.add_argument("--steps", type=int)
            p.add_argument("--cfg-scale", type=float)
        if "calib" in flags:
            p.add_argument("--k-max", type=int)
            p.add_argument("--samples", type=int)
        return p

    p = common(sub.add_parser("calibrate", help="run calibration passes and write error curves"), "seed", "sampler", "calib")
    p.set_defaults(func=cmd_calibrate)

    p = common(sub.add_parser("schedule", help="synthesize a caching schedule"), "sampler")
    p.add_argument("--curves", required=True)
    p.add_argument("--alpha", type=_alpha_arg, help="threshold > 0, or pNN for a percentile of curve means")
    p.add_argument("--uniform", type=int)
    p.add_argument("--k-max", type=int)
    p.set_defaults(func=cmd_schedule)

    p = common(sub.add_parser("run", help="sample with (or without) a schedule and report"), "seed", "sampler")
    p.add_argument("--schedule")
    p.add_argument("--report")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="fidelity of a cached sample against a baseline sample")
    p.add_argument("--baseline", required=True)
    p.add_argument("--cached", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = common(sub.add_parser("sweep", help="calibrate once and evaluate every alpha / uniform schedule"),
               "seed", "sampler", "calib")
    p.add_argument("--alpha", type=_alpha_arg, help="threshold > 0, or pNN for a percentile of curve means")
    p.add_argument("--uniform", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-curves", help="write per-kind CSV files from a curves JSON")
    p.add_argument("--curves", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_curves)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage; bad arguments are validation failures
        return EXIT_VALIDATION if exc.code else EXIT_OK
    try:
        return args.func(args)
    except _IOFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CacheFault as exc:
        print(f"internal invariant breach: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SmoothCacheError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
