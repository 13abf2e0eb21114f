"""Experiment configuration and the calibrate / schedule / run / sweep pipeline."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from datetime import datetime, timezone
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .calibration import CalibrationConfig, CalibrationResult, Curves, calibrate, curve_means
from .diffusion import SamplerConfig, ddim_sample
from .errors import CacheFault, ConfigError
from .metrics import LatencyStats, bench, implied_eligible_fraction, mac_model
from .model import Model, ModelConfig, build_model, make_context
from .runtime import compare_runs, run_cached
from .scheduler import Schedule, predict_macs, synthesize_greedy, synthesize_uniform, validate

SEED_ENV = "SMOOTHCACHE_SEED"

# Published DiT-XL/2 (50 DDIM steps) TMACs: uncached vs uniform caching with n=2.
REFERENCE_UNCACHED_TMACS = 365.59
REFERENCE_UNIFORM2_TMACS = 190.25
REFERENCE_COMPUTED_FRACTION = 26 / 50


@dataclass
class ExperimentConfig:
    """Everything a sweep needs.

    ``alphas`` entries are either numeric thresholds or ``"pNN"`` strings,
    meaning the NN-th percentile of all calibration curve means.
    ``baselines`` are uniform periods; ``n=1`` is the uncached reference row.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    calib: CalibrationConfig = field(default_factory=CalibrationConfig)
    alphas: list = field(default_factory=lambda: ["p30", "p60", "p90"])
    baselines: list[int] = field(default_factory=lambda: [1, 2, 3])
    seeds: list[int] = field(default_factory=lambda: [0])
    warmup: int = 1
    bench_runs: int = 3
    output_dir: str = "runs"

    def __post_init__(self):
        for i, a in enumerate(self.alphas):
            if isinstance(a, str):
                try:
                    p = float(a[1:]) if a.startswith("p") else None
                except ValueError:
                    p = None
                if p is None or not 0 <= p <= 100:
                    raise ConfigError(f"alphas[{i}]", f"{a!r} is not a number or a 'pNN' percentile")
            elif isinstance(a, bool) or not isinstance(a, (int, float)) or not a > 0:
                raise ConfigError(f"alphas[{i}]", f"threshold must be > 0, got {a!r}")
        for i, n in enumerate(self.baselines):
            if isinstance(n, bool) or not isinstance(n, int) or n < 1:
                raise ConfigError(f"baselines[{i}]", f"uniform period must be an integer >= 1, got {n!r}")
        if not self.seeds:
            raise ConfigError("seeds", "need at least one seed")
        for i, s in enumerate(self.seeds):
            if isinstance(s, bool) or not isinstance(s, int) or s < 0:
                raise ConfigError(f"seeds[{i}]", "must be a non-negative integer")
        if self.warmup < 0:
            raise ConfigError("bench.warmup", "must be >= 0")
        if self.bench_runs < 1:
            raise ConfigError("bench.runs", "must be >= 1")

    @property
    def use_context(self) -> bool:
        return self.calib.conditional or self.sampler.guided

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "sampler": self.sampler.to_dict(),
            "calibration": self.calib.to_dict(),
            "alphas": list(self.alphas),
            "baselines": list(self.baselines),
            "seeds": list(self.seeds),
            "bench": {"warmup": self.warmup, "runs": self.bench_runs},
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {"model", "sampler", "calibration", "alphas", "baselines", "seeds", "bench", "output_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError("<root>", f"unknown fields {sorted(unknown)}")
        kwargs = {}
        try:
            if "model" in data:
                kwargs["model"] = ModelConfig.from_dict(data["model"])
            if "sampler" in data:
                kwargs["sampler"] = SamplerConfig.from_dict(data["sampler"])
            if "calibration" in data:
                kwargs["calib"] = CalibrationConfig.from_dict(data["calibration"])
        except TypeError as exc:
            raise ConfigError("<root>", str(exc)) from None
        for name in ("alphas", "baselines", "seeds"):
            if name in data:
                if not isinstance(data[name], list):
                    raise ConfigError(name, "must be a list")
                kwargs[name] = list(data[name])
        bench_cfg = data.get("bench", {})
        if "warmup" in bench_cfg:
            kwargs["warmup"] = bench_cfg["warmup"]
        if "runs" in bench_cfg:
            kwargs["bench_runs"] = bench_cfg["runs"]
        if "output_dir" in data:
            kwargs["output_dir"] = str(data["output_dir"])
        if "seeds" not in data and "sampler" in kwargs and "seed" in data["sampler"]:
            kwargs["seeds"] = [kwargs["sampler"].seed]
        elif "seeds" not in data:
            env = os.environ.get(SEED_ENV)
            if env is not None:
                try:
                    seed = int(env)
                except ValueError:
                    raise ConfigError(SEED_ENV, f"not an integer: {env!r}") from None
                kwargs["seeds"] = [seed]
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(doc)


def resolve_alpha(value, curves: Curves) -> float:
    if isinstance(value, str):
        return float(np.percentile(curve_means(curves), float(value[1:])))
    return float(value)


def sample_context(cfg: ExperimentConfig, seed: int) -> np.ndarray | None:
    return make_context(cfg.model, seed) if cfg.use_context else None


@dataclass
class SeedRun:
    seed: int
    x0: np.ndarray
    trajectory: list[np.ndarray]
    macs: int


def run_uncached(model: Model, cfg: ExperimentConfig, seed: int) -> SeedRun:
    sampler = dataclasses.replace(cfg.sampler, seed=seed)
    with nx.count_macs() as counter:
        x0, traj = ddim_sample(model, sampler, context=sample_context(cfg, seed))
    return SeedRun(seed, x0, traj, counter.total)


def run_scheduled(model: Model, cfg: ExperimentConfig, schedule: Schedule, seed: int) -> SeedRun:
    sampler = dataclasses.replace(cfg.sampler, seed=seed)
    result = run_cached(model, sampler, schedule, context=sample_context(cfg, seed))
    return SeedRun(seed, result.x0, result.trajectory, result.trace.macs)


@dataclass
class SweepRow:
    label: str
    alpha: float | None
    uniform: int | None
    reused: int
    computed: dict[str, int]
    rel_l1: float
    psnr: float
    cosine: float
    mac_ratio: float
    macs: int
    latency: LatencyStats | None = None

    def to_json(self) -> dict:
        return {
            "schedule": self.label,
            "alpha": self.alpha,
            "uniform": self.uniform,
            "reused": self.reused,
            "computed": self.computed,
            "rel_l1": self.rel_l1,
            "psnr": self.psnr,
            "cosine": self.cosine,
            "mac_ratio": self.mac_ratio,
            "macs": self.macs,
        }


@dataclass
class SweepResult:
    rows: list[SweepRow]
    calibration: CalibrationResult
    baseline_macs: int
    eligible_fraction: float

    def to_json(self) -> dict:
        return {
            "baseline_macs": self.baseline_macs,
            "eligible_fraction": self.eligible_fraction,
            "rows": [r.to_json() for r in self.rows],
        }


def evaluate_schedule(model: Model, cfg: ExperimentConfig, schedule: Schedule, baselines: dict[int, SeedRun]):
    """Run `schedule` on every seed; returns mean fidelity and the (seed-invariant) MAC count."""
    predicted = predict_macs(schedule, cfg.model, cfg.sampler)
    fidelity = []
    macs = None
    for seed in cfg.seeds:
        run = run_scheduled(model, cfg, schedule, seed)
        if run.macs != predicted.total:
            raise CacheFault(f"{schedule.label}: runtime MACs {run.macs} != predicted {predicted.total}")
        macs = run.macs
        base = baselines[seed]
        fidelity.append(compare_runs(base.x0, run.x0, base.trajectory, run.trajectory))
    mean = lambda xs: float(np.mean(xs))  # noqa: E731
    return (
        mean([f.rel_l1 for f in fidelity]),
        mean([f.psnr for f in fidelity]),
        mean([f.cosine for f in fidelity]),
        macs,
        predicted,
    )


def build_schedules(cfg: ExperimentConfig, curves: Curves) -> list[Schedule]:
    kinds = cfg.model.kinds
    schedules = []
    for choice in cfg.alphas:
        alpha = resolve_alpha(choice, curves)
        sched = synthesize_greedy(curves, alpha, cfg.calib.k_max, cfg.sampler.steps)
        sched.label = f"alpha={alpha:.4f}" + (f" ({choice})" if isinstance(choice, str) else "")
        schedules.append(sched)
    for n in cfg.baselines:
        sched = synthesize_uniform(n, cfg.sampler.steps, kinds)
        sched.label = "no cache" if n == 1 else f"uniform n={n}"
        schedules.append(sched)
    return schedules


def sweep(cfg: ExperimentConfig, model: Model | None = None, timed: bool = True) -> SweepResult:
    """Calibrate once, then run every alpha and uniform schedule against the uncached baseline.

    Rows come back sorted by MAC ratio, highest first.
    """
    if not cfg.alphas and not cfg.baselines:
        raise ConfigError("alphas", "sweep needs at least one alpha or uniform baseline")
    model = model or build_model(cfg.model)
    calib = calibrate(model, cfg.sampler, cfg.calib)
    baselines = {seed: run_uncached(model, cfg, seed) for seed in cfg.seeds}
    baseline_macs = baselines[cfg.seeds[0]].macs

    rows = []
    for sched in build_schedules(cfg, calib.curves):
        problems = validate(sched)
        if problems:
            raise CacheFault(f"{sched.label}: synthesized schedule invalid: {problems[0]}")
        rel_l1, psnr_db, cosine, macs, predicted = evaluate_schedule(model, cfg, sched, baselines)
        latency = None
        if timed:
            sampler = dataclasses.replace(cfg.sampler, seed=cfg.seeds[0])
            ctx = sample_context(cfg, cfg.seeds[0])
            latency = bench(lambda: run_cached(model, sampler, sched, ctx), cfg.warmup, cfg.bench_runs)
        rows.append(
            SweepRow(
                label=sched.label,
                alpha=sched.alpha,
                uniform=None if sched.alpha is not None else sched.k_max,
                reused=sched.reuse_count(),
                computed={k.value: sched.computed_steps(k) for k in cfg.model.kinds},
                rel_l1=rel_l1,
                psnr=psnr_db,
                cosine=cosine,
                mac_ratio=macs / baseline_macs,
                macs=macs,
                latency=latency,
            )
        )
    rows.sort(key=lambda r: (-r.mac_ratio, r.label))
    return SweepResult(rows, calib, baseline_macs, mac_model(cfg.model).eligible_fraction)


def reference_eligible_fraction() -> float:
    ratio = REFERENCE_UNIFORM2_TMACS / REFERENCE_UNCACHED_TMACS
    return implied_eligible_fraction(ratio, REFERENCE_COMPUTED_FRACTION)


def sweep_markdown(result: SweepResult) -> str:
    lines = [
        "| schedule | rel_l1 | psnr (dB) | cosine | MAC ratio | latency (s) |",
        "|---|---|---|---|---|---|",
    ]
    for r in result.rows:
        lat = "-" if r.latency is None else f"{r.latency.mean_s:.4f} ± {r.latency.std_s:.4f}"
        lines.append(
            f"| {r.label} | {r.rel_l1:.6f} | {r.psnr:.2f} | {r.cosine:.6f} | {r.mac_ratio:.4f} | {lat} |"
        )
    ref_ratio = REFERENCE_UNIFORM2_TMACS / REFERENCE_UNCACHED_TMACS
    lines += [
        "",
        f"Toy model eligible MAC fraction: {result.eligible_fraction:.3f}",
        "",
        "Cross-check against published DiT-XL/2 numbers (50 DDIM steps): uniform n=2 costs "
        f"{REFERENCE_UNIFORM2_TMACS} / {REFERENCE_UNCACHED_TMACS} TMACs = {ref_ratio:.4f}; solving "
        f"ratio = (1 - f) + f * 26/50 gives eligible fraction f = {reference_eligible_fraction():.3f}.",
    ]
    return "\n".join(lines) + "\n"


def write_sweep(result: SweepResult, out_dir: str | Path) -> dict[str, Path]:
    """Write deterministic artifacts plus a separate, timestamped latency file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out / "sweep.json",
        "csv": out / "sweep.csv",
        "markdown": out / "sweep.md",
        "latency": out / "sweep.latency.json",
    }
    paths["json"].write_text(json.dumps(result.to_json(), indent=1, sort_keys=True) + "\n")
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["schedule", "rel_l1", "psnr", "cosine", "mac_ratio"])
        for r in result.rows:
            writer.writerow([r.label, repr(r.rel_l1), repr(r.psnr), repr(r.cosine), repr(r.mac_ratio)])
    paths["markdown"].write_text(sweep_markdown(result))
    latency = {
        "generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "rows": {r.label: r.latency.to_json() for r in result.rows if r.latency is not None},
    }
    paths["latency"].write_text(json.dumps(latency, indent=1, sort_keys=True) + "\n")
    return paths
