"""Execute a sampling run under a static schedule and compare it with the uncached run."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .diffusion import SamplerConfig, ddim_sample
from .errors import CacheFault, ConfigError
from .model import BranchOutput, BranchPolicy, LayerKey, Model
from .scheduler import COMPUTE, Decision, Schedule, is_compute, validate

PSNR_CAP_DB = 99.0


@dataclass
class CacheEntry:
    value: np.ndarray
    source_step: int


@dataclass
class ExecutionTrace:
    """What actually happened per (step, sublayer): ``"C"`` or the reused source step."""

    actions: dict[tuple[int, LayerKey], Decision] = field(default_factory=dict)
    macs: int = 0
    macs_by_label: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.actions)

    def mismatches(self, schedule: Schedule, keys: list[LayerKey]) -> list[str]:
        out = []
        for s in range(schedule.steps):
            for key in keys:
                planned = schedule.decisions[key.kind][s]
                actual = self.actions.get((s, key))
                if actual != planned:
                    out.append(f"step {s} {key.kind.value}[{key.block}]: planned {planned!r}, got {actual!r}")
        return out

    def computed_count(self, key: LayerKey) -> int:
        return sum(1 for (_, k), a in self.actions.items() if k == key and is_compute(a))

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for (s, key), action in sorted(self.actions.items(), key=lambda kv: (kv[0][0], kv[0][1].block, kv[0][1].kind.value)):
                row = {"step": s, "kind": key.kind.value, "block": key.block, "action": action}
                fh.write(json.dumps(row, sort_keys=True) + "\n")


class ScheduledCache(BranchPolicy):
    """Branch policy that follows a schedule, one live cache entry per sublayer."""

    def __init__(self, schedule: Schedule):
        self.schedule = schedule
        self.store: dict[LayerKey, CacheEntry] = {}
        self.trace = ExecutionTrace()

    def lookup(self, key: LayerKey, step: int) -> np.ndarray | None:
        decision = self.schedule.decisions[key.kind][step]
        if is_compute(decision):
            return None
        entry = self.store.get(key)
        if entry is None:
            raise CacheFault(f"step {step} {key.kind.value}[{key.block}]: reuse before any compute")
        if entry.source_step != decision:
            raise CacheFault(
                f"step {step} {key.kind.value}[{key.block}]: cache holds step {entry.source_step}, "
                f"schedule wants {decision}"
            )
        self.trace.actions[(step, key)] = entry.source_step
        return entry.value

    def record(self, output: BranchOutput) -> None:
        self.store[output.key] = CacheEntry(output.value.copy(), output.step)
        self.trace.actions[(output.step, output.key)] = COMPUTE


class CachedRun(NamedTuple):
    x0: np.ndarray
    trace: ExecutionTrace
    trajectory: list[np.ndarray]


def check_runnable(model: Model, sampler_cfg: SamplerConfig, schedule: Schedule) -> None:
    if schedule.steps != sampler_cfg.steps:
        raise ConfigError("schedule.steps", f"schedule has {schedule.steps} steps, sampler runs {sampler_cfg.steps}")
    missing = [k.value for k in model.kinds if k not in schedule.decisions]
    if missing:
        raise ConfigError("schedule.decisions", f"no decisions for layer kinds {missing}")
    problems = validate(schedule)
    if problems:
        raise ConfigError("schedule", "; ".join(problems[:5]))


def run_cached(
    model: Model,
    sampler_cfg: SamplerConfig,
    schedule: Schedule,
    context: np.ndarray | None = None,
) -> CachedRun:
    """Sample under `schedule`; the returned trace is checked against the plan.

    A trace that disagrees with the schedule raises CacheFault.
    """
    check_runnable(model, sampler_cfg, schedule)
    policy = ScheduledCache(schedule)
    with nx.count_macs() as counter:
        x0, trajectory = ddim_sample(model, sampler_cfg, policy=policy, context=context)
    policy.trace.macs = counter.total
    policy.trace.macs_by_label = dict(counter.by_label)
    diff = policy.trace.mismatches(schedule, model.keys)
    if diff:
        raise CacheFault(f"trace diverged from schedule: {diff[0]} ({len(diff)} mismatches)")
    return CachedRun(x0, policy.trace, trajectory)


@dataclass(frozen=True)
class FidelityReport:
    rel_l1: float
    psnr: float
    cosine: float
    trajectory_rel_l1: list[float]

    def to_json(self) -> dict:
        return {"rel_l1": self.rel_l1, "psnr": self.psnr, "cosine": self.cosine}


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """PSNR in dB using the reference's value range as peak, capped at 99 dB."""
    ref = np.asarray(reference, np.float64)
    mse = float(np.mean((ref - np.asarray(test, np.float64)) ** 2))
    peak = float(ref.max() - ref.min())
    if mse == 0.0:
        return PSNR_CAP_DB
    if peak == 0.0:
        return -math.inf
    return min(PSNR_CAP_DB, 20.0 * math.log10(peak / math.sqrt(mse)))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        return 1.0 if not a.any() and not b.any() else 0.0
    return float(a @ b) / denom


def compare_runs(baseline_x0, cached_x0, baseline_traj=(), cached_traj=()) -> FidelityReport:
    if np.shape(baseline_x0) != np.shape(cached_x0):
        raise ValueError(f"shape mismatch: {np.shape(baseline_x0)} vs {np.shape(cached_x0)}")
    if len(baseline_traj) != len(cached_traj):
        raise ValueError("trajectories differ in length")
    return FidelityReport(
        rel_l1=nx.rel_l1_error(baseline_x0, cached_x0),
        psnr=psnr(baseline_x0, cached_x0),
        cosine=cosine_similarity(baseline_x0, cached_x0),
        trajectory_rel_l1=[nx.rel_l1_error(b, c) for b, c in zip(baseline_traj, cached_traj)],
    )
