"""Static caching schedules: error-threshold greedy synthesis and uniform baselines.

A schedule holds one decision list per layer kind.  Entry ``s`` is either
``COMPUTE`` (the string ``"C"``) or the integer execution step whose cached
branch output is reused at step ``s``.  The in-memory form matches the JSON
wire format one to one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from .calibration import Curves
from .errors import CoverageError, FormatError, VersionError
from .metrics import mac_model
from .model import LayerKind, ModelConfig

COMPUTE = "C"
SCHEDULE_VERSION = 1

Decision = Union[str, int]


def is_compute(decision: Decision) -> bool:
    return decision == COMPUTE


@dataclass
class Schedule:
    steps: int
    k_max: int
    decisions: dict[LayerKind, list[Decision]]
    alpha: float | None = None
    label: str = field(default="", compare=False)

    def computed_steps(self, kind: LayerKind) -> int:
        return sum(1 for d in self.decisions[kind] if is_compute(d))

    def reuse_count(self) -> int:
        return sum(1 for ds in self.decisions.values() for d in ds if not is_compute(d))

    def to_json(self) -> dict:
        return {
            "version": SCHEDULE_VERSION,
            "steps": self.steps,
            "alpha": self.alpha,
            "k_max": self.k_max,
            "decisions": {k.value: list(self.decisions[k]) for k in sorted(self.decisions, key=lambda k: k.value)},
        }

    @classmethod
    def from_json(cls, doc: dict, source: str = "<schedule>") -> "Schedule":
        if not isinstance(doc, dict):
            raise FormatError(f"{source}: schedule must be a JSON object")
        if doc.get("version") != SCHEDULE_VERSION:
            raise VersionError(f"{source}: unsupported schedule version {doc.get('version')!r}")
        try:
            steps, k_max, alpha = doc["steps"], doc["k_max"], doc["alpha"]
            raw = doc["decisions"]
        except KeyError as exc:
            raise FormatError(f"{source}: missing field {exc.args[0]!r}") from None
        if not isinstance(steps, int) or not isinstance(k_max, int):
            raise FormatError(f"{source}: steps and k_max must be integers")
        if alpha is not None and not isinstance(alpha, (int, float)):
            raise FormatError(f"{source}: alpha must be a number or null")
        decisions = {}
        for name, entries in raw.items():
            try:
                kind = LayerKind(name)
            except ValueError:
                raise FormatError(f"{source}: unknown layer kind {name!r}") from None
            for i, d in enumerate(entries):
                if d != COMPUTE and (isinstance(d, bool) or not isinstance(d, int)):
                    raise FormatError(f"{source}: decisions.{name}[{i}] must be \"C\" or an integer")
            decisions[kind] = list(entries)
        return cls(steps, k_max, decisions, None if alpha is None else float(alpha))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Schedule":
        text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        return cls.from_json(doc, str(path))


def synthesize_greedy(curves: Curves, alpha: float, k_max: int, steps: int) -> Schedule:
    """Reuse the last computed output while its curve error stays below `alpha`.

    Per kind, scan steps forward keeping the anchor ``a`` (last Compute step,
    initially 0).  Step ``s`` reuses ``a`` iff ``s - a <= k_max`` and
    ``mean(s, s - a) < alpha``; otherwise it computes and becomes the anchor.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha!r}")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    decisions = {}
    for kind in sorted(curves, key=lambda k: k.value):
        curve = curves[kind]
        for k in range(1, k_max + 1):
            for s in range(k, steps):
                if (s, k) not in curve.cells:
                    raise CoverageError(kind.value, s, k)
        row: list[Decision] = [COMPUTE]
        anchor = 0
        for s in range(1, steps):
            k = s - anchor
            if k <= k_max and curve.mean(s, k) < alpha:
                row.append(anchor)
            else:
                row.append(COMPUTE)
                anchor = s
        decisions[kind] = row
    return Schedule(steps, k_max, decisions, alpha=float(alpha), label=f"alpha={alpha:.4g}")


def synthesize_uniform(n: int, steps: int, kinds=tuple(LayerKind)) -> Schedule:
    """Compute every `n`-th step and reuse the latest computed step otherwise."""
    if n < 1:
        raise ValueError("uniform period must be >= 1")
    row: list[Decision] = [COMPUTE if s % n == 0 else n * (s // n) for s in range(steps)]
    return Schedule(steps, n, {k: list(row) for k in kinds}, alpha=None, label=f"uniform n={n}")


def validate(schedule: Schedule) -> list[str]:
    """Return every invariant violation (empty list means valid)."""
    problems = []
    if schedule.k_max < 1:
        problems.append(f"k_max must be >= 1, got {schedule.k_max}")
    if not schedule.decisions:
        problems.append("schedule has no layer kinds")
    for kind, row in schedule.decisions.items():
        name = kind.value
        if len(row) != schedule.steps:
            problems.append(f"{name}: {len(row)} decisions for {schedule.steps} steps")
        if row and not is_compute(row[0]):
            problems.append(f"{name}[0]: first step must compute")
        for s, d in enumerate(row):
            if is_compute(d) or s == 0:
                continue
            if not isinstance(d, int) or isinstance(d, bool):
                problems.append(f"{name}[{s}]: decision {d!r} is neither \"C\" nor a step index")
                continue
            if not 0 <= d < s:
                problems.append(f"{name}[{s}]: source {d} is not an earlier step")
                continue
            if s - d > schedule.k_max:
                problems.append(f"{name}[{s}]: reuse distance {s - d} exceeds k_max={schedule.k_max}")
            if not is_compute(row[d]):
                problems.append(f"{name}[{s}]: source {d} not computed")
            elif any(is_compute(row[q]) for q in range(d + 1, s)):
                problems.append(f"{name}[{s}]: source {d} is not the most recent computed step")
    return problems


@dataclass(frozen=True)
class MacPrediction:
    total: int
    baseline: int
    ratio: float
    per_kind: dict[LayerKind, int]


def predict_macs(schedule: Schedule, model_cfg: ModelConfig, sampler_cfg) -> MacPrediction:
    """Whole-run MACs of `schedule` versus the uncached run.

    Non-eligible work runs every step; each kind's eligible work runs only on
    its computed steps.  Guidance doubles the model batch.
    """
    breakdown = mac_model(model_cfg)
    batch = sampler_cfg.batch
    steps = sampler_cfg.steps
    per_kind = {}
    for kind in model_cfg.kinds:
        per_kind[kind] = breakdown.per_kind[kind] * model_cfg.blocks * schedule.computed_steps(kind) * batch
    total = breakdown.non_eligible * steps * batch + sum(per_kind.values())
    baseline = breakdown.per_eval * steps * batch
    return MacPrediction(total, baseline, total / baseline, per_kind)

