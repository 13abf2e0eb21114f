"""Calibration passes and per-layer-type error curves.

A calibration pass is a fully uncached sampling run.  For every sublayer we
keep the last ``k_max`` branch outputs and, at each step ``s``, measure the L1
relative error against the output from ``k`` steps earlier.  Curves average
those errors over block indices (per sample) and then summarise across
samples with mean, Bessel-corrected std and a normal 95% interval.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from collections import defaultdict, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import jsonschema
import numpy as np

from . import numerics as nx
from .diffusion import SamplerConfig, ddim_sample
from .errors import ConfigError, CoverageError, DegenerateReferenceError, FormatError, VersionError
from .model import BranchOutput, BranchPolicy, LayerKey, LayerKind, Model, make_context

CURVES_VERSION = 1
Z_95 = 1.96


@dataclass(frozen=True)
class CalibrationConfig:
    n_samples: int = 10
    k_max: int = 3
    conditional: bool = False
    seed: int = 1000

    def __post_init__(self):
        if not isinstance(self.n_samples, int) or self.n_samples < 1:
            raise ConfigError("calibration.n_samples", f"must be >= 1, got {self.n_samples!r}")
        if not isinstance(self.k_max, int) or self.k_max < 1:
            raise ConfigError("calibration.k_max", f"must be >= 1, got {self.k_max!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("calibration.seed", "must be a non-negative integer")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationConfig":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError("calibration", f"unknown fields {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class ErrorRecord:
    """Error between a sublayer's outputs at steps ``step - k`` and ``step``.

    ``err`` is None when the step-``s`` output had zero L1 norm.
    """

    sample: int
    key: LayerKey
    step: int
    k: int
    err: float | None

    @property
    def degenerate(self) -> bool:
        return self.err is None

    def to_json(self) -> dict:
        return {
            "sample": self.sample,
            "kind": self.key.kind.value,
            "block": self.key.block,
            "step": self.step,
            "k": self.k,
            "err": self.err,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ErrorRecord":
        return cls(d["sample"], LayerKey(LayerKind(d["kind"]), d["block"]), d["step"], d["k"], d["err"])


@dataclass(frozen=True)
class CurveCell:
    mean: float
    std: float
    ci95: float
    n: int


@dataclass
class ErrorCurve:
    kind: LayerKind
    k_max: int
    steps: int
    cells: dict[tuple[int, int], CurveCell]

    def mean(self, s: int, k: int) -> float:
        try:
            return self.cells[(s, k)].mean
        except KeyError:
            raise CoverageError(self.kind.value, s, k) from None

    def missing_cells(self, steps: int | None = None, k_max: int | None = None) -> list[tuple[int, int]]:
        steps = self.steps if steps is None else steps
        k_max = self.k_max if k_max is None else k_max
        return [
            (s, k)
            for k in range(1, k_max + 1)
            for s in range(k, steps)
            if (s, k) not in self.cells
        ]


Curves = dict[LayerKind, ErrorCurve]


@dataclass
class CalibrationResult:
    records: list[ErrorRecord]
    curves: Curves

    @property
    def degenerate_count(self) -> int:
        return sum(r.degenerate for r in self.records)

    @property
    def cell_count(self) -> int:
        return sum(len(c.cells) for c in self.curves.values())


class _ErrorProbe(BranchPolicy):
    """Always computes; compares each output with the last ``k_max`` of the same sublayer."""

    def __init__(self, sample: int, k_max: int, sink: list[ErrorRecord], dump_dir: Path | None):
        self.sample = sample
        self.sink = sink
        self.dump_dir = dump_dir
        self.history: dict[LayerKey, deque] = defaultdict(lambda: deque(maxlen=k_max))

    def record(self, output: BranchOutput) -> None:
        ring = self.history[output.key]
        for k in range(1, len(ring) + 1):
            try:
                err = nx.rel_l1_error(output.value, ring[-k])
            except DegenerateReferenceError:
                err = None
            self.sink.append(ErrorRecord(self.sample, output.key, output.step, k, err))
        ring.append(output.value.copy())
        if self.dump_dir is not None:
            name = f"step{output.step:04d}_{output.key.kind.value}_{output.key.block}.sctd"
            nx.write_sctd(self.dump_dir / name, output.value)


def _sample_stats(values: list[float]) -> CurveCell:
    n = len(values)
    mean = math.fsum(values) / n
    if n > 1:
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))
    else:
        std = 0.0
    return CurveCell(mean=mean, std=std, ci95=Z_95 * std / math.sqrt(n), n=n)


def aggregate(records: Iterable[ErrorRecord], kinds: Iterable[LayerKind], steps: int, k_max: int) -> Curves:
    """Block-average each sample's errors per (kind, s, k), then summarise across samples.

    Degenerate records are skipped; a cell with no surviving sample is left out.
    """
    per_sample: dict[tuple, list[float]] = defaultdict(list)
    ordered = sorted(records, key=lambda r: (r.sample, r.step, r.key.kind.value, r.key.block, r.k))
    for r in ordered:
        if not r.degenerate:
            per_sample[(r.key.kind, r.step, r.k, r.sample)].append(r.err)

    by_cell: dict[tuple, list[float]] = defaultdict(list)
    for (kind, s, k, _sample), errs in sorted(per_sample.items(), key=lambda kv: (kv[0][0].value,) + kv[0][1:]):
        by_cell[(kind, s, k)].append(math.fsum(errs) / len(errs))

    curves = {}
    for kind in kinds:
        cells = {
            (s, k): _sample_stats(by_cell[(kind, s, k)])
            for k in range(1, k_max + 1)
            for s in range(k, steps)
            if by_cell.get((kind, s, k))
        }
        curves[kind] = ErrorCurve(kind, k_max, steps, cells)
    return curves


def calibrate(
    model: Model,
    sampler_cfg: SamplerConfig,
    calib_cfg: CalibrationConfig,
    dump_dir: str | Path | None = None,
) -> CalibrationResult:
    """Run ``n_samples`` uncached passes and build error curves.

    Sample ``i`` uses noise seed ``calib_cfg.seed + i``.  A conditioning
    context is drawn per sample when ``conditional`` is set or guidance is on.
    With `dump_dir`, every branch output is also written as an SCTD file under
    ``dump_dir/sample{i}/``.
    """
    records: list[ErrorRecord] = []
    use_context = calib_cfg.conditional or sampler_cfg.guided
    for i in range(calib_cfg.n_samples):
        seed = calib_cfg.seed + i
        sample_dir = None
        if dump_dir is not None:
            sample_dir = Path(dump_dir) / f"sample{i}"
            sample_dir.mkdir(parents=True, exist_ok=True)
        probe = _ErrorProbe(i, calib_cfg.k_max, records, sample_dir)
        context = make_context(model.cfg, seed) if use_context else None
        ddim_sample(model, dataclasses.replace(sampler_cfg, seed=seed), policy=probe, context=context)
    curves = aggregate(records, model.kinds, sampler_cfg.steps, calib_cfg.k_max)
    return CalibrationResult(records, curves)


def curve_means(curves: Curves) -> np.ndarray:
    """All cell means of all kinds, sorted (handy for percentile-based thresholds)."""
    return np.sort(np.array([c.mean for curve in curves.values() for c in curve.cells.values()]))


# --------------------------------------------------------------------------
# Persistence

_CELL_SCHEMA = {
    "type": "object",
    "required": ["s", "k", "mean", "std", "ci95", "n"],
    "additionalProperties": False,
    "properties": {
        "s": {"type": "integer", "minimum": 0},
        "k": {"type": "integer", "minimum": 1},
        "mean": {"type": "number", "minimum": 0},
        "std": {"type": "number", "minimum": 0},
        "ci95": {"type": "number", "minimum": 0},
        "n": {"type": "integer", "minimum": 1},
    },
}

CURVES_SCHEMA = {
    "type": "object",
    "required": ["version", "kinds"],
    "properties": {
        "version": {"type": "integer"},
        "kinds": {
            "type": "object",
            "propertyNames": {"enum": [k.value for k in LayerKind]},
            "additionalProperties": {
                "type": "object",
                "required": ["k_max", "steps", "cells"],
                "additionalProperties": False,
                "properties": {
                    "k_max": {"type": "integer", "minimum": 1},
                    "steps": {"type": "integer", "minimum": 1},
                    "cells": {"type": "array", "items": _CELL_SCHEMA},
                },
            },
        },
    },
}


def curves_to_json(curves: Curves) -> dict:
    kinds = {}
    for kind in sorted(curves, key=lambda k: k.value):
        curve = curves[kind]
        cells = [
            {"s": s, "k": k, "mean": c.mean, "std": c.std, "ci95": c.ci95, "n": c.n}
            for (s, k), c in sorted(curve.cells.items(), key=lambda kv: (kv[0][1], kv[0][0]))
        ]
        kinds[kind.value] = {"k_max": curve.k_max, "steps": curve.steps, "cells": cells}
    return {"version": CURVES_VERSION, "kinds": kinds}


def curves_from_json(doc, source: str = "<curves>") -> Curves:
    if isinstance(doc, dict) and "version" in doc and doc["version"] != CURVES_VERSION:
        raise VersionError(f"{source}: unsupported curves version {doc['version']!r} (expected {CURVES_VERSION})")
    try:
        jsonschema.validate(doc, CURVES_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise FormatError(f"{source}: field {where}: {exc.message}") from None
    curves = {}
    for name, body in doc["kinds"].items():
        kind = LayerKind(name)
        cells = {}
        for c in body["cells"]:
            if (c["s"], c["k"]) in cells:
                raise FormatError(f"{source}: {name} has duplicate cell (s={c['s']}, k={c['k']})")
            cells[(c["s"], c["k"])] = CurveCell(float(c["mean"]), float(c["std"]), float(c["ci95"]), c["n"])
        curve = ErrorCurve(kind, body["k_max"], body["steps"], cells)
        gaps = curve.missing_cells()
        if gaps:
            s, k = gaps[0]
            raise FormatError(f"{source}: {name} is missing cell (s={s}, k={k}) ({len(gaps)} gaps in total)")
        curves[kind] = curve
    return curves


def save_curves(curves: Curves, path: str | Path) -> None:
    Path(path).write_text(json.dumps(curves_to_json(curves), indent=1, sort_keys=True) + "\n")


def load_curves(path: str | Path) -> Curves:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return curves_from_json(doc, str(path))


def write_records(records: Iterable[ErrorRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[ErrorRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(ErrorRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad record ({exc})") from None
    return out


def export_csv(curve: ErrorCurve, path: str | Path) -> None:
    """Columns ``step,k,mean,lo,hi`` where lo/hi are mean -/+ ci95."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "k", "mean", "lo", "hi"])
        for (s, k), c in sorted(curve.cells.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            writer.writerow([s, k, repr(c.mean), repr(c.mean - c.ci95), repr(c.mean + c.ci95)])
