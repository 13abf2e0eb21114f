"""Analytic MAC model of the toy DiT, latency benchmarking and run reports."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable

from .model import LayerKind, ModelConfig


def matmul_macs(m: int, k: int, n: int) -> int:
    return m * k * n


@dataclass(frozen=True)
class MacBreakdown:
    """MACs of one forward evaluation at batch size 1.

    ``per_kind`` is per block; multiply by ``blocks`` for the whole model.
    Elementwise work (norms, softmax, activations, modulation) is free.
    """

    blocks: int
    per_kind: dict[LayerKind, int]
    non_eligible_parts: dict[str, int]

    @property
    def eligible(self) -> int:
        return self.blocks * sum(self.per_kind.values())

    @property
    def non_eligible(self) -> int:
        return sum(self.non_eligible_parts.values())

    @property
    def per_eval(self) -> int:
        return self.eligible + self.non_eligible

    @property
    def eligible_fraction(self) -> float:
        return self.eligible / self.per_eval


def mac_model(cfg: ModelConfig) -> MacBreakdown:
    L, d, lc, c = cfg.tokens, cfg.dim, cfg.context_tokens, cfg.channels
    per_kind = {
        # fused qkv + output projection, then scores and value mixing across heads
        LayerKind.SELF_ATTENTION: 4 * L * d * d + 2 * L * L * d,
        LayerKind.FEED_FORWARD: 2 * cfg.ffn_mult * L * d * d,
    }
    if lc:
        per_kind[LayerKind.CROSS_ATTENTION] = 2 * L * d * d + 2 * lc * d * d + 2 * L * lc * d
    n_sub = len(cfg.kinds)
    non_eligible = {
        "input_projection": matmul_macs(L, c, d),
        "timestep_mlp": 2 * matmul_macs(1, d, d),
        "adaln": cfg.blocks * matmul_macs(1, d, 3 * n_sub * d),
        "output_head": matmul_macs(L, d, c),
    }
    return MacBreakdown(cfg.blocks, per_kind, non_eligible)


def implied_eligible_fraction(mac_ratio: float, computed_fraction: float) -> float:
    """Solve ``ratio = (1 - f) + f * computed_fraction`` for the eligible fraction ``f``."""
    if math.isclose(computed_fraction, 1.0):
        raise ValueError("a computed fraction of 1 leaves the eligible fraction undetermined")
    return (1.0 - mac_ratio) / (1.0 - computed_fraction)


@dataclass(frozen=True)
class LatencyStats:
    runs: int
    mean_s: float
    std_s: float
    min_s: float
    warmup: int

    def to_json(self) -> dict:
        return {"mean_s": self.mean_s, "std_s": self.std_s, "min_s": self.min_s, "runs": self.runs}


def bench(run_fn: Callable[[], object], warmup: int = 1, runs: int = 5) -> LatencyStats:
    """Time `run_fn` with a monotonic clock after discarding `warmup` calls."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    for _ in range(warmup):
        run_fn()
    times = []
    for _ in range(runs):
        start = time.perf_counter()
        run_fn()
        times.append(time.perf_counter() - start)
    std = statistics.stdev(times) if runs > 1 else 0.0
    return LatencyStats(runs, statistics.fmean(times), std, min(times), warmup)


@dataclass
class RunReport:
    macs_total: int
    macs_baseline: int
    fidelity: dict[str, float]
    latency: LatencyStats | None = None
    extra: dict = field(default_factory=dict)

    @property
    def mac_ratio(self) -> float:
        return self.macs_total / self.macs_baseline

    def to_json(self, include_latency: bool = True) -> dict:
        doc = {
            "macs": {"total": self.macs_total, "baseline": self.macs_baseline, "ratio": self.mac_ratio},
            "fidelity": dict(self.fidelity),
        }
        if include_latency and self.latency is not None:
            doc["latency"] = self.latency.to_json()
        doc.update(self.extra)
        return doc
