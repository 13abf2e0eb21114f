"""Independent reference implementations used as test oracles."""

import math
import random

import numpy as np

from smoothcache import numerics as nx
from smoothcache.calibration import CurveCell, ErrorCurve
from smoothcache.model import LayerKind


def brute_force_greedy(means, alpha, k_max, steps):
    """Straight-line greedy rule over ``means[(s, k)]`` for a single kind.

    Instead of carrying an anchor it searches the already-decided prefix for
    the most recent compute step each time.
    """
    out = []
    for s in range(steps):
        if s == 0:
            out.append("C")
            continue
        last = max(i for i, d in enumerate(out) if d == "C")
        gap = s - last
        if gap <= k_max and means[(s, gap)] < alpha:
            out.append(last)
        else:
            out.append("C")
    return out


def make_curves(table, k_max, steps, kinds=tuple(LayerKind)):
    """``table`` maps kind -> {(s, k): mean}; std/ci are irrelevant to scheduling."""
    return {
        kind: ErrorCurve(kind, k_max, steps, {sk: CurveCell(m, 0.0, 0.0, 1) for sk, m in table[kind].items()})
        for kind in kinds
    }


def random_tables(rnd: random.Random, k_max, steps, kinds=tuple(LayerKind)):
    tables = {}
    for kind in kinds:
        style = rnd.choice(["uniform", "smooth", "quantized"])
        t = {}
        for k in range(1, k_max + 1):
            for s in range(k, steps):
                if style == "uniform":
                    v = rnd.random()
                elif style == "smooth":
                    v = 0.05 * k * (1 + math.sin(s / 3.0)) + 0.01 * rnd.random()
                else:
                    v = rnd.choice([0.1, 0.2, 0.3])
                t[(s, k)] = v
        tables[kind] = t
    return tables


def flat_tables(value, k_max, steps, kinds=tuple(LayerKind)):
    return {kind: {(s, k): value for k in range(1, k_max + 1) for s in range(k, steps)} for kind in kinds}


def offline_curve_means(dump_dir, n_samples, keys, steps, k_max):
    """Recompute per-kind curve means from full SCTD dumps with float64 fsum arithmetic."""
    sums = {}
    for i in range(n_samples):
        outputs = {
            (key, s): nx.read_sctd(dump_dir / f"sample{i}" / f"step{s:04d}_{key.kind.value}_{key.block}.sctd")
            for key in keys
            for s in range(steps)
        }
        for kind in {k.kind for k in keys}:
            blocks = [key for key in keys if key.kind is kind]
            for k in range(1, k_max + 1):
                for s in range(k, steps):
                    errs = []
                    for key in blocks:
                        cur = outputs[(key, s)].astype(np.float64).ravel()
                        old = outputs[(key, s - k)].astype(np.float64).ravel()
                        errs.append(math.fsum(np.abs(cur - old)) / math.fsum(np.abs(cur)))
                    sums.setdefault((kind, s, k), []).append(math.fsum(errs) / len(errs))
    return {cell: math.fsum(v) / len(v) for cell, v in sums.items()}
