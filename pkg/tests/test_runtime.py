import json
import math
import random

import numpy as np
import pytest

from smoothcache import numerics as nx
from smoothcache.diffusion import SamplerConfig, ddim_sample
from smoothcache.errors import CacheFault, ConfigError
from smoothcache.model import LayerKey, LayerKind, make_context
from smoothcache.runtime import (
    PSNR_CAP_DB,
    ScheduledCache,
    compare_runs,
    cosine_similarity,
    psnr,
    run_cached,
)
from smoothcache.scheduler import COMPUTE, Schedule, predict_macs, synthesize_uniform, validate

from conftest import SMALL_MODEL, SMALL_SAMPLER

C = COMPUTE


def random_valid_schedule(rnd, steps, kinds, k_max):
    decisions = {}
    for kind in kinds:
        row, anchor = [C], 0
        for s in range(1, steps):
            if s - anchor <= k_max and rnd.random() < 0.6:
                row.append(anchor)
            else:
                row.append(C)
                anchor = s
        decisions[kind] = row
    return Schedule(steps, k_max, decisions, alpha=None, label="fuzz")


class _Shadow(ScheduledCache):
    """Also remembers every computed branch so reuses can be checked against their source."""

    def __init__(self, schedule):
        super().__init__(schedule)
        self.computed = {}
        self.reuses = 0

    def lookup(self, key, step):
        value = super().lookup(key, step)
        if value is not None:
            src = self.schedule.decisions[key.kind][step]
            assert value.tobytes() == self.computed[(key, src)].tobytes()
            self.reuses += 1
        return value

    def record(self, output):
        super().record(output)
        self.computed[(output.key, output.step)] = output.value.copy()


def test_all_compute_schedule_is_bitwise_uncached(small_model):
    ref, ref_traj = ddim_sample(small_model, SMALL_SAMPLER)
    run = run_cached(small_model, SMALL_SAMPLER, synthesize_uniform(1, 8, small_model.kinds))
    assert run.x0.tobytes() == ref.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(run.trajectory, ref_traj))
    assert len(run.trace) == 8 * len(small_model.keys)


def test_uniform_two_counts(small_model):
    run = run_cached(small_model, SMALL_SAMPLER, synthesize_uniform(2, 8, small_model.kinds))
    for key in small_model.keys:
        assert run.trace.computed_count(key) == math.ceil(8 / 2)


@pytest.mark.parametrize("case", range(50))
def test_fuzzed_schedules_conform(case, small_model):
    rnd = random.Random(case)
    sampler = SamplerConfig(steps=rnd.randint(1, 12), cfg_scale=rnd.choice([0.0, 1.5]), seed=case)
    sched = random_valid_schedule(rnd, sampler.steps, small_model.kinds, rnd.randint(1, 4))
    assert validate(sched) == []
    ctx = make_context(SMALL_MODEL, case) if sampler.guided else None
    policy = _Shadow(sched)
    with nx.count_macs() as counter:
        ddim_sample(small_model, sampler, policy=policy, context=ctx)
    assert policy.trace.mismatches(sched, small_model.keys) == []
    assert policy.reuses == sched.reuse_count() * SMALL_MODEL.blocks
    assert counter.total == predict_macs(sched, SMALL_MODEL, sampler).total
    run = run_cached(small_model, sampler, sched, ctx)
    assert run.trace.actions == policy.trace.actions
    assert run.trace.macs == counter.total


def test_cache_stores_a_private_copy(small_model):
    sched = synthesize_uniform(2, 8, small_model.kinds)
    policy = ScheduledCache(sched)
    ddim_sample(small_model, SMALL_SAMPLER, policy=policy)
    for entry in policy.store.values():
        assert entry.value.flags.owndata


def test_guided_run_caches_the_batched_branch(small_model):
    sampler = SamplerConfig(steps=8, cfg_scale=1.5)
    ctx = make_context(SMALL_MODEL, 9)
    policy = ScheduledCache(synthesize_uniform(2, 8, small_model.kinds))
    ddim_sample(small_model, sampler, policy=policy, context=ctx)
    for entry in policy.store.values():
        assert entry.value.shape == (2, SMALL_MODEL.tokens, SMALL_MODEL.dim)


def test_faults_on_inconsistent_plans(small_model):
    key = LayerKey(LayerKind.FEED_FORWARD, 0)
    miss = ScheduledCache(Schedule(2, 1, {k: [0, C] for k in small_model.kinds}))
    with pytest.raises(CacheFault, match="before any compute"):
        miss.lookup(key, 0)
    wrong_source = Schedule(3, 2, {k: [C, C, 0] for k in small_model.kinds})
    with pytest.raises(CacheFault, match="cache holds step 1"):
        ddim_sample(small_model, SamplerConfig(steps=3), policy=ScheduledCache(wrong_source))


def test_run_cached_preconditions(small_model):
    with pytest.raises(ConfigError, match="steps"):
        run_cached(small_model, SMALL_SAMPLER, synthesize_uniform(2, 9, small_model.kinds))
    partial = synthesize_uniform(2, 8, (LayerKind.SELF_ATTENTION,))
    with pytest.raises(ConfigError, match="cross_attn"):
        run_cached(small_model, SMALL_SAMPLER, partial)
    bad = Schedule(8, 1, {k: [C, 0, 0, C, C, C, C, C] for k in small_model.kinds})
    with pytest.raises(ConfigError, match="exceeds k_max"):
        run_cached(small_model, SMALL_SAMPLER, bad)


def test_trace_jsonl(tmp_path, small_model):
    run = run_cached(small_model, SMALL_SAMPLER, synthesize_uniform(3, 8, small_model.kinds))
    path = tmp_path / "trace.jsonl"
    run.trace.write_jsonl(path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 8 * len(small_model.keys)
    assert rows[0] == {"step": 0, "kind": "cross_attn", "block": 0, "action": "C"}
    assert {"step": 1, "kind": "ffn", "block": 1, "action": 0} in rows


# -- fidelity -----------------------------------------------------------------


def test_identical_runs():
    x = nx.SeededRng(1).normal((4, 4))
    rep = compare_runs(x, x.copy(), [x], [x])
    assert rep.rel_l1 == 0.0 and rep.psnr == PSNR_CAP_DB == 99.0 and rep.cosine == pytest.approx(1.0)
    assert rep.trajectory_rel_l1 == [0.0]
    assert set(rep.to_json()) == {"rel_l1", "psnr", "cosine"}


def test_psnr_constant_offset():
    ref = np.linspace(0.0, 1.0, 64).astype(np.float32)
    assert psnr(ref, ref + np.float32(0.1)) == pytest.approx(20 * math.log10(1.0 / 0.1), abs=1e-4)


def test_cosine_cases():
    assert cosine_similarity([1.0, 0.0], [0.0, 2.0]) == 0.0
    assert cosine_similarity([1.0, 1.0], [-1.0, -1.0]) == pytest.approx(-1.0)
    assert cosine_similarity([0.0], [0.0]) == 1.0
    assert cosine_similarity([0.0], [1.0]) == 0.0


def test_compare_runs_checks_shapes():
    with pytest.raises(ValueError):
        compare_runs(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        compare_runs(np.ones(2), np.ones(2), [np.ones(2)], [])
