"""Turn error curves into a caching schedule and run it.

A single threshold alpha decides, per layer kind and step, whether to reuse
the last computed branch output.  Here alpha is the median of all curve means.
"""

import numpy as np

from smoothcache import (
    CalibrationConfig,
    ModelConfig,
    SamplerConfig,
    build_model,
    calibrate,
    compare_runs,
    ddim_sample,
    predict_macs,
    run_cached,
    synthesize_greedy,
)
from smoothcache.calibration import curve_means

model = build_model(ModelConfig())
sampler = SamplerConfig(seed=7)
curves = calibrate(model, sampler, CalibrationConfig()).curves

alpha = float(np.percentile(curve_means(curves), 50))
schedule = synthesize_greedy(curves, alpha, k_max=3, steps=sampler.steps)
print(f"alpha = {alpha:.4f}")
for kind, row in schedule.decisions.items():
    line = "".join("C" if d == "C" else "." for d in row)
    print(f"  {kind.value:10s} {line}  ({schedule.computed_steps(kind)}/{sampler.steps} computed)")

baseline, base_traj = ddim_sample(model, sampler)
cached = run_cached(model, sampler, schedule)
fidelity = compare_runs(baseline, cached.x0, base_traj, cached.trajectory)
pred = predict_macs(schedule, model.cfg, sampler)

print(f"\nMACs: {cached.trace.macs:,} of {pred.baseline:,} (ratio {pred.ratio:.3f}, predicted exactly)")
print(f"rel_l1 {fidelity.rel_l1:.5f}   psnr {fidelity.psnr:.2f} dB   cosine {fidelity.cosine:.6f}")
worst = int(np.argmax(fidelity.trajectory_rel_l1))
print(f"largest trajectory divergence {max(fidelity.trajectory_rel_l1):.5f} after update {worst}")
