"""The full comparison: error-guided schedules against uniform caching.

Calibrates once, then evaluates alpha at the 30th/60th/90th percentile of the
curve means next to uniform caching with n = 1 (no cache), 2 and 3.  Writes
sweep.json / sweep.csv / sweep.md under ./runs/demo_sweep.
"""

from smoothcache.experiment import ExperimentConfig, sweep, sweep_markdown, write_sweep

result = sweep(ExperimentConfig())
paths = write_sweep(result, "runs/demo_sweep")
print(sweep_markdown(result))
print(f"artifacts in {paths['json'].parent}/")
