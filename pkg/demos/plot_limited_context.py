"""
Shrinking the context window
============================

A plain transformer can only recall an entity's name while it is still in
its attention cache; the entity memory keeps a summary of every entity for
the whole story.  We train matched vanilla and memory models, then evaluate
mention-token NLL as the cache shrinks.

This trains six small models and takes a while on one CPU; set STEPS lower
for a quick look (the gap needs the full schedule to show reliably).
"""

import os
from dataclasses import replace

from mneme.experiment import limited_context_plan, limited_context_setup, run_degradation, train_sweep_models, write_degradation

STEPS = int(os.environ.get("STEPS", "0"))

setup = limited_context_setup()
if STEPS:
    setup.train = replace(setup.train, steps=STEPS)
plan = limited_context_plan("limited_context_out")
models, val = train_sweep_models(setup, plan)
tables, dumps = run_degradation(plan, models, val)
write_degradation(tables, dumps, plan.out_dir)

# Mention NLL at each cache size, then the change relative to the largest cache.
for v in plan.variants:
    for s in plan.seeds:
        nll = [f"{tables.overall[v][s][m]:.3f}" for m in plan.cache_sizes]
        deg = [f"{tables.overall_degradation(v, s, m):+.1f}%" for m in plan.cache_sizes]
        print(f"{v:>8} seed {s}: nll {nll}  change {deg}")
    print(f"{v:>8} mean change at cache {min(plan.cache_sizes)}: {tables.mean_overall_degradation(v):+.2f}%")

# Per-section tables and the per-token dump are in limited_context_out/.
print(sorted(os.listdir(plan.out_dir)))
