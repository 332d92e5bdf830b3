"""Experiment suites, per-run metrics, and CSV export.

Run:  python demos/08_evaluation_suites.py   (about a minute)
"""
import os
import tempfile

import numpy as np

from swarmcbf import world
from swarmcbf.evaluation import (ControllerSpec, aggregate_rows, run_suite,
                                 score_run, simulate_run, write_plotdata_csv,
                                 write_results_csv)

print("== the four suites pick workspace sizes differently ==")
for suite in world.SUITES:
    side = world.suite_side(suite, 64, 2)
    print(f"{suite:17s} 64 agents in 2-D -> side {side}")

print("\n== a single scored run ==")
cfg = world.make_scenario_config("SimpleCar", 6, "keep_density", seed=5,
                                 side_length=4.0, horizon=1200)
scn = world.generate_scenario(cfg)
run = simulate_run(scn, ControllerSpec(kind="nominal"))
m = score_run(run, suite=cfg.suite, seed=cfg.seed, controller="nominal")
print(f"safety {m.safety_rate:.3f}  reaching {m.reaching_rate:.3f}  "
      f"success {m.success_rate:.3f}  ({run.steps_used} steps)")
print("success counts an agent only if it never collided AND stands at its")
print("goal when the run ends.")

print("\n== a small suite sweep with the blind nominal controller ==")
rows = run_suite("keep_density", ControllerSpec(kind="nominal"), "SimpleCar",
                 n_agents_list=[4, 8], instances=4, base_seed=3, horizon=900)
for agg in aggregate_rows(rows):
    print(f"N={agg['n_agents']}: success "
          f"{agg['success_rate_mean']:.3f} +- {agg['success_rate_std']:.3f} "
          f"safety {agg['safety_rate_mean']:.3f}")

out_dir = tempfile.mkdtemp()
write_results_csv(rows, os.path.join(out_dir, "results.csv"))
write_plotdata_csv(rows, os.path.join(out_dir, "plotdata.csv"))
print("\nwrote", os.path.join(out_dir, "results.csv"))
with open(os.path.join(out_dir, "plotdata.csv")) as f:
    print(f.read().strip())
