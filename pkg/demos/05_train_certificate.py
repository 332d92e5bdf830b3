"""A small joint training run: certificate plus residual policy.

Eight agents in a tight box, a few hundred optimizer steps.  Prints the
loss components as the exploration probability decays.  Takes about a
minute.  Run:  python demos/05_train_certificate.py
"""
import numpy as np

from swarmcbf import training, world

cfg = training.TrainConfig.for_model(
    "SimpleCar", n_agents=8, side_length=3.0, scale=0.125,
    steps=400, rollout_length=32, seed=0)

print(f"training {cfg.steps} steps, {cfg.n_agents} agents in a "
      f"{cfg.side_length} x {cfg.side_length} box, width scale {cfg.scale}")
print("loss weights: safe/unsafe 1.0, derivative", cfg.eta_deriv,
      ", control deviation", cfg.eta_ctrl)

res = training.train(cfg)

print(f"\n{'step':>5} {'eps':>5} {'total':>8} {'safe':>7} {'unsafe':>7} "
      f"{'deriv':>7} {'ctrl':>7}")
for k in (0, 50, 100, 200, 300, 399):
    r = res.history[k]
    print(f"{r['step']:>5} {r['epsilon']:>5.2f} {r['loss_total']:>8.3f} "
          f"{r['loss_safe']:>7.3f} {r['loss_unsafe']:>7.3f} "
          f"{r['loss_deriv']:>7.3f} {r['loss_ctrl']:>7.3f}")

first = np.mean([r["loss_total"] for r in res.history[:50]])
last = np.mean([r["loss_total"] for r in res.history[-50:]])
print(f"\nrunning-mean loss: first 50 steps {first:.3f} -> last 50 steps "
      f"{last:.3f} ({100 * (1 - last / first):.0f}% lower)")

held_cfg = world.make_scenario_config("SimpleCar", 8, "keep_density", 12345,
                                      side_length=2.0)
held = training.collect_rollout(res.model, None,
                                world.generate_scenario(held_cfg),
                                64, 1.0, np.random.default_rng(0))
viol = training.derivative_violation_fraction(res.barrier, held, cfg)
print("derivative-condition violation fraction on a held-out nominal "
      f"rollout: {viol:.3f}")
