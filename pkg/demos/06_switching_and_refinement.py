"""The runtime detector, nominal/learned switching, and control refinement.

Uses an untrained certificate (sign-flipped to make it cautious) on a
head-on pair so every branch of the controller is visible.  Run:
python demos/06_switching_and_refinement.py
"""
import numpy as np

from swarmcbf import dynamics as dyn, nets, runtime, world
from swarmcbf.runtime import RefineConfig

car = dyn.make_model("SimpleCar")
barrier, policy = nets.init(seed=2, scale=0.125,
                            edge_dim=dyn.edge_feature_dim(car),
                            control_dim=car.control_dim)

states = np.array([[-0.12, 0.0, 0.8, 0.0], [0.12, 0.0, -0.8, 0.0]])
goals = np.array([[1.5, 0.0], [-1.5, 0.0]])
g = world.build_graph(car, states, goals, None, R=1.0)
u_nom = dyn.nominal_control_batch(car, states, goals)

print("== the detector: hdot + alpha h >= 0 under the nominal control ==")
ok, h, hdot = runtime.check_safe(barrier, g, u_nom, u_nom, dt=0.03, alpha=1.0)
for i in range(2):
    print(f"agent {i}: h={h[i]:+.3f} hdot={hdot[i]:+.3f} -> "
          f"{'nominal is fine' if ok[i] else 'switch away from nominal'}")

if ok.all():
    # make the random certificate flag the pair so switching is visible
    for W in barrier.head.weights:
        W.data *= -1.0
    for b in barrier.head.biases:
        b.data *= -1.0
    ok, h, hdot = runtime.check_safe(barrier, g, u_nom, u_nom, 0.03, 1.0)
    print("(flipped the certificate head: now ok =", list(ok), ")")

print("\n== switching decisions ==")
decisions = runtime.select_control(barrier, policy, g, u_nom, 0.03, 1.0,
                                   RefineConfig(max_iters=30, step_size=0.3))
for i, d in enumerate(decisions):
    print(f"agent {i}: mode={d.mode:8s} u={np.round(d.control, 3)} "
          f"h={d.h_value:+.3f} hdot={d.hdot_value:+.3f}")

print("\n== refinement walks the residue downhill ==")
u0 = u_nom[0]
for iters in (0, 5, 30):
    out, residue, used = runtime.refine(barrier, g, 0, u0, u_nom, 0.03, 1.0,
                                        RefineConfig(max_iters=iters))
    print(f"max_iters={iters:2d}: used {used:2d} iterations, residue "
          f"{residue:.5f}, control {np.round(out, 3)}")
print("(zero iterations returns the input control untouched)")
