"""Agent models and their goal-reaching controllers.

Walks through the four dynamics models, Euler stepping with control and
speed clamps, the LQR/PID nominal controllers, and the quadrotor motor
mixing.  Run:  python demos/01_dynamics_and_controllers.py
"""
import numpy as np

from swarmcbf import dynamics as dyn

print("== models ==")
for kind in dyn.KINDS:
    m = dyn.make_model(kind)
    print(f"{kind:12s} state_dim={m.state_dim:2d} control_dim={m.control_dim} "
          f"space_dim={m.space_dim} u_max={m.speed_bound}")

print("\n== one Euler step (double integrator) ==")
car = dyn.make_model("SimpleCar", speed_bound=10.0)
x = np.array([0.0, 0.0, 1.0, 2.0])
u = np.array([0.5, -0.5])
print("x =", x, " u =", u, " dt = 0.03")
print("x' =", dyn.step(car, x, u, 0.03))

print("\n== speed clamp ==")
car = dyn.make_model("SimpleCar")   # u_max = 0.8
x1 = dyn.step(car, np.zeros(4), np.array([10.0, 0.0]), 0.5)
print("after a hard 0.5 s burn the speed is", np.linalg.norm(x1[2:]),
      "(clamped to", car.speed_bound, ")")

print("\n== LQR pulls toward the goal ==")
goal = np.array([2.0, 0.0])
x = np.zeros(4)
for t in range(200):
    x = dyn.step(car, x, dyn.nominal_control(car, x, goal), 0.03)
print("position after 6 s:", np.round(x[:2], 4), " target:", goal)

print("\n== DubinsCar heading PID ==")
dub = dyn.make_model("DubinsCar")
x = np.array([0.0, 0.0, np.pi, 0.0])   # facing away from the goal
print("turn-rate command when facing away:",
      dyn.nominal_control(dub, x, goal)[0])

print("\n== CrazyFlie hover ==")
cf = dyn.make_model("CrazyFlie")
params = dyn.CF_PARAMS
u_hover = np.array([params.hover_thrust(), 0, 0, 0])
print("hover thrust m*g =", params.hover_thrust(), "N")
print("|xdot| at hover =", np.linalg.norm(dyn.derivative(cf, np.zeros(12), u_hover)))
w = np.sqrt(params.hover_thrust() / (4 * params.C_T))
print("equal motor speeds", round(w, 1), "rpm give U =",
      np.round(dyn.motor_mix(params, np.full(4, w)), 6))
