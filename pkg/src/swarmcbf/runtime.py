"""Runtime controller: certificate-based safety detector, nominal/learned
switching, and online refinement of violating controls.

The derivative of the certificate is estimated the same way the trainer
estimates it: a virtual Euler step, a rebuilt graph at the stepped
positions (LiDAR hit nodes stay frozen at their world positions), and a
finite difference across the two evaluations.  Each agent's check assumes
its neighbors apply their own nominal control for the virtual step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dynamics, nets
from .autodiff import Tensor, Tape
from .nets import BarrierParams, PolicyParams
from .world import GraphSnapshot, build_graph


@dataclass
class RefineConfig:
    max_iters: int = 30
    step_size: float = 0.3
    gamma: float = 0.02


@dataclass
class ControlDecision:
    control: np.ndarray
    mode: str           # "nominal" | "learned" | "refined"
    h_value: float
    hdot_value: float


def virtual_graph(graph: GraphSnapshot, next_states: np.ndarray) -> GraphSnapshot:
    """Graph after a virtual step: topology rebuilt from the stepped
    positions, hit nodes kept frozen in the world frame."""
    model = graph.model
    sd = model.space_dim
    g = build_graph(model, next_states, graph.goals, None, graph.R)
    h = graph.hit_pos.shape[0]
    if h == 0:
        return g
    emb = dynamics.state_embedding(model, next_states)
    feat_h = dynamics.hit_embedding(model, graph.hit_pos) - emb[graph.hit_owner]
    g.hit_pos = graph.hit_pos
    g.hit_owner = graph.hit_owner
    g.edge_dst = np.concatenate([g.edge_dst, graph.hit_owner])
    g.edge_src = np.concatenate([g.edge_src, np.full(h, -1, dtype=np.intp)])
    g.edge_hit = np.concatenate([np.full(g.edge_hit.shape[0], -1, dtype=np.intp),
                                 np.arange(h, dtype=np.intp)])
    g.edge_feat = np.concatenate([g.edge_feat, feat_h], axis=0)
    g.edge_flag = (g.edge_src < 0).astype(np.float64)
    return g


def check_safe(barrier: BarrierParams, graph: GraphSnapshot,
               candidates: np.ndarray, u_nom: np.ndarray, dt: float,
               alpha: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Detector: hdot + alpha * h >= 0 per agent, candidate control for the
    agent itself, nominal controls for everyone else.

    Returns (ok, h, hdot).  When candidates equal the nominals this costs a
    single virtual world; otherwise one neighborhood evaluation per agent.
    """
    model = graph.model
    h_now, _ = nets.barrier_values(barrier, graph)
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    u_nom = np.atleast_2d(np.asarray(u_nom, dtype=np.float64))
    X1_nom = dynamics.step_batch(model, graph.states, u_nom, dt)

    if np.array_equal(candidates, u_nom):
        g1 = virtual_graph(graph, X1_nom)
        h1, _ = nets.barrier_values(barrier, g1)
        hdot = (h1 - h_now) / dt
    else:
        hdot = np.zeros(graph.n_agents)
        for i in range(graph.n_agents):
            h1_i = _agent_h_virtual(barrier, graph, X1_nom, i, candidates[i], dt)
            hdot[i] = (h1_i - h_now[i]) / dt
    ok = hdot + alpha * h_now >= 0.0
    return ok, h_now, hdot


def _agent_neighborhood(graph: GraphSnapshot, X1_nom: np.ndarray, i: int,
                        p_i1: np.ndarray):
    """In-edge sources for agent i in the virtual world: agents within R of
    its stepped position, plus its own frozen hit nodes."""
    model = graph.model
    sd = model.space_dim
    d = np.linalg.norm(X1_nom[:, :sd] - p_i1, axis=1)
    d[i] = np.inf
    nbrs = np.nonzero(d <= graph.R)[0]
    hits = np.nonzero(graph.hit_owner == i)[0]
    return nbrs, hits


def _agent_h_virtual(barrier: BarrierParams, graph: GraphSnapshot,
                     X1_nom: np.ndarray, i: int, u_i: np.ndarray,
                     dt: float) -> float:
    """h_i after a virtual step where agent i applies u_i, neighbors their
    nominal (plain numpy)."""
    model = graph.model
    x1_i = dynamics.step(model, graph.states[i], u_i, dt)
    nbrs, hits = _agent_neighborhood(graph, X1_nom, i, x1_i[:model.space_dim])
    emb_i = dynamics.state_embedding(model, x1_i[None, :])[0]
    feats, flags = [], []
    if nbrs.size:
        feats.append(dynamics.state_embedding(model, X1_nom[nbrs]) - emb_i)
        flags.append(np.zeros(nbrs.size))
    if hits.size:
        feats.append(dynamics.hit_embedding(model, graph.hit_pos[hits]) - emb_i)
        flags.append(np.ones(hits.size))
    if feats:
        feat = np.concatenate(feats, axis=0)
        flag = np.concatenate(flags)
    else:
        feat = np.zeros((0, dynamics.edge_feature_dim(model)))
        flag = np.zeros(0)
    h, _ = nets.barrier_forward_edges(barrier, Tensor(feat), flag,
                                      np.zeros(feat.shape[0], dtype=np.intp), 1)
    return float(h.data[0, 0])


def residue(gamma: float, hdot: float, alpha: float, h: float) -> float:
    """Violation margin delta = max(0, gamma - hdot - alpha h)."""
    return max(0.0, gamma - hdot - alpha * h)


def _make_residue_fn(barrier: BarrierParams, graph: GraphSnapshot,
                     X1_nom: np.ndarray, i: int, h_i: float, dt: float,
                     alpha: float, gamma: float):
    """Closure mapping a control for agent i to (residue, d residue / du).

    The in-edge topology is fixed at the entry control's virtual position
    so the objective stays continuous across descent iterations.
    """
    model = graph.model
    x_i = graph.states[i]
    nbrs, hits = None, None

    def value_and_grad(u_val: np.ndarray) -> tuple[float, np.ndarray]:
        nonlocal nbrs, hits
        if nbrs is None:
            x1_probe = dynamics.step(model, x_i, u_val, dt)
            nbrs, hits = _agent_neighborhood(graph, X1_nom, i,
                                             x1_probe[:model.space_dim])
        nbr_emb = dynamics.state_embedding(model, X1_nom[nbrs]) if nbrs.size else None
        hit_emb = dynamics.hit_embedding(model, graph.hit_pos[hits]) if hits.size else None
        u = Tensor(u_val[None, :], requires_grad=True)
        with Tape() as tape:
            x1 = dynamics.virtual_step_tensor(model, x_i[None, :], u, dt)
            emb_i = dynamics.state_embedding_tensor(model, x1)
            feats, flags = [], []
            if nbr_emb is not None:
                feats.append(ad.sub(nbr_emb, emb_i))
                flags.append(np.zeros(nbrs.size))
            if hit_emb is not None:
                feats.append(ad.sub(hit_emb, emb_i))
                flags.append(np.ones(hits.size))
            if feats:
                feat = ad.concat(feats, axis=0)
                flag = np.concatenate(flags)
            else:
                feat = Tensor(np.zeros((0, dynamics.edge_feature_dim(model))))
                flag = np.zeros(0)
            h1, _ = nets.barrier_forward_edges(
                barrier, feat, flag, np.zeros(feat.shape[0], dtype=np.intp), 1)
            hdot = ad.mul(ad.sub(h1, h_i), 1.0 / dt)
            raw = ad.sub(gamma - alpha * h_i, hdot)
            delta = ad.relu(raw)
            val = float(delta.data[0, 0])
            grad = np.zeros_like(u_val)
            if val > 0.0 and delta.requires_grad:
                tape.backward(ad.tensor_sum(delta))
                if u.grad is not None:   # residue may not depend on u at all
                    grad = u.grad[0].copy()
        return val, grad

    return value_and_grad


def descend_residue(value_and_grad, u0: np.ndarray, config: RefineConfig,
                    clip_bound: float | None = None) -> tuple[np.ndarray, float, int]:
    """Projected gradient descent on a nonnegative residue; returns the
    best iterate seen, its residue, and the iterations spent."""
    u = np.asarray(u0, dtype=np.float64).copy()
    val, grad = value_and_grad(u)
    best_u, best_val = u.copy(), val
    iters = 0
    while iters < config.max_iters and best_val > 0.0:
        u = u - config.step_size * grad
        if clip_bound is not None:
            u = np.clip(u, -clip_bound, clip_bound)
        val, grad = value_and_grad(u)
        if val < best_val:
            best_val, best_u = val, u.copy()
        iters += 1
    return best_u, best_val, iters


def refine(barrier: BarrierParams, graph: GraphSnapshot, i: int,
           u0: np.ndarray, u_nom: np.ndarray, dt: float, alpha: float,
           config: RefineConfig) -> tuple[np.ndarray, float, int]:
    """Gradient descent on agent i's residue over its own control,
    neighbors held at their nominals.  Never returns a control with a
    larger residue than the input."""
    model = graph.model
    X1_nom = dynamics.step_batch(model, graph.states, np.atleast_2d(u_nom), dt)
    h_now, _ = nets.barrier_values(barrier, graph)
    fn = _make_residue_fn(barrier, graph, X1_nom, i, float(h_now[i]), dt,
                          alpha, config.gamma)
    return descend_residue(fn, u0, config, clip_bound=model.control_bound)


def select_control(barrier: BarrierParams, policy: PolicyParams,
                   graph: GraphSnapshot, u_nom: np.ndarray, dt: float,
                   alpha: float, config: RefineConfig | None = None,
                   use_refine: bool = True) -> list[ControlDecision]:
    """Per-agent switching: nominal when it passes the detector, otherwise
    the learned control, refined if it still violates."""
    if config is None:
        config = RefineConfig()
    model = graph.model
    u_nom = np.atleast_2d(np.asarray(u_nom, dtype=np.float64))
    ok, h_now, hdot_nom = check_safe(barrier, graph, u_nom, u_nom, dt, alpha)

    decisions: list[ControlDecision] = []
    flagged = np.nonzero(~ok)[0]
    u_nn = None
    X1_nom = None
    if flagged.size:
        u_nn = nets.policy_controls(policy, graph, u_nom, model.control_bound)
        X1_nom = dynamics.step_batch(model, graph.states, u_nom, dt)

    for i in range(graph.n_agents):
        if ok[i]:
            decisions.append(ControlDecision(
                control=u_nom[i].copy(), mode="nominal",
                h_value=float(h_now[i]), hdot_value=float(hdot_nom[i])))
            continue
        h1_i = _agent_h_virtual(barrier, graph, X1_nom, i, u_nn[i], dt)
        hdot_i = (h1_i - h_now[i]) / dt
        if hdot_i + alpha * h_now[i] >= 0.0:
            decisions.append(ControlDecision(
                control=u_nn[i].copy(), mode="learned",
                h_value=float(h_now[i]), hdot_value=float(hdot_i)))
            continue
        u_i = u_nn[i]
        if use_refine:
            fn = _make_residue_fn(barrier, graph, X1_nom, i, float(h_now[i]),
                                  dt, alpha, config.gamma)
            u_i, _, _ = descend_residue(fn, u_nn[i], config,
                                        clip_bound=model.control_bound)
        h1_i = _agent_h_virtual(barrier, graph, X1_nom, i, u_i, dt)
        hdot_i = (h1_i - h_now[i]) / dt
        decisions.append(ControlDecision(
            control=u_i.copy(), mode="refined",
            h_value=float(h_now[i]), hdot_value=float(hdot_i)))
    return decisions


def decisions_to_controls(decisions: list[ControlDecision]) -> np.ndarray:
    return np.stack([d.control for d in decisions])
