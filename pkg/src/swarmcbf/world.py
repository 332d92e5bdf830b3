"""Environment: obstacles, LiDAR raycasting, sensing graphs, safe/unsafe
labeling, scenario generation, and world stepping."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import dynamics
from .dynamics import DynamicsModel, AgentState

N_RAYS_DEFAULT = 32

# Workspace side lengths that keep per-unit agent density constant.
DENSITY_SIDE_2D = {16: 8.0, 32: 11.3, 64: 16.0, 128: 22.6, 256: 32.0,
                   512: 45.3, 1024: 64.0}
DENSITY_SIDE_3D = {16: 6.35, 32: 8.0, 64: 10.1, 128: 12.7, 256: 16.0,
                   512: 20.2, 1024: 25.4, 2048: 32.0, 4096: 40.3}

FIXED_SIDE_2D = 32.0
FIXED_SIDE_3D = 16.0
OBSTACLE_SIDE = 12.0
TRAVEL_CAP = 4.0

SUITES = ("increase_density", "keep_density", "keep_distance", "obstacles")


class ScenarioGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Obstacle:
    """Circle/sphere ("circle") or axis-aligned rectangle/box ("rect"),
    translating at a constant velocity."""
    shape: str
    center: np.ndarray
    size: np.ndarray       # circle: (radius,); rect: (w, h) or (w, h, d)
    velocity: np.ndarray

    @staticmethod
    def circle(center, radius: float, velocity=None) -> "Obstacle":
        center = np.asarray(center, dtype=np.float64)
        if velocity is None:
            velocity = np.zeros_like(center)
        return Obstacle("circle", center, np.array([float(radius)]),
                        np.asarray(velocity, dtype=np.float64))

    @staticmethod
    def rect(center, size, velocity=None) -> "Obstacle":
        center = np.asarray(center, dtype=np.float64)
        if velocity is None:
            velocity = np.zeros_like(center)
        return Obstacle("rect", center, np.asarray(size, dtype=np.float64),
                        np.asarray(velocity, dtype=np.float64))

    def moved(self, dt: float) -> "Obstacle":
        return replace(self, center=self.center + dt * self.velocity)

    def distance(self, point: np.ndarray) -> float:
        """Distance from a point to the obstacle region (0 inside)."""
        point = np.asarray(point, dtype=np.float64)
        if self.shape == "circle":
            return max(0.0, float(np.linalg.norm(point - self.center)) - self.size[0])
        half = self.size / 2.0
        outside = np.maximum(np.abs(point - self.center) - half, 0.0)
        return float(np.linalg.norm(outside))


@dataclass(frozen=True)
class LidarScan:
    """Fixed ray fan around one agent; rel holds hit offsets, valid flags
    which rays actually struck something within range."""
    rel: np.ndarray      # (n_rays, space_dim)
    valid: np.ndarray    # (n_rays,) bool

    @property
    def n_rays(self) -> int:
        return self.rel.shape[0]

    def ranges(self) -> np.ndarray:
        r = np.linalg.norm(self.rel, axis=1)
        return np.where(self.valid, r, np.inf)


def ray_directions(space_dim: int, n_rays: int) -> np.ndarray:
    """Evenly spaced unit rays: uniform angles in 2-D, Fibonacci sphere in 3-D."""
    if space_dim == 2:
        ang = 2.0 * np.pi * np.arange(n_rays) / n_rays
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    k = np.arange(n_rays)
    z = 1.0 - 2.0 * (k + 0.5) / n_rays
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    golden = np.pi * (3.0 - math.sqrt(5.0))
    ang = golden * k
    return np.stack([r * np.cos(ang), r * np.sin(ang), z], axis=1)


def _ray_circle(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray,
                radius: float) -> np.ndarray:
    """First nonnegative hit parameter per ray (inf if none)."""
    f = origin - center
    b = dirs @ f                      # dirs are unit, so a == 1
    c = f @ f - radius * radius
    disc = b * b - c
    t = np.full(dirs.shape[0], np.inf)
    ok = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t1 = -b - sq
    t2 = -b + sq
    first = np.where(t1 >= 0.0, t1, np.where(t2 >= 0.0, t2, np.inf))
    t[ok] = first[ok]
    return t


def _ray_rect(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray,
              half: np.ndarray) -> np.ndarray:
    """Slab test against an axis-aligned box; first nonnegative boundary hit."""
    n_rays, d = dirs.shape
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (lo - origin) / dirs
        t_hi = (hi - origin) / dirs
    t_near = np.where(np.isnan(t_lo), -np.inf, np.minimum(t_lo, t_hi))
    t_far = np.where(np.isnan(t_hi), np.inf, np.maximum(t_lo, t_hi))
    # parallel rays miss the slab unless the origin lies inside it
    inside = (origin >= lo) & (origin <= hi)
    par = dirs == 0.0
    t_near = np.where(par & inside, -np.inf, t_near)
    t_far = np.where(par & inside, np.inf, t_far)
    t_near = np.where(par & ~inside, np.inf, t_near)
    t_far = np.where(par & ~inside, -np.inf, t_far)
    enter = t_near.max(axis=1)
    leave = t_far.min(axis=1)
    hit = enter <= leave
    t = np.where(hit & (enter >= 0.0), enter,
                 np.where(hit & (leave >= 0.0), leave, np.inf))
    return t


def raycast(position: np.ndarray, obstacles: list[Obstacle], n_rays: int,
            R: float, space_dim: int | None = None) -> LidarScan:
    """Cast the ray fan; each ray reports the nearest surface within R."""
    if R <= 0:
        raise ValueError("sensing radius must be positive")
    position = np.asarray(position, dtype=np.float64)
    if space_dim is None:
        space_dim = position.shape[0]
    dirs = ray_directions(space_dim, n_rays)
    best = np.full(n_rays, np.inf)
    for ob in obstacles:
        if ob.shape == "circle":
            t = _ray_circle(position, dirs, ob.center, float(ob.size[0]))
        else:
            t = _ray_rect(position, dirs, ob.center, ob.size / 2.0)
        best = np.minimum(best, t)
    valid = best <= R
    t_hit = np.where(valid, best, 0.0)
    return LidarScan(rel=t_hit[:, None] * dirs, valid=valid)


@dataclass
class GraphSnapshot:
    """Sensing graph at one timestep.

    Edges point from a source node (agent or LiDAR hit) into the observing
    agent.  edge_src is the source agent index, or -1 when the source is
    hit node edge_hit[k]; edge_flag is 0 for agent sources, 1 for hits.
    """
    model: DynamicsModel
    states: np.ndarray       # (N, state_dim)
    goals: np.ndarray        # (N, space_dim)
    hit_pos: np.ndarray      # (H, space_dim) absolute positions
    hit_owner: np.ndarray    # (H,) observing agent per hit
    edge_dst: np.ndarray     # (E,)
    edge_src: np.ndarray     # (E,) agent index or -1
    edge_hit: np.ndarray     # (E,) hit index or -1
    edge_feat: np.ndarray    # (E, edge_dim)
    edge_flag: np.ndarray    # (E,)
    R: float

    @property
    def n_agents(self) -> int:
        return self.states.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_dst.shape[0]

    def agent_nodes(self) -> list[AgentState]:
        return [AgentState(x=self.states[i].copy(), goal=self.goals[i].copy(), id=i)
                for i in range(self.n_agents)]

    def positions(self) -> np.ndarray:
        return self.states[:, :self.model.space_dim]

    def in_edges(self, i: int) -> np.ndarray:
        return np.nonzero(self.edge_dst == i)[0]


def adjacency_within(positions: np.ndarray, R: float) -> tuple[np.ndarray, np.ndarray]:
    """Directed (dst, src) pairs with ||p_dst - p_src|| <= R, no self-pairs."""
    n = positions.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    diff = positions[:, None, :] - positions[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    mask = d2 <= R * R
    np.fill_diagonal(mask, False)
    dst, src = np.nonzero(mask)
    return dst.astype(np.intp), src.astype(np.intp)


def build_graph(model: DynamicsModel, states: np.ndarray, goals: np.ndarray,
                scans: list[LidarScan] | None, R: float) -> GraphSnapshot:
    """Assemble the sensing graph: symmetric agent-agent edges within R,
    plus one edge per valid LiDAR hit into its observing agent."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    goals = np.atleast_2d(np.asarray(goals, dtype=np.float64))
    n = states.shape[0]
    sd = model.space_dim
    emb = dynamics.state_embedding(model, states)

    dst, src = adjacency_within(states[:, :sd], R)
    feat_aa = emb[src] - emb[dst]

    hit_pos = np.zeros((0, sd))
    hit_owner = np.zeros(0, dtype=np.intp)
    if scans is not None:
        pos_list, owner_list = [], []
        for i, scan in enumerate(scans):
            if scan is None or not scan.valid.any():
                continue
            pos_list.append(states[i, :sd] + scan.rel[scan.valid])
            owner_list.append(np.full(int(scan.valid.sum()), i, dtype=np.intp))
        if pos_list:
            hit_pos = np.concatenate(pos_list, axis=0)
            hit_owner = np.concatenate(owner_list)

    h = hit_pos.shape[0]
    if h:
        feat_h = dynamics.hit_embedding(model, hit_pos) - emb[hit_owner]
        edge_dst = np.concatenate([dst, hit_owner])
        edge_src = np.concatenate([src, np.full(h, -1, dtype=np.intp)])
        edge_hit = np.concatenate([np.full(dst.shape[0], -1, dtype=np.intp),
                                   np.arange(h, dtype=np.intp)])
        edge_feat = np.concatenate([feat_aa, feat_h], axis=0)
    else:
        edge_dst, edge_src = dst, src
        edge_hit = np.full(dst.shape[0], -1, dtype=np.intp)
        edge_feat = feat_aa
    edge_flag = (edge_src < 0).astype(np.float64)
    return GraphSnapshot(model=model, states=states, goals=goals,
                         hit_pos=hit_pos, hit_owner=hit_owner,
                         edge_dst=edge_dst, edge_src=edge_src, edge_hit=edge_hit,
                         edge_feat=edge_feat, edge_flag=edge_flag, R=float(R))


LABEL_SAFE, LABEL_UNSAFE, LABEL_BUFFER = 0, 1, 2
LABEL_NAMES = {LABEL_SAFE: "safe", LABEL_UNSAFE: "unsafe", LABEL_BUFFER: "buffer"}


def min_agent_distance(graph: GraphSnapshot, i: int) -> float:
    pos = graph.positions()
    if pos.shape[0] < 2:
        return np.inf
    d = np.linalg.norm(pos - pos[i], axis=1)
    d[i] = np.inf
    return float(d.min())


def min_hit_range(graph: GraphSnapshot, i: int) -> float:
    mask = graph.hit_owner == i
    if not mask.any():
        return np.inf
    p = graph.positions()[i]
    return float(np.linalg.norm(graph.hit_pos[mask] - p, axis=1).min())


def label_sample(graph: GraphSnapshot, i: int, r: float) -> int:
    """Three-way label from nearest-neighbor distances.

    Unsafe below 2r (or a LiDAR return inside r); safe above 4r on both
    counts; the band in between is a buffer excluded from the
    classification losses.
    """
    da = min_agent_distance(graph, i)
    dh = min_hit_range(graph, i)
    if da < 2.0 * r or dh < r:
        return LABEL_UNSAFE
    if da > 4.0 * r and dh > 4.0 * r:
        return LABEL_SAFE
    return LABEL_BUFFER


def label_all(graph: GraphSnapshot, r: float) -> np.ndarray:
    return np.array([label_sample(graph, i, r) for i in range(graph.n_agents)],
                    dtype=np.int8)


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce one scenario; mirrors the on-disk
    scenario schema key for key."""
    model: str
    n_agents: int
    side_length: float
    r: float = 0.05
    sensing_radius: float = 1.0
    dt: float = 0.03
    horizon: int = 2500
    seed: int = 0
    suite: str = "keep_density"
    obstacles: tuple[Obstacle, ...] = ()


@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    states: np.ndarray     # (N, state_dim) initial
    goals: np.ndarray      # (N, space_dim)
    obstacles: tuple[Obstacle, ...]

    def agent_states(self) -> list[AgentState]:
        return [AgentState(x=self.states[i].copy(), goal=self.goals[i].copy(), id=i)
                for i in range(self.states.shape[0])]


def density_side(n_agents: int, space_dim: int) -> float:
    table = DENSITY_SIDE_2D if space_dim == 2 else DENSITY_SIDE_3D
    if n_agents in table:
        return table[n_agents]
    base = table[16]
    return round(base * (n_agents / 16.0) ** (1.0 / space_dim), 3)


def suite_side(suite: str, n_agents: int, space_dim: int) -> float:
    if suite == "increase_density":
        return FIXED_SIDE_2D if space_dim == 2 else FIXED_SIDE_3D
    if suite == "obstacles":
        return OBSTACLE_SIDE
    return density_side(n_agents, space_dim)


def make_scenario_config(model: str, n_agents: int, suite: str, seed: int,
                         side_length: float | None = None,
                         n_obstacles: int = 0,
                         point_obstacles: bool = False,
                         sensing_radius: float | None = None,
                         r: float = 0.05, dt: float = 0.03,
                         horizon: int | None = None) -> ScenarioConfig:
    """Suite defaults plus (for the obstacles suite) sampled obstacles.

    Obstacle sizes are drawn U[0, 0.5] and speeds U[0, 0.2] unless
    point_obstacles is set (training-style point obstacles).
    """
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}")
    m = dynamics.make_model(model)
    sd = m.space_dim
    if side_length is None:
        side_length = suite_side(suite, n_agents, sd)
    if sensing_radius is None:
        sensing_radius = 1.0 if sd == 2 else 0.5
    if horizon is None:
        horizon = 2500 if sd == 2 else 2000

    obstacles: list[Obstacle] = []
    if n_obstacles > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB5]))
        for _ in range(n_obstacles):
            center = rng.uniform(0.0, side_length, size=sd)
            speed = rng.uniform(0.0, 0.2)
            direction = rng.normal(size=sd)
            direction /= max(np.linalg.norm(direction), 1e-12)
            vel = speed * direction
            if point_obstacles:
                obstacles.append(Obstacle.circle(center, 1e-4, vel))
            elif rng.random() < 0.5:
                obstacles.append(Obstacle.circle(center, rng.uniform(0.0, 0.5) / 2.0, vel))
            else:
                obstacles.append(Obstacle.rect(center, rng.uniform(0.0, 0.5, size=sd), vel))
    return ScenarioConfig(model=model, n_agents=n_agents, side_length=float(side_length),
                          r=r, sensing_radius=float(sensing_radius), dt=dt,
                          horizon=int(horizon), seed=seed, suite=suite,
                          obstacles=tuple(obstacles))


_MAX_REJECTIONS = 10_000


def _sample_point(rng, existing: list[np.ndarray], side: float, sd: int,
                  min_sep: float, obstacles, clearance: float,
                  anchor: np.ndarray | None = None, anchor_cap: float | None = None):
    for _ in range(_MAX_REJECTIONS):
        p = rng.uniform(0.0, side, size=sd)
        if anchor is not None and anchor_cap is not None:
            if np.linalg.norm(p - anchor) > anchor_cap:
                continue
        if existing and min(np.linalg.norm(p - q) for q in existing) < min_sep:
            continue
        if obstacles and min(ob.distance(p) for ob in obstacles) < clearance:
            continue
        return p
    raise ScenarioGenerationError(
        f"could not place a point after {_MAX_REJECTIONS} rejections "
        f"(side={side}, n_placed={len(existing)})")


def generate_scenario(config: ScenarioConfig) -> Scenario:
    """Rejection-sample starts and goals: pairwise separation >= 4r, inside
    the workspace, clear of obstacles; deterministic in the seed."""
    m = dynamics.make_model(config.model)
    sd = m.space_dim
    rng = np.random.default_rng(config.seed)
    min_sep = 4.0 * config.r
    clearance = 4.0 * config.r
    obstacles = list(config.obstacles)

    starts: list[np.ndarray] = []
    for _ in range(config.n_agents):
        starts.append(_sample_point(rng, starts, config.side_length, sd,
                                    min_sep, obstacles, clearance))
    goals: list[np.ndarray] = []
    cap = TRAVEL_CAP if config.suite == "keep_distance" else None
    for i in range(config.n_agents):
        goals.append(_sample_point(rng, goals, config.side_length, sd,
                                   min_sep, obstacles, clearance,
                                   anchor=starts[i], anchor_cap=cap))

    states = np.zeros((config.n_agents, m.state_dim))
    states[:, :sd] = np.stack(starts)
    if config.model == "DubinsCar":
        states[:, 2] = rng.uniform(-np.pi, np.pi, size=config.n_agents)
    return Scenario(config=config, states=states, goals=np.stack(goals),
                    obstacles=tuple(obstacles))


@dataclass
class WorldStep:
    states: np.ndarray
    obstacles: tuple[Obstacle, ...]
    collided: np.ndarray     # (N,) bool, collisions entered during this step
    all_reached: bool


def collision_flags(model: DynamicsModel, states: np.ndarray,
                    obstacles, r: float) -> np.ndarray:
    """Agent i collides if another agent is within 2r or an obstacle
    surface is within r of its position."""
    pos = states[:, :model.space_dim]
    n = pos.shape[0]
    flags = np.zeros(n, dtype=bool)
    if n > 1:
        diff = pos[:, None, :] - pos[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        np.fill_diagonal(d, np.inf)
        flags |= (d <= 2.0 * r).any(axis=1)
    for ob in obstacles:
        for i in range(n):
            if not flags[i] and ob.distance(pos[i]) <= r:
                flags[i] = True
    return flags


def goals_reached(model: DynamicsModel, states: np.ndarray, goals: np.ndarray,
                  tol: float) -> np.ndarray:
    pos = states[:, :model.space_dim]
    return np.linalg.norm(pos - goals, axis=1) < tol


def step_world(model: DynamicsModel, states: np.ndarray, controls: np.ndarray,
               obstacles, goals: np.ndarray, dt: float, r: float) -> WorldStep:
    next_states = dynamics.step_batch(model, states, controls, dt)
    next_obstacles = tuple(ob.moved(dt) for ob in obstacles)
    flags = collision_flags(model, next_states, next_obstacles, r)
    reached = goals_reached(model, next_states, goals, r)
    return WorldStep(states=next_states, obstacles=next_obstacles,
                     collided=flags, all_reached=bool(reached.all()))
