import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swarmcbf import dynamics as dyn, world
from swarmcbf.world import (Obstacle, ScenarioConfig, build_graph,
                            generate_scenario, label_sample, label_all,
                            make_scenario_config, raycast, step_world,
                            LABEL_SAFE, LABEL_UNSAFE, LABEL_BUFFER)

CAR = dyn.make_model("SimpleCar")


def car_states(positions):
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    out = np.zeros((pos.shape[0], 4))
    out[:, :2] = pos
    return out


# --- raycast ---------------------------------------------------------------

def test_ray_circle_example():
    scan = raycast([0.0, 0.0], [Obstacle.circle([0.3, 0.0], 0.1)], 32, 1.0)
    assert scan.valid[0]
    assert np.allclose(scan.rel[0], [0.2, 0.0], atol=1e-12)


def test_raycast_empty_world():
    scan = raycast([0.0, 0.0], [], 32, 1.0)
    assert not scan.valid.any()


def test_raycast_out_of_range():
    scan = raycast([0.0, 0.0], [Obstacle.circle([2.5, 0.0], 0.1)], 32, 1.0)
    assert not scan.valid.any()


def test_raycast_rect_and_inside():
    scan = raycast([0.0, 0.0], [Obstacle.rect([0.5, 0.0], [0.2, 0.2])], 32, 1.0)
    assert scan.valid[0]
    assert np.allclose(scan.rel[0], [0.4, 0.0], atol=1e-12)
    # origin inside the box: rays exit through the boundary
    inside = raycast([0.5, 0.0], [Obstacle.rect([0.5, 0.0], [0.2, 0.2])], 32, 1.0)
    assert inside.valid.all()


def test_lidar_hits_lie_on_boundaries():
    obstacles = [Obstacle.circle([0.4, 0.1], 0.15),
                 Obstacle.rect([-0.3, -0.2], [0.25, 0.4]),
                 Obstacle.circle([-0.1, 0.45], 0.05)]
    rng = np.random.default_rng(0)
    for _ in range(20):
        origin = rng.uniform(-0.8, 0.8, size=2)
        scan = raycast(origin, obstacles, 32, 1.0)
        for rel, ok in zip(scan.rel, scan.valid):
            if not ok:
                continue
            p = origin + rel
            boundary = min(abs(np.linalg.norm(p - ob.center) - ob.size[0])
                           if ob.shape == "circle" else
                           _rect_boundary_dist(p, ob)
                           for ob in obstacles)
            assert boundary < 1e-9
            assert np.linalg.norm(rel) <= 1.0 + 1e-12


def _rect_boundary_dist(p, ob):
    half = ob.size / 2.0
    d = np.abs(p - ob.center) - half
    inside = (d <= 0).all()
    if inside:
        return float(np.min(-d))
    return float(np.linalg.norm(np.maximum(d, 0.0)))


def test_raycast_3d_directions_even():
    dirs = world.ray_directions(3, 32)
    assert dirs.shape == (32, 3)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0)
    scan = raycast([0.0, 0.0, 0.0], [Obstacle.circle([0.3, 0, 0], 0.1)], 32, 1.0)
    assert scan.valid.any()


# --- graph -----------------------------------------------------------------

def test_two_agents_within_radius_two_edges():
    g = build_graph(CAR, car_states([[0, 0], [0.5, 0]]), np.zeros((2, 2)), None, 1.0)
    assert g.n_edges == 2


def test_two_agents_out_of_radius_no_edges():
    g = build_graph(CAR, car_states([[0, 0], [1.5, 0]]), np.zeros((2, 2)), None, 1.0)
    assert g.n_edges == 0


def test_lidar_hit_edge_flag():
    scan = raycast([0.0, 0.0], [Obstacle.circle([0.3, 0.0], 0.1)], 32, 1.0)
    g = build_graph(CAR, car_states([[0, 0]]), np.zeros((1, 2)), [scan], 1.0)
    assert g.n_edges == int(scan.valid.sum())
    assert (g.edge_flag == 1.0).all()
    assert (g.edge_dst == 0).all()


def test_graph_symmetry():
    rng = np.random.default_rng(1)
    for _ in range(10):
        g = build_graph(CAR, car_states(rng.uniform(0, 3, size=(8, 2))),
                        np.zeros((8, 2)), None, 1.0)
        pairs = set(zip(g.edge_dst.tolist(), g.edge_src.tolist()))
        assert all((j, i) in pairs for i, j in pairs)
        assert all(i != j for i, j in pairs)


def test_edge_features_match_dynamics():
    states = car_states([[0, 0], [0.4, 0.3]])
    states[0, 2:] = [0.1, -0.2]
    g = build_graph(CAR, states, np.zeros((2, 2)), None, 1.0)
    for k in range(g.n_edges):
        i, j = g.edge_dst[k], g.edge_src[k]
        assert np.allclose(g.edge_feat[k],
                           dyn.edge_feature(CAR, states[i], states[j]))


# --- labels ----------------------------------------------------------------

def test_label_thresholds():
    def label_at(dist):
        g = build_graph(CAR, car_states([[0, 0], [dist, 0]]), np.zeros((2, 2)),
                        None, 1.0)
        return label_sample(g, 0, 0.05)

    assert label_at(0.08) == LABEL_UNSAFE    # 0.08 < 2r = 0.1
    assert label_at(0.5) == LABEL_SAFE       # 0.5 > 4r = 0.2
    assert label_at(0.15) == LABEL_BUFFER


def test_label_obstacle_unsafe():
    scan = raycast([0.0, 0.0], [Obstacle.circle([0.06, 0.0], 0.02)], 32, 1.0)
    g = build_graph(CAR, car_states([[0, 0]]), np.zeros((1, 2)), [scan], 1.0)
    assert label_sample(g, 0, 0.05) == LABEL_UNSAFE


@given(st.floats(min_value=0.02, max_value=1.0),
       st.floats(min_value=0.05, max_value=0.99))
@settings(max_examples=60, deadline=None)
def test_label_monotonicity(dist, shrink):
    """Shrinking every pairwise distance never flips unsafe toward safe."""
    order = {LABEL_SAFE: 0, LABEL_BUFFER: 1, LABEL_UNSAFE: 2}

    def label_at(d):
        g = build_graph(CAR, car_states([[0, 0], [d, 0]]), np.zeros((2, 2)),
                        None, 2.0)
        return label_sample(g, 0, 0.05)

    assert order[label_at(dist * shrink)] >= order[label_at(dist)]


# --- scenarios ---------------------------------------------------------------

def test_density_side_table_values():
    assert world.density_side(16, 2) == 8.0
    assert world.density_side(4096, 3) == 40.3
    assert world.density_side(32, 2) == 11.3
    assert world.density_side(2048, 3) == 32.0


def test_scenario_determinism():
    cfg = make_scenario_config("SimpleCar", 12, "keep_density", seed=42)
    a = generate_scenario(cfg)
    b = generate_scenario(cfg)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.goals, b.goals)


def test_scenario_single_agent():
    cfg = make_scenario_config("SimpleCar", 1, "increase_density", seed=0)
    s = generate_scenario(cfg)
    assert s.states.shape == (1, 4)
    assert s.goals.shape == (1, 2)


def test_scenario_separations_and_bounds():
    cfg = make_scenario_config("DubinsCar", 24, "keep_density", seed=3)
    s = generate_scenario(cfg)
    pos = s.states[:, :2]
    for pts in (pos, s.goals):
        assert (pts >= 0).all() and (pts <= cfg.side_length).all()
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        np.fill_diagonal(d, np.inf)
        assert d.min() >= 4 * cfg.r


def test_keep_distance_caps_travel():
    cfg = make_scenario_config("SimpleCar", 20, "keep_distance", seed=5)
    s = generate_scenario(cfg)
    travel = np.linalg.norm(s.goals - s.states[:, :2], axis=1)
    assert (travel <= world.TRAVEL_CAP + 1e-12).all()


def test_obstacle_suite_samples_within_bounds():
    cfg = make_scenario_config("DubinsCar", 8, "obstacles", seed=7, n_obstacles=6)
    assert len(cfg.obstacles) == 6
    assert cfg.side_length == world.OBSTACLE_SIDE
    for ob in cfg.obstacles:
        assert np.linalg.norm(ob.velocity) <= 0.2 + 1e-12
        assert (ob.size <= 0.5).all()
    s = generate_scenario(cfg)
    for p in s.states[:, :2]:
        assert min(ob.distance(p) for ob in cfg.obstacles) >= 4 * cfg.r


def test_packing_infeasible_raises():
    cfg = make_scenario_config("SimpleCar", 200, "keep_density", seed=0,
                               side_length=0.5)
    with pytest.raises(world.ScenarioGenerationError):
        generate_scenario(cfg)


# --- stepping ----------------------------------------------------------------

def test_collision_flags_pairwise():
    states = car_states([[0, 0], [0.09, 0]])
    step = step_world(CAR, states, np.zeros((2, 2)), (), np.ones((2, 2)), 0.03, 0.05)
    assert step.collided.all()


def test_obstacle_translation():
    ob = Obstacle.circle([1.0, 1.0], 0.1, velocity=[0.2, 0.0])
    step = step_world(CAR, car_states([[5, 5]]), np.zeros((1, 2)), (ob,),
                      np.ones((1, 2)), 0.03, 0.05)
    assert np.allclose(step.obstacles[0].center, [1.006, 1.0])


def test_termination_when_all_reached():
    states = car_states([[1.0, 1.0]])
    goals = np.array([[1.0, 1.0]])
    step = step_world(CAR, states, np.zeros((1, 2)), (), goals, 0.03, 0.05)
    assert step.all_reached


def test_obstacle_penetration_flags():
    ob = Obstacle.circle([0.5, 0.0], 0.2)
    states = car_states([[0.45, 0.0], [3.0, 3.0]])
    step = step_world(CAR, states, np.zeros((2, 2)), (ob,), np.ones((2, 2)) * 5,
                      0.03, 0.05)
    assert step.collided[0] and not step.collided[1]
