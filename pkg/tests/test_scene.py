import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from lidalsim import constants as K
from lidalsim.scene import (
    Obstacle, Room, Scene, SceneError, Target, boxes_overlap, box_inside, build_scene,
    default_config, displace_furniture, load_scenario, sample_reflectivity,
)


def test_default_scene_has_four_desks_and_a_bookshelf():
    s = build_scene(default_config())
    kinds = sorted(o.kind for o in s.obstacles)
    assert kinds == ["bookshelf", "desk", "desk", "desk", "desk"]
    assert s.targets == ()
    assert s.room == Room()
    assert (s.room.width, s.room.length, s.room.height) == (4.0, 8.0, 3.0)
    assert (s.room.rho_walls, s.room.rho_ceiling, s.room.rho_floor) == (0.8, 0.8, 0.3)


def test_empty_room_has_six_bare_surfaces():
    s = build_scene({"room": {}, "obstacles": [], "targets": 0})
    p = s.patches()
    normals = {tuple(np.round(n).astype(int)) for n in p.normal}
    assert len(normals) == 6
    area = p.area.sum()
    assert area == pytest.approx(2 * (8 * 4 + 8 * 3 + 4 * 3))


def test_seeded_targets_reproduce():
    a = build_scene(default_config(targets=3, seed=7))
    b = build_scene(default_config(targets=3, seed=7))
    assert len(a.targets) == 3
    assert [t.reflectivity for t in a.targets] == [t.reflectivity for t in b.targets]
    assert [t.position for t in a.targets] == [t.position for t in b.targets]


@pytest.mark.parametrize("cfg", [
    {"obstacles": [{"kind": "desk", "position": [0.1, 2.0]}]},  # pokes through a wall
    {"obstacles": [{"kind": "desk", "position": [1, 2]}, {"kind": "desk", "position": [1.2, 2]}]},
    {"obstacles": [{"kind": "desk", "position": [1, 2], "reflectivity": 1.5}]},
    {"room": {"rho_walls": -0.1}},
    {"targets": [{"position": [1, 2], "reflectivity": 2.0}]},
])
def test_invalid_scenarios_are_rejected(cfg):
    with pytest.raises(SceneError):
        build_scene(cfg)


def test_targets_never_overlap_furniture():
    s = build_scene(default_config(targets=10, seed=3))
    boxes = s.obstacle_boxes() + s.target_boxes()
    for i, a in enumerate(boxes):
        assert box_inside(a, s.room)
        for b in boxes[i + 1:]:
            assert not boxes_overlap(a, b)


def test_patches_are_deterministic():
    s = build_scene(default_config(targets=2, seed=1))
    a, b = s.patches(), s.patches()
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_clipped_reflectivity_mean_matches_numerical_integral():
    rng = np.random.default_rng(0)
    draws = sample_reflectivity(rng, 100_000)
    assert draws.min() >= 0 and draws.max() <= 1
    mu, sd = K.TARGET_RHO_MEAN, K.TARGET_RHO_STD
    inner, _ = integrate.quad(lambda x: x * stats.norm.pdf(x, mu, sd), 0, 1)
    expected = inner + stats.norm.sf(1, mu, sd)
    assert abs(draws.mean() - expected) < 0.05


def test_displacement_identity_and_endpoints():
    cfg = load_scenario("fig6")
    s = build_scene({**cfg, "targets": 0})
    assert displace_furniture(s, 0.0) is s
    full = displace_furniture(s, 1.0)
    half = displace_furniture(s, 0.5)
    for o0, o1, oh in zip(s.obstacles, full.obstacles, half.obstacles):
        if o0.displaced_position is None:
            assert o1 == o0
            continue
        travel = math.dist(o0.position, o1.position)
        assert travel == pytest.approx(math.dist(o0.position, o0.displaced_position))
        assert math.dist(o0.position, oh.position) == pytest.approx(travel / 2)
    with pytest.raises(SceneError):
        displace_furniture(s, 1.5)


def test_displacement_to_nearest_wall_by_default():
    room = Room()
    t = Obstacle("table", (1.0, 4.0, 0.0), (1.5, 0.9, 0.75), movable=True)
    s = Scene(room, (t,))
    moved = displace_furniture(s, 1.0).obstacles[0]
    lo, _ = moved.box
    assert lo[0] == pytest.approx(0.05)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 6))
def test_random_scenes_are_valid(seed, n):
    s = build_scene(default_config(targets=n, seed=seed))
    boxes = s.obstacle_boxes() + s.target_boxes()
    assert all(box_inside(b, s.room) for b in boxes)
    assert not any(boxes_overlap(a, b) for i, a in enumerate(boxes) for b in boxes[i + 1:])
    assert all(0 <= t.reflectivity <= 1 for t in s.targets)


def test_target_moved_keeps_identity():
    t = Target(3, (1.0, 2.0), 0.5)
    m = t.moved((1.5, 2.5))
    assert (m.id, m.reflectivity, m.position) == (3, 0.5, (1.5, 2.5))
