"""Target trajectories: a directed random walk with obstacle avoidance.

A walker heads for its current waypoint with Gaussian heading jitter. Steps
that would enter an (inflated) obstacle, another person or a wall are
re-drawn uniformly among the collision-free headings. On arrival the
walker pauses (nomadic mode) for a random dwell, then picks another
waypoint uniformly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from . import constants as K
from .scene import Scene

HEADING_JITTER = math.radians(15.0)
DWELL_RANGE = (1.0, 10.0)
N_HEADINGS = 72


@dataclass(frozen=True)
class TrajectoryState:
    position: tuple
    heading: float = 0.0
    speed: float = K.TARGET_SPEED
    mode: str = "walking"  # or "nomadic"
    dwell_remaining: float = 0.0
    waypoint: int = 0
    stuck: bool = False


@dataclass(frozen=True)
class Pathway:
    waypoints: tuple
    dwell: tuple = DWELL_RANGE

    def __post_init__(self):
        object.__setattr__(self, "waypoints", tuple(tuple(map(float, w)) for w in self.waypoints))
        if len(self.waypoints) < 1:
            raise ValueError("a pathway needs at least one waypoint")
        lo, hi = self.dwell
        if lo < 0 or hi < lo:
            raise ValueError("dwell range must satisfy 0 <= lo <= hi")

    @property
    def n_locations(self):
        return len(self.waypoints)


def inflated_rects(scene: Scene, margin=K.TARGET_DIMS[1] / 2):
    """Floor rectangles (x0, y0, x1, y1) a walker's center must stay out of."""
    rects = []
    for o in scene.obstacles:
        lo, hi = o.box
        rects.append((lo[0] - margin, lo[1] - margin, hi[0] + margin, hi[1] + margin))
    return np.array(rects).reshape(-1, 4)


def _person_rects(others):
    # two axis-aligned people overlap unless |dx| >= depth or |dy| >= width
    dx, dy, _ = K.TARGET_DIMS
    return np.array([(x - dx, y - dy, x + dx, y + dy) for x, y in others]).reshape(-1, 4)


def feasible(xy, scene: Scene, others=(), margin=K.TARGET_DIMS[1] / 2):
    x, y = xy
    room = scene.room
    if not (margin <= x <= room.width - margin and margin <= y <= room.length - margin):
        return False
    rects = np.vstack([inflated_rects(scene, margin), _person_rects(others)])
    if not rects.size:
        return True
    inside = (rects[:, 0] < x) & (x < rects[:, 2]) & (rects[:, 1] < y) & (y < rects[:, 3])
    return not inside.any()


def _segment_clear(p, q, rects):
    """No rectangle interior is crossed by the segment p -> q."""
    if not rects.size:
        return True
    d = q - p
    t0 = np.zeros(len(rects))
    t1 = np.ones(len(rects))
    for ax in (0, 1):
        lo, hi = rects[:, ax], rects[:, ax + 2]
        if abs(d[ax]) < 1e-15:
            inside = (lo < p[ax]) & (p[ax] < hi)
            t0 = np.where(inside, t0, np.inf)
            continue
        a, b = (lo - p[ax]) / d[ax], (hi - p[ax]) / d[ax]
        t0 = np.maximum(t0, np.minimum(a, b))
        t1 = np.minimum(t1, np.maximum(a, b))
    return not np.any(t1 - t0 > 1e-12)


def _step_ok(p, q, scene, rects):
    return feasible(q, scene) and _segment_clear(p, q, rects)


def step(state: TrajectoryState, scene: Scene, dt, rng, pathway: Pathway, others=()):
    """Advance one walker by dt seconds."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if state.mode == "nomadic":
        left = state.dwell_remaining - dt
        if left > 1e-12:
            return replace(state, dwell_remaining=left)
        nxt = _next_waypoint(state.waypoint, pathway, rng)
        return replace(state, mode="walking", dwell_remaining=0.0, waypoint=nxt)

    p = np.array(state.position)
    goal = np.array(pathway.waypoints[state.waypoint])
    dist = state.speed * dt
    to_goal = goal - p
    if np.hypot(*to_goal) <= dist:
        lo, hi = pathway.dwell
        dwell = rng.uniform(lo, hi) if hi > 0 else 0.0
        if dwell <= 0:
            nxt = _next_waypoint(state.waypoint, pathway, rng)
            return replace(state, waypoint=nxt)
        return replace(state, mode="nomadic", dwell_remaining=dwell)

    rects = np.vstack([inflated_rects(scene), _person_rects(others)])
    heading = math.atan2(to_goal[1], to_goal[0]) + rng.normal(0.0, HEADING_JITTER)
    q = p + dist * np.array([math.cos(heading), math.sin(heading)])
    if not _step_ok(p, q, scene, rects) or not feasible(q, scene, others):
        angles = 2 * np.pi * np.arange(N_HEADINGS) / N_HEADINGS
        ok = []
        for a in angles:
            cand = p + dist * np.array([math.cos(a), math.sin(a)])
            if _step_ok(p, cand, scene, rects) and feasible(cand, scene, others):
                ok.append(a)
        if not ok:
            return replace(state, stuck=True)
        heading = float(ok[rng.integers(len(ok))])
        q = p + dist * np.array([math.cos(heading), math.sin(heading)])
    return replace(state, position=(float(q[0]), float(q[1])), heading=heading, stuck=False)


def _next_waypoint(current, pathway, rng):
    n = pathway.n_locations
    if n == 1:
        return 0
    k = int(rng.integers(n - 1))
    return k if k < current else k + 1


def random_pathway(scene: Scene, rng, n=8, dwell=(0.0, 0.0), others=(), max_tries=10_000):
    """Uniformly drawn feasible waypoints; zero dwell gives continuous walking."""
    pts = []
    for _ in range(max_tries):
        xy = (rng.uniform(0, scene.room.width), rng.uniform(0, scene.room.length))
        if feasible(xy, scene, others):
            pts.append(xy)
            if len(pts) == n:
                return Pathway(tuple(pts), dwell)
    raise ValueError("could not draw feasible waypoints")


def usable_pathway(pathway: Pathway, scene: Scene):
    """Drop waypoints made infeasible by the current furniture layout."""
    keep = tuple(w for w in pathway.waypoints if feasible(w, scene))
    if not keep:
        raise ValueError("no feasible waypoint left in this layout")
    return replace(pathway, waypoints=keep)


def sample_trajectory(pathway: Pathway, scene: Scene, duration, rate, seed, start=None):
    """Positions sampled at `rate` Hz for `duration` seconds as (t, x, y) tuples."""
    if duration < 0 or not rate > 0:
        raise ValueError("duration must be >= 0 and rate > 0")
    n = int(round(duration * rate))
    if n == 0:
        return []
    rng = np.random.default_rng(seed)
    pathway = usable_pathway(pathway, scene)
    if start is None:
        k = int(rng.integers(pathway.n_locations))
        start = pathway.waypoints[k]
        goal = _next_waypoint(k, pathway, rng)
    else:
        goal = int(rng.integers(pathway.n_locations))
    state = TrajectoryState(tuple(start), waypoint=goal)
    dt = 1.0 / rate
    out = [(0.0, *state.position)]
    for k in range(1, n):
        state = step(state, scene, dt, rng, pathway)
        out.append((k * dt, *state.position))
    return out


def walk_group(scene: Scene, starts, n_steps, dt, rng, pathways):
    """Several walkers stepped together; each avoids the others. Returns (n_steps, n, 2)."""
    states = [TrajectoryState(tuple(s), waypoint=int(rng.integers(p.n_locations)))
              for s, p in zip(starts, pathways)]
    out = np.zeros((n_steps, len(states), 2))
    for k in range(n_steps):
        out[k] = [s.position for s in states]
        if k == n_steps - 1:
            break
        for i, s in enumerate(states):
            others = [o.position for j, o in enumerate(states) if j != i]
            states[i] = step(s, scene, dt, rng, pathways[i], others)
    return out


def write_trajectory_csv(path, rows):
    """rows: iterable of (t, target_id, x, y)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "target_id", "x", "y"])
        for t, i, x, y in rows:
            w.writerow([f"{t:.6f}", i, repr(float(x)), repr(float(y))])
