"""Furnished room geometry: room, furniture boxes, people, surface patches.

Coordinates: x runs across the room width, y along its length, z up from
the floor. Every solid is an axis-aligned box; reflections are diffuse.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import constants as K

EPS = 1e-9


class SceneError(ValueError):
    """Invalid geometry or scenario description."""


@dataclass(frozen=True)
class Room:
    length: float = K.ROOM_LENGTH
    width: float = K.ROOM_WIDTH
    height: float = K.ROOM_HEIGHT
    rho_walls: float = K.RHO_WALLS
    rho_floor: float = K.RHO_FLOOR
    rho_ceiling: float = K.RHO_CEILING

    def __post_init__(self):
        for name in ("length", "width", "height"):
            if not getattr(self, name) > 0:
                raise SceneError(f"room {name} must be positive")
        for name in ("rho_walls", "rho_floor", "rho_ceiling"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SceneError(f"room {name} must lie in [0, 1]")

    @property
    def bounds(self):
        return np.zeros(3), np.array([self.width, self.length, self.height])

    @property
    def diagonal(self):
        return math.sqrt(self.length**2 + self.width**2 + self.height**2)


@dataclass(frozen=True)
class Obstacle:
    """Axis-aligned box resting at `position` (center of its base).

    dims are (size along x, size along y, height).
    """

    kind: str
    position: tuple
    dims: tuple
    reflectivity: float = K.FURNITURE_REFLECTIVITY
    movable: bool = False
    displaced_position: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("desk", "bookshelf", "table", "custom"):
            raise SceneError(f"unknown obstacle kind {self.kind!r}")
        if len(self.position) != 3 or len(self.dims) != 3:
            raise SceneError("obstacle position and dims need three entries")
        if min(self.dims) <= 0:
            raise SceneError("obstacle dims must be positive")
        if not 0.0 <= self.reflectivity <= 1.0:
            raise SceneError("obstacle reflectivity must lie in [0, 1]")
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "dims", tuple(float(v) for v in self.dims))
        if self.displaced_position is not None:
            object.__setattr__(
                self, "displaced_position", tuple(float(v) for v in self.displaced_position)
            )

    @property
    def box(self):
        return _box(self.position, self.dims)


@dataclass(frozen=True)
class Target:
    id: int
    position: tuple
    reflectivity: float
    dims: tuple = K.TARGET_DIMS

    def __post_init__(self):
        if not 0.0 <= self.reflectivity <= 1.0:
            raise SceneError("target reflectivity must lie in [0, 1]")
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))

    @property
    def box(self):
        return _box((self.position[0], self.position[1], 0.0), self.dims)

    def moved(self, xy):
        return replace(self, position=(float(xy[0]), float(xy[1])))


def _box(position, dims):
    x, y, z = position
    dx, dy, h = dims
    return np.array([x - dx / 2, y - dy / 2, z]), np.array([x + dx / 2, y + dy / 2, z + h])


def boxes_overlap(a, b, tol=EPS):
    """True when the interiors of boxes a=(lo, hi) and b intersect."""
    return bool(np.all(a[0] < b[1] - tol) and np.all(b[0] < a[1] - tol))


def box_inside(box, room: Room, tol=EPS):
    lo, hi = room.bounds
    return bool(np.all(box[0] >= lo - tol) and np.all(box[1] <= hi + tol))


class Patches(NamedTuple):
    """Flat arrays describing reflective surface elements."""

    center: np.ndarray   # (N, 3)
    normal: np.ndarray   # (N, 3)
    area: np.ndarray     # (N,)
    rho: np.ndarray      # (N,)

    def __len__(self):
        return self.area.shape[0]

    @staticmethod
    def concat(parts: Sequence["Patches"]) -> "Patches":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Patches(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0))
        return Patches(*(np.concatenate(cols) for cols in zip(*parts)))


def face_patches(origin, u, v, normal, rho, patch_size) -> Patches:
    """Discretize the rectangle origin + s*u + t*v (s, t in [0, 1])."""
    origin, u, v = (np.asarray(a, dtype=float) for a in (origin, u, v))
    a, b = np.linalg.norm(u), np.linalg.norm(v)
    na = max(1, int(round(a / patch_size)))
    nb = max(1, int(round(b / patch_size)))
    s = (np.arange(na) + 0.5) / na
    t = (np.arange(nb) + 0.5) / nb
    ss, tt = np.meshgrid(s, t, indexing="ij")
    centers = origin + ss.reshape(-1, 1) * u + tt.reshape(-1, 1) * v
    n = centers.shape[0]
    return Patches(
        centers,
        np.tile(np.asarray(normal, dtype=float), (n, 1)),
        np.full(n, a * b / (na * nb)),
        np.full(n, float(rho)),
    )


def box_patches(lo, hi, rho, patch_size, bottom=False) -> Patches:
    """Patches on the outward faces of a box; the bottom face is skipped by default."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    dx, dy, dz = hi - lo
    X, Y, Z = np.eye(3)
    faces = [
        ((lo[0], lo[1], hi[2]), dx * X, dy * Y, Z),            # top
        ((lo[0], lo[1], lo[2]), dy * Y, dz * Z, -X),           # -x side
        ((hi[0], lo[1], lo[2]), dy * Y, dz * Z, X),            # +x side
        ((lo[0], lo[1], lo[2]), dx * X, dz * Z, -Y),           # -y side
        ((lo[0], hi[1], lo[2]), dx * X, dz * Z, Y),            # +y side
    ]
    if bottom:
        faces.append(((lo[0], lo[1], lo[2]), dx * X, dy * Y, -Z))
    return Patches.concat([face_patches(o, u, v, n, rho, patch_size) for o, u, v, n in faces])


def room_patches(room: Room, patch_size) -> Patches:
    W, L, H = room.width, room.length, room.height
    X, Y, Z = np.eye(3)
    faces = [
        ((0, 0, 0), W * X, L * Y, Z, room.rho_floor),
        ((0, 0, H), W * X, L * Y, -Z, room.rho_ceiling),
        ((0, 0, 0), L * Y, H * Z, X, room.rho_walls),
        ((W, 0, 0), L * Y, H * Z, -X, room.rho_walls),
        ((0, 0, 0), W * X, H * Z, Y, room.rho_walls),
        ((0, L, 0), W * X, H * Z, -Y, room.rho_walls),
    ]
    return Patches.concat([face_patches(o, u, v, n, r, patch_size) for o, u, v, n, r in faces])


@dataclass(frozen=True)
class Scene:
    room: Room = field(default_factory=Room)
    obstacles: tuple = ()
    targets: tuple = ()
    patch_size: float = 0.10

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.patch_size > 0:
            raise SceneError("patch_size must be positive")
        validate_boxes(self.room, [o.box for o in self.obstacles] + [t.box for t in self.targets])

    def obstacle_boxes(self):
        return [o.box for o in self.obstacles]

    def target_boxes(self):
        return [t.box for t in self.targets]

    def static_patches(self) -> Patches:
        """Room surfaces plus furniture faces (no people)."""
        parts = [room_patches(self.room, self.patch_size)]
        parts += [box_patches(*o.box, o.reflectivity, self.patch_size) for o in self.obstacles]
        return Patches.concat(parts)

    def target_patches(self) -> Patches:
        return Patches.concat(
            [box_patches(*t.box, t.reflectivity, self.patch_size) for t in self.targets]
        )

    def patches(self) -> Patches:
        return Patches.concat([self.static_patches(), self.target_patches()])

    def with_targets(self, targets) -> "Scene":
        return replace(self, targets=tuple(targets))

    def layout_key(self):
        """Hashable description of everything except the targets."""
        return (self.room, self.obstacles, self.patch_size)


def validate_boxes(room: Room, boxes):
    for i, b in enumerate(boxes):
        if not box_inside(b, room):
            raise SceneError(f"box {i} extends outside the room")
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if boxes_overlap(boxes[i], boxes[j]):
                raise SceneError(f"boxes {i} and {j} intersect")


def sample_reflectivity(rng, n, mean=K.TARGET_RHO_MEAN, std=K.TARGET_RHO_STD):
    """Gaussian reflectivity clipped (not resampled) to [0, 1]."""
    return np.clip(rng.normal(mean, std, size=n), 0.0, 1.0)


def target_feasible(xy, room: Room, boxes, dims=K.TARGET_DIMS):
    box = _box((xy[0], xy[1], 0.0), dims)
    return box_inside(box, room) and not any(boxes_overlap(box, b) for b in boxes)


def place_targets(room, obstacles, n, rng, existing=(), max_tries=10_000, start_id=0):
    """Draw n non-overlapping target positions uniformly over the free floor."""
    boxes = [o.box for o in obstacles] + [t.box for t in existing]
    dx, dy, _ = K.TARGET_DIMS
    targets = []
    rhos = sample_reflectivity(rng, n)
    for k in range(n):
        for _ in range(max_tries):
            xy = (rng.uniform(dx / 2, room.width - dx / 2), rng.uniform(dy / 2, room.length - dy / 2))
            if target_feasible(xy, room, boxes):
                break
        else:
            raise SceneError("could not place target without overlap")
        t = Target(start_id + k, xy, float(rhos[k]))
        targets.append(t)
        boxes.append(t.box)
    return targets


# scenario files -------------------------------------------------------------

def default_obstacles():
    d, b = K.DESK_DIMS, K.BOOKSHELF_DIMS
    return [
        Obstacle("desk", (0.9, 2.5, 0.0), d),
        Obstacle("desk", (3.1, 2.5, 0.0), d),
        Obstacle("desk", (0.9, 5.0, 0.0), d),
        Obstacle("desk", (3.1, 5.0, 0.0), d),
        Obstacle("bookshelf", (2.0, 7.6, 0.0), b),
    ]


def default_config(targets=0, seed=0):
    return {
        "room": {},
        "obstacles": [_obstacle_dict(o) for o in default_obstacles()],
        "targets": targets,
        "seed": seed,
        "patch_size": 0.10,
    }


def _obstacle_dict(o: Obstacle):
    d = {"kind": o.kind, "position": list(o.position), "dims": list(o.dims),
         "reflectivity": o.reflectivity}
    if o.movable:
        d["movable"] = True
    if o.displaced_position is not None:
        d["displaced_position"] = list(o.displaced_position)
    return d


_KIND_DIMS = {"desk": K.DESK_DIMS, "bookshelf": K.BOOKSHELF_DIMS}


def build_scene(config) -> Scene:
    """Build a validated Scene from a scenario mapping (see README for the schema).

    `targets` is either a count (positions and reflectivities drawn from
    `seed`) or a list of {"position": [x, y], "reflectivity": r} entries;
    a missing reflectivity is drawn from the seed as well.
    """
    room = Room(**config.get("room", {}))
    obstacles = []
    for spec in config.get("obstacles", []):
        spec = dict(spec)
        kind = spec.pop("kind", "custom")
        dims = spec.pop("dims", _KIND_DIMS.get(kind))
        if dims is None:
            raise SceneError("custom obstacles need dims")
        pos = list(spec.pop("position"))
        if len(pos) == 2:
            pos.append(0.0)
        obstacles.append(Obstacle(kind, tuple(pos), tuple(dims), **spec))
    validate_boxes(room, [o.box for o in obstacles])
    rng = np.random.default_rng(config.get("seed", 0))
    tspec = config.get("targets", 0)
    if isinstance(tspec, int):
        targets = place_targets(room, obstacles, tspec, rng)
    else:
        targets = []
        for k, t in enumerate(tspec):
            rho = t.get("reflectivity")
            if rho is None:
                rho = float(sample_reflectivity(rng, 1)[0])
            targets.append(Target(k, tuple(t["position"]), float(rho)))
    return Scene(room, tuple(obstacles), tuple(targets), float(config.get("patch_size", 0.10)))


def load_scenario(path) -> dict:
    path = Path(path)
    if not path.exists():
        bundled = Path(__file__).parent / "scenarios" / f"{path.stem}.json"
        if bundled.exists():
            path = bundled
    with open(path) as fh:
        return json.load(fh)


# furniture displacement --------------------------------------------------------

WALL_GAP = 0.05


def wall_position(o: Obstacle, room: Room, gap=WALL_GAP):
    """Center that puts the obstacle against the wall nearest to it."""
    x, y, z = o.position
    hx, hy = o.dims[0] / 2, o.dims[1] / 2
    options = [
        (x - hx, (hx + gap, y)),
        (room.width - x - hx, (room.width - hx - gap, y)),
        (y - hy, (x, hy + gap)),
        (room.length - y - hy, (x, room.length - hy - gap)),
    ]
    _, (nx, ny) = min(options, key=lambda t: t[0])
    return (nx, ny, z)


def displace_furniture(scene: Scene, fraction: float, seed=None, step=0.01) -> Scene:
    """Move every movable obstacle `fraction` of the way along its path.

    The path is the straight line from the original center to the
    obstacle's `displaced_position` (or the nearest-wall position when none
    is given). A blocked position slides back along the path, then forward,
    until the box fits. `seed` is accepted for call symmetry; the path is
    deterministic.
    """
    if not 0.0 <= fraction <= 1.0:
        raise SceneError("fraction must lie in [0, 1]")
    if fraction == 0.0:
        return scene
    moved = list(scene.obstacles)
    for i, o in enumerate(scene.obstacles):
        if not (o.movable or o.displaced_position is not None):
            continue
        start = np.array(o.position)
        end = np.array(o.displaced_position or wall_position(o, scene.room))
        others = [m.box for j, m in enumerate(moved) if j != i] + scene.target_boxes()
        n_steps = int(math.ceil(np.linalg.norm(end - start) / step)) + 1
        candidates = [fraction]
        for k in range(1, n_steps + 1):
            candidates += [fraction - k * step, fraction + k * step]
        for f in candidates:
            if not 0.0 <= f <= 1.0:
                continue
            trial = replace(o, position=tuple(start + f * (end - start)))
            if box_inside(trial.box, scene.room) and not any(boxes_overlap(trial.box, b) for b in others):
                moved[i] = trial
                break
        else:
            raise SceneError(f"obstacle {i} cannot be displaced to a feasible position")
    return replace(scene, obstacles=tuple(moved))
