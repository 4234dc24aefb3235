"""Labelled training data: random placements, short walks, noisy scans.

For every target count i (0 gives background-only samples) and iteration
j, targets are placed at random feasible spots with fresh reflectivities
and walk for a few snapshots; each snapshot is scanned on every link with
independent noise. A sample is the raw link waveform and its ground-truth
occupancy bits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import constants as K
from ..lidal import MimoLidal, MisoLidal, system_for
from ..mobility import random_pathway, walk_group
from ..scene import Scene, SceneError, place_targets

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataConfig:
    system: str = "mimo"
    i_max: int = 3
    itr: int = 50
    snapshots: int = 10
    include_background: bool = True
    seed: int = 0
    links: tuple | None = None  # restrict to these links; default every link

    def __post_init__(self):
        if self.system not in ("mimo", "miso"):
            raise ValueError("system must be 'mimo' or 'miso'")
        if self.i_max < 1 or self.itr < 1 or self.snapshots < 1:
            raise ValueError("i_max, itr and snapshots must be >= 1")


@dataclass
class Dataset:
    system: str
    X: dict = field(default_factory=dict)  # link -> (n, n_in) raw inputs
    A: dict = field(default_factory=dict)  # link -> (n, n_out) labels
    counts: list = field(default_factory=list)  # target count per snapshot
    scales: dict = field(default_factory=dict)  # link -> input normalization
    offsets: dict = field(default_factory=dict)  # link -> noiseless background input

    @property
    def links(self):
        return sorted(self.X)

    def __len__(self):
        return len(self.counts)


def _walk(scene, n, rng, steps):
    targets = place_targets(scene.room, scene.obstacles, n, rng)
    if n == 0:
        return [targets] * steps
    starts = [t.position for t in targets]
    paths = [random_pathway(scene, rng, n=4) for _ in targets]
    xy = walk_group(scene, starts, steps, 1.0 / K.SNAPSHOT_RATE, rng, paths)
    return [[t.moved(p) for t, p in zip(targets, xy[k])] for k in range(steps)]


def generate_training_data(scene: Scene, config: DataConfig, system=None) -> Dataset:
    """Scan random walks of 0..i_max targets; deterministic under config.seed."""
    system = system or system_for(scene, config.system)
    links = list(config.links) if config.links else system.links()
    xs = {link: [] for link in links}
    ys = {link: [] for link in links}
    counts = []
    first = 0 if config.include_background else 1
    for i in range(first, config.i_max + 1):
        for j in range(config.itr):
            rng = np.random.default_rng([config.seed, i, j])
            try:
                frames = _walk(scene, i, rng, config.snapshots)
            except (SceneError, ValueError) as exc:
                log.warning("placement failed for i=%d j=%d: %s", i, j, exc)
                continue
            for k, targets in enumerate(frames):
                snaps = system.scan_all(targets, seed=[config.seed, i, j, k], links=links)
                for link in links:
                    xs[link].append(snaps[link].vector())
                    ys[link].append(snaps[link].labels)
                counts.append(i)
    ds = Dataset(config.system, counts=counts)
    for link in links:
        ds.X[link] = np.array(xs[link])
        ds.A[link] = np.array(ys[link], float)
        ds.scales[link] = system.input_scale(link)
        ds.offsets[link] = system.background_snapshot(link).vector()
    return ds
