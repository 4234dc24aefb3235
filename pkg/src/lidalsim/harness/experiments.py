"""Experiment drivers: single-target distinguishing runs and multi-target counting.

Every random draw is keyed by (seed, indices), so any row can be
recomputed on its own and results never depend on the worker count.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import constants as K
from ..distinguishers.ann import TrainerConfig, train_ann
from ..distinguishers.stateful import (
    AnnDistinguisher, BsmDistinguisher, CcmDistinguisher, slot_errors,
)
from ..lidal import PerfectDistinguisher, run_mimo_cycle, run_miso_cycle, system_for, units_from_config
from ..mobility import random_pathway, sample_trajectory, walk_group
from ..scene import SceneError, Target, build_scene, displace_furniture, load_scenario, place_targets, sample_reflectivity
from .datagen import DataConfig, generate_training_data
from .metrics import cdf, drmse, mape

log = logging.getLogger(__name__)

METHODS = ("bsm", "ccm", "ann")
CALIBRATION_SEED = 2**31 - 1  # keeps the reference scans apart from every experiment draw


class ModelError(FileNotFoundError):
    pass


def workers():
    """Worker count from LIDALSIM_WORKERS (default 1)."""
    try:
        return max(1, int(os.environ.get("LIDALSIM_WORKERS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class Setup:
    """A scenario resolved into its scene and sensing system."""

    config: dict
    scene: object
    system: object

    @classmethod
    def load(cls, scenario, kind="mimo"):
        cfg = load_scenario(scenario) if isinstance(scenario, (str, Path)) else dict(scenario)
        scene = build_scene({**cfg, "targets": 0})
        return cls(cfg, scene, system_for(scene, kind, units_from_config(cfg)))

    @property
    def kind(self):
        return self.system.kind

    def displaced(self, fraction):
        scene = displace_furniture(self.scene, fraction)
        return Setup(self.config, scene, system_for(scene, self.kind, units_from_config(self.config)))

    def pathway_dwell(self):
        return tuple(self.config.get("pathway", {}).get("dwell", (0.0, 0.0)))

    def pathway_locations(self):
        return int(self.config.get("pathway", {}).get("locations", 8))


def references(system, links=None, seed=CALIBRATION_SEED):
    return {link: system.calibration(link, [seed, *link[1:]]) for link in links or system.links()}


def make_distinguisher(method, system, models=None, refs=None, ccm_threshold=None):
    """A fresh stateful distinguisher.

    BSM and CCM detect motion between snapshots unless `refs` (calibration
    scans, see `references`) are given.
    """
    sigma = system.sigma()
    if method == "bsm":
        return BsmDistinguisher(sigma, refs)
    if method == "ccm":
        kw = {} if ccm_threshold is None else {"threshold": ccm_threshold}
        return CcmDistinguisher(sigma, refs, **kw)
    if method == "ann":
        if models is None:
            raise ModelError("the ann method needs trained models")
        return models if isinstance(models, AnnDistinguisher) else AnnDistinguisher(models)
    if method == "perfect":
        return PerfectDistinguisher()
    raise ValueError(f"unknown method {method!r}")


def train_models(setup: Setup, data: DataConfig | None = None, trainer: TrainerConfig | None = None,
                 links=None):
    """Generate labelled data on the setup's layout and train one network per link."""
    data = data or DataConfig(setup.kind)
    if links is not None:
        data = DataConfig(**{**asdict(data), "links": tuple(links)})
    ds = generate_training_data(setup.scene, data, setup.system)
    models, reports = {}, {}
    for link in ds.links:
        net, rep = train_ann(ds.X[link], ds.A[link], trainer or TrainerConfig(seed=data.seed),
                             scale=ds.scales[link], meta={"link": list(link)},
                             offset=ds.offsets[link])
        models[link], reports[link] = net, rep
    return AnnDistinguisher(models), reports, ds


# single-target distinguishing (monostatic) -----------------------------------------

@dataclass
class DistinguishingResult:
    methods: tuple
    rows: list = field(default_factory=list)  # (seed, k, t, x, y, visible, method, missed, phantom)
    n_snapshots: int = 0

    def error(self, method):
        """Percentage of snapshots where the method missed the target or reported a phantom."""
        errs = [r for r in self.rows if r[6] == method]
        if not errs:
            raise KeyError(method)
        return 100.0 * sum(1 for r in errs if r[7] or r[8]) / len(errs)

    def errors(self):
        return {m: self.error(m) for m in self.methods}

    HEADER = ("seed", "snapshot", "time", "x", "y", "visible", "method", "missed", "phantom")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4]), int(r[5]), r[6], r[7], r[8]])


def single_target_run(setup: Setup, detectors: dict, n_snapshots=1500, seed=0, run_setup=None,
                      link=None, walkers=5):
    """Nomadic walkers scanned one at a time on one monostatic link.

    The snapshots are split evenly over `walkers` people, each with its own
    pathway and reflectivity; every detector sees the same scans. `setup` is
    the layout the detectors were calibrated on, `run_setup` (default the
    same) the layout the walks happen in.
    """
    run = run_setup or setup
    link = link or run.system.links()[0]
    res = DistinguishingResult(tuple(detectors))
    per = [n_snapshots // walkers + (w < n_snapshots % walkers) for w in range(walkers)]
    k = 0
    for w, n in enumerate(per):
        rng = np.random.default_rng([seed, w, 0])
        path = random_pathway(setup.scene, rng, n=setup.pathway_locations(), dwell=setup.pathway_dwell())
        rho = float(sample_reflectivity(rng, 1)[0])
        traj = sample_trajectory(path, run.scene, n / K.SNAPSHOT_RATE, K.SNAPSHOT_RATE, [seed, w, 1])
        for d in detectors.values():
            d.reset()
        for j, (t, x, y) in enumerate(traj):
            snap = run.system.scan([Target(0, (x, y), rho)], link[1], link[2], seed=[seed, w, 2, j],
                                   timestamp=t)
            visible = bool(snap.labels.any())
            for name, d in detectors.items():
                missed, phantom = slot_errors(snap.labels, d.detect(snap), d.candidates)
                res.rows.append((seed, k, t, x, y, visible, name, missed, phantom))
            k += 1
    res.n_snapshots = k
    return res


def static_experiment(setup: Setup, models, n_snapshots=1500, seed=0, methods=METHODS):
    """Fixed furniture, one nomadic target: false-distinguishing error per method."""
    dets = {m: make_distinguisher(m, setup.system, models) for m in methods}
    return single_target_run(setup, dets, n_snapshots, seed)


def displacement_sweep(setup: Setup, models, fractions=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
                       n_snapshots=1500, seed=0, methods=METHODS):
    """Error per method as the movable furniture drifts from its trained layout.

    The networks keep the weights trained on the original layout.
    """
    out = {}
    for f in fractions:
        dets = {m: make_distinguisher(m, setup.system, models) for m in methods}
        out[float(f)] = single_target_run(setup, dets, n_snapshots, seed, run_setup=setup.displaced(f))
    return out


def write_sweep_csv(path, sweep: dict):
    methods = next(iter(sweep.values())).methods if sweep else ()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("displacement", *methods))
        for f, res in sorted(sweep.items()):
            e = res.errors()
            w.writerow((repr(f), *(repr(e[m]) for m in methods)))


# multi-target counting and localization ----------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "default"
    system: str = "mimo"
    method: str = "ann"
    i_max: int = 15
    itr: int = 250
    snapshots: int = 10
    seed: int = 0
    model_dir: str | None = None

    def __post_init__(self):
        if self.system not in ("mimo", "miso"):
            raise ValueError("system must be 'mimo' or 'miso'")
        if self.method not in (*METHODS, "perfect"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.i_max < 1 or self.itr < 1 or self.snapshots < 1:
            raise ValueError("i_max, itr and snapshots must be >= 1")


@dataclass
class ExperimentResult:
    rows: list = field(default_factory=list)  # (seed, n, j, k, method, actual, estimated, drmse)

    HEADER = ("seed", "count", "iteration", "snapshot", "method", "actual", "estimated", "drmse")

    def _select(self, method):
        rows = [r for r in self.rows if method is None or r[4] == method]
        if not rows:
            raise KeyError(method)
        return rows

    def mape(self, method=None, count=None):
        rows = [r for r in self._select(method) if count is None or r[5] == count]
        return mape([r[5] for r in rows], [r[6] for r in rows])

    def mape_by_count(self, method=None):
        counts = sorted({r[5] for r in self._select(method)})
        return {n: self.mape(method, n) for n in counts}

    def drmse_values(self, method=None):
        return np.array([r[7] for r in self._select(method)], float)

    def cdf(self, method=None):
        return cdf(self.drmse_values(method))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([*r[:7], repr(r[7])])

    def write_cdf(self, path, method=None):
        """Gnuplot-ready two-column curve: DRMSE, cumulative fraction."""
        with open(path, "w") as fh:
            fh.write("# drmse_m fraction\n")
            for v, f in self.cdf(method).curve():
                fh.write(f"{v!r} {f!r}\n")


def _walk_task(args):
    setup, n, j, snapshots, seed, methods, models = args
    rng = np.random.default_rng([seed, n, j])
    try:
        targets = place_targets(setup.scene.room, setup.scene.obstacles, n, rng)
        paths = [random_pathway(setup.scene, rng, n=4) for _ in targets]
        xy = walk_group(setup.scene, [t.position for t in targets], snapshots,
                        1.0 / K.SNAPSHOT_RATE, rng, paths)
    except (SceneError, ValueError) as exc:
        log.warning("placement failed for n=%d j=%d: %s", n, j, exc)
        return []
    dets = {m: make_distinguisher(m, setup.system, models) for m in methods}
    cycle = run_mimo_cycle if setup.kind == "mimo" else run_miso_cycle
    rows = []
    for k in range(snapshots):
        ts = [t.moved(p) for t, p in zip(targets, xy[k])]
        scene = setup.scene.with_targets(ts)
        snaps = setup.system.scan_all(ts, seed=[seed, n, j, k], timestamp=k / K.SNAPSHOT_RATE)
        truth = [t.position for t in ts]
        for m, d in dets.items():
            rep = cycle(scene, d, [seed, n, j, k], system=setup.system, snapshots=snaps)
            rows.append((seed, n, j, k, m, n, rep.count, drmse(truth, rep.positions)))
    return rows


def counting_run(setup: Setup, methods, models=None, i_max=5, itr=10, snapshots=10, seed=0,
                 n_workers=None):
    """Walks of 1..i_max targets; each method runs on the same scans."""
    tasks = [(setup, n, j, snapshots, seed, tuple(methods), models)
             for n in range(1, i_max + 1) for j in range(itr)]
    n_workers = n_workers or workers()
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as pool:
            parts = list(pool.map(_walk_task, tasks))
    else:
        parts = [_walk_task(t) for t in tasks]
    return ExperimentResult([r for p in parts for r in p])


def load_models(model_dir):
    if model_dir is None or not Path(model_dir).is_dir():
        raise ModelError(f"model directory not found: {model_dir}")
    return AnnDistinguisher.load(model_dir)


def run_experiment(config: ExperimentConfig, out=None):
    """Counting MAPE per target count and the DRMSE CDF; CSVs go to `out` when given."""
    setup = Setup.load(config.scenario, config.system)
    models = load_models(config.model_dir) if config.method == "ann" else None
    res = counting_run(setup, (config.method,), models, config.i_max, config.itr,
                       config.snapshots, config.seed)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        res.write_csv(out / "results.csv")
        with open(out / "mape.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("count", "mape_percent"))
            for n, v in res.mape_by_count().items():
                w.writerow((n, repr(v)))
        if np.isfinite(res.drmse_values()).any():
            res.write_cdf(out / "drmse_cdf.dat")
    return res


__all__ = [
    "ExperimentConfig", "ExperimentResult", "DistinguishingResult", "ModelError", "Setup",
    "counting_run", "displacement_sweep", "load_models", "make_distinguisher", "references",
    "run_experiment", "single_target_run", "static_experiment", "train_models", "workers",
    "write_sweep_csv",
]
