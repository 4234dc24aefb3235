"""Acceptance criteria 1-14.

Each test records a PASS/FAIL line with the measured numbers; the lines are
repeated in the terminal summary. The experiment criteria (10-14) train
their networks once per session and take tens of minutes on one core.
"""

import filecmp
import math
import time

import numpy as np
import pytest
from scipy import ndimage

from lidalsim import constants as K
from lidalsim.channel import Waveform, add_noise
from lidalsim.distinguishers.ann import (
    Mlp, TrainerConfig, compute_jacobian, lm_update, ann_forward, train_ann,
)
from lidalsim.harness import cli
from lidalsim.harness.datagen import DataConfig, generate_training_data
from lidalsim.harness.experiments import (
    Setup, counting_run, displacement_sweep, static_experiment, train_models,
)
from lidalsim.harness.metrics import cdf, drmse, mape
from lidalsim.lidal import (
    PerfectDistinguisher, echo_range, run_miso_cycle, system_for, triangulate,
)
from lidalsim.scene import build_scene, default_config, place_targets


# 1 ---------------------------------------------------------------------------------

def _fd_jacobian(m, X, h=1e-6):
    theta = m.to_vector()
    cols = []
    for p in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[p] += h
        dn[p] -= h
        # residual e = A - y, so de/dtheta = -dy/dtheta
        cols.append(-(ann_forward(m.with_vector(up), X) - ann_forward(m.with_vector(dn), X)).ravel() / (2 * h))
    return np.stack(cols, axis=1)


def test_c01_jacobian_matches_finite_differences(record):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        while True:
            n_in, n_h, n_out = rng.integers(1, 5), rng.integers(1, 4), rng.integers(1, 3)
            if n_in * n_h + n_h + n_h * n_out + n_out <= 20:
                break
        m = Mlp.random(int(n_in), int(n_h), int(n_out), seed=[1, trial], limit=1.5)
        X = rng.normal(size=(3, n_in))
        Ja, Jn = compute_jacobian(m, X), _fd_jacobian(m, X)
        worst = max(worst, float(np.max(np.abs(Ja - Jn) / np.maximum(np.abs(Jn), 1e-3))))
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 10
    record(1, ok, f"max relative error {worst:.2e} (< 1e-4), {dt:.2f} s (< 10 s)")
    assert ok


# 2 ---------------------------------------------------------------------------------

def test_c02_lm_hand_oracle(record):
    new, _ = lm_update(np.array([0.0]), np.array([[-1.0]]), np.array([1.0]), 0.05)
    exact = 1.0 / 1.05  # 0.952380952..., printed to four places as 0.9524
    ok = abs(new[0] - exact) <= 1e-9 and round(new[0], 4) == 0.9524
    record(2, ok, f"w' = {new[0]:.12f}, |w' - 1/1.05| = {abs(new[0] - exact):.1e}")
    assert ok


# 3 ---------------------------------------------------------------------------------

def _grid_oracle(cons, bounds, height=0.0):
    """Brute-force zooming grid search for the least-squares point."""
    x0, y0, x1, y1 = bounds

    def cost(px, py):
        c = 0.0
        for tx, rx, p in cons:
            q = np.stack([px, py, np.full_like(px, height)], axis=-1)
            c = c + (np.linalg.norm(q - tx, axis=-1) + np.linalg.norm(q - rx, axis=-1) - p) ** 2
        return c

    step0 = 0.05
    gx, gy = np.meshgrid(np.arange(x0, x1 + 1e-9, step0), np.arange(y0, y1 + 1e-9, step0), indexing="ij")
    c = cost(gx, gy)
    # refine from every coarse local minimum: a thin ellipse valley can hide between grid points
    starts = np.argwhere(c == ndimage.minimum_filter(c, size=3, mode="nearest"))
    candidates = []
    for i, j in starts:
        best = np.array([gx[i, j], gy[i, j]])
        step = step0
        while step > 1e-11:
            off = np.linspace(-3 * step, 3 * step, 31)
            px, py = np.meshgrid(best[0] + off, best[1] + off, indexing="ij")
            cc = cost(px, py)
            k = np.unravel_index(np.argmin(cc), cc.shape)
            best = np.array([px[k], py[k]])
            step /= 4
        candidates.append((float(cost(best[:1], best[1:])[0]), tuple(best)))
    return np.array(min(candidates)[1])


def test_c03_triangulation_oracle(record):
    t0 = time.perf_counter()
    units = [np.array(p, float) for p in ((1, 1, 3), (1, 3, 3), (3, 1, 3))]
    f = triangulate([(u, u, 2 * math.sqrt(11)) for u in units], bounds=(0, 0, 4, 8))
    sym = math.dist(f.position, (2, 2))
    grid = [np.array(p, float) for p in K.UNIT_POSITIONS]
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        while True:
            a, b, c = (grid[i] for i in rng.choice(8, 3, replace=False))
            u, v = b[:2] - a[:2], c[:2] - a[:2]
            if abs(u[0] * v[1] - u[1] * v[0]) > 1e-6:
                break
        p = np.array([rng.uniform(0, 4), rng.uniform(0, 8), 0.0])
        # one monostatic circle and two bistatic ellipses, as in a cycle
        cons = [(a, a, 2 * np.linalg.norm(p - a)),
                (b, a, np.linalg.norm(p - b) + np.linalg.norm(p - a)),
                (c, a, np.linalg.norm(p - c) + np.linalg.norm(p - a))]
        fix = triangulate(cons, bounds=(0, 0, 4, 8))
        oracle = _grid_oracle(cons, (0, 0, 4, 8))
        worst = max(worst, math.dist(fix.position, oracle))
    dt = time.perf_counter() - t0
    ok = sym < 1e-6 and worst < 1e-4 and dt < 30
    record(3, ok, f"symmetric error {sym:.1e} m, worst oracle gap {worst:.1e} m over 1000, {dt:.1f} s")
    assert ok


# 4 ---------------------------------------------------------------------------------

def test_c04_range_quantization(record):
    scene = build_scene(default_config())
    system = system_for(scene, "mimo")
    rng = np.random.default_rng(4)
    errors, dark = [], 0
    while len(errors) < 500:
        [t] = place_targets(scene.room, scene.obstacles, 1, rng)
        u = min(system.units, key=lambda u: math.dist(u.position[:2], t.position))
        snap = system.scan([t], u.id, u.id)
        slots = np.flatnonzero(snap.labels)
        if not slots.size:
            dark += 1  # reflectivity clipped near zero: no echo to range
            continue
        head = np.array([*t.position, K.TARGET_DIMS[2]])
        errors.append(abs(echo_range(int(slots[0])) - np.linalg.norm(head - u.position)))
    worst = max(errors)
    ok = worst <= 0.30
    record(4, ok, f"max monostatic range error {worst:.3f} m over 500 placements (<= 0.30); "
                  f"{dark} echo-free draws skipped")
    assert ok


# 5 ---------------------------------------------------------------------------------

def test_c05_miso_quantization(record):
    scene = build_scene(default_config())
    system = system_for(scene, "miso")
    rng = np.random.default_rng(5)
    errors, dark = [], 0
    while len(errors) < 500:
        targets = place_targets(scene.room, scene.obstacles, 1, rng)
        snaps = system.scan_all(targets)
        rep = run_miso_cycle(scene.with_targets(targets), PerfectDistinguisher(), None,
                             system=system, snapshots=snaps)
        if rep.count == 0:
            dark += 1  # echo below the label gate: room ends or dark reflectivity
            continue
        assert rep.count == 1
        errors.append(math.dist(rep.positions[0], targets[0].position))
    worst = max(errors)
    ok = worst <= 0.354
    record(5, ok, f"max DOA error {worst:.3f} m over 500 placements (<= 0.354); "
                  f"{dark} echo-free draws skipped")
    assert ok


# 6 ---------------------------------------------------------------------------------

def test_c06_bsm_noise_doubling(record):
    system = system_for(build_scene(default_config()), "mimo")
    det = system.units[0].detector
    base = system.background_snapshot(("mimo", 0, 0)).waveforms[0].samples
    clean = Waveform(np.resize(base, 100_000))
    a, b = add_noise(clean, det, seed=61), add_noise(clean, det, seed=62)
    ratio = float(np.var(b.samples - a.samples) / system.sigma() ** 2)
    ok = abs(ratio - 2.0) <= 0.06
    record(6, ok, f"difference variance / sigma^2 = {ratio:.4f} (2 +/- 3%)")
    assert ok


# 7 ---------------------------------------------------------------------------------

def test_c07_xor_convergence(record):
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], float)
    A = np.array([[0], [1], [1], [0]], float)
    t0 = time.perf_counter()
    _, rep = train_ann(X, A, TrainerConfig(epochs=500, validation_fraction=0.0, beta_range=(1.0, 1.5, 3.0)))
    dt = time.perf_counter() - t0
    ok = rep.best_train_mse < 1e-3 and dt < 60
    record(7, ok, f"XOR MSE {rep.best_train_mse:.2e} at beta {rep.best_beta} (< 1e-3), {dt:.1f} s")
    assert ok


# 8 ---------------------------------------------------------------------------------

def _cli_runs(out):
    models = out / "train" / "models"
    return {
        "simulate": ["simulate", "--seed", "3", "--targets", "2", "--out", str(out / "simulate")],
        "simulate-miso": ["simulate", "--system", "miso", "--seed", "3", "--targets", "2",
                          "--out", str(out / "simulate-miso")],
        "train": ["train", "--scenario", "fig6", "--seed", "3", "--i-max", "1", "--itr", "2",
                  "--snapshots", "3", "--epochs", "3", "--out", str(out / "train")],
        "evaluate": ["evaluate", "--method", "ccm", "--seed", "3", "--i-max", "2", "--itr", "1",
                     "--snapshots", "2", "--out", str(out / "evaluate")],
        "sweep-static": ["sweep", "--scenario", "fig6", "--kind", "static", "--seed", "3",
                         "--snapshots", "10", "--models", str(models), "--out", str(out / "static")],
        "sweep-furniture": ["sweep", "--scenario", "fig6", "--kind", "furniture", "--seed", "3",
                            "--snapshots", "5", "--fractions", "0", "1", "--models", str(models),
                            "--out", str(out / "furniture")],
        "sweep-count": ["sweep", "--system", "miso", "--kind", "count", "--method", "ccm", "--seed", "3",
                        "--i-max", "2", "--itr", "1", "--per-walk", "2", "--out", str(out / "count")],
    }


def test_c08_cli_determinism(tmp_path, record):
    trees = []
    for rep in ("a", "b"):
        root = tmp_path / rep
        for name, argv in _cli_runs(root).items():
            assert cli.main(argv) == 0, name
        trees.append(root)
    files = sorted(p.relative_to(trees[0]) for p in trees[0].rglob("*") if p.is_file())
    same = [filecmp.cmp(trees[0] / f, trees[1] / f, shallow=False) for f in files]
    ok = bool(files) and all(same)
    record(8, ok, f"{sum(same)}/{len(files)} output files byte-identical across two runs "
                  f"of simulate, train, evaluate and sweep")
    assert ok


# 9 ---------------------------------------------------------------------------------

def _greedy_oracle(T, E):
    T, E = [tuple(t) for t in T], [tuple(e) for e in E]
    left_t, left_e, d2 = set(range(len(T))), set(range(len(E))), []
    while left_t and left_e:
        i, j = min(((i, j) for i in left_t for j in left_e),
                    key=lambda ij: (math.dist(T[ij[0]], E[ij[1]]), ij[0] * len(E) + ij[1]))
        d2.append(math.dist(T[i], E[j]) ** 2)
        left_t.discard(i)
        left_e.discard(j)
    return math.sqrt(sum(d2) / len(d2)) if d2 else float("nan")


def test_c09_metric_oracles(record):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        actual = rng.integers(1, 16, n)
        est = rng.integers(0, 18, n)
        brute = 100.0 * sum(abs(a - e) / a for a, e in zip(actual.tolist(), est.tolist())) / n
        worst = max(worst, abs(mape(actual, est) - brute) / max(brute, 1e-300))

        T = rng.uniform(0, 4, (int(rng.integers(1, 6)), 2))
        E = rng.uniform(0, 4, (int(rng.integers(1, 6)), 2))
        ref = _greedy_oracle(T, E)
        worst = max(worst, abs(drmse(T, E) - ref) / ref)

        s = rng.exponential(size=int(rng.integers(1, 50)))
        c = cdf(s)
        srt = sorted(s.tolist())
        q = float(rng.uniform(1, 100))
        nearest = srt[max(math.ceil(q / 100 * len(srt)) - 1, 0)]
        x = float(rng.uniform(0, 3))
        frac = sum(v <= x for v in srt) / len(srt)
        worst = max(worst, abs(c.percentile(q) - nearest) / nearest, abs(c(x) - frac) / max(frac, 1e-300))
    ok = worst <= 1e-12
    record(9, ok, f"max relative deviation from brute force {worst:.1e} over 1000 instances")
    assert ok


# 10-14: reproduction experiments -----------------------------------------------------
#
# Training runs at reduced scale (one core): a full-scale dataset would take
# hours. The scales are chosen so the whole module finishes in well under an hour.

FIG6_DATA = DataConfig("mimo", i_max=3, itr=500)
COUNT_ITR = 100
TRAINER = TrainerConfig(epochs=100, beta_range=(42.0,), cg_maxiter=40)
SWEEP = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@pytest.fixture(scope="session")
def fig6_models():
    setup = Setup.load("fig6", "mimo")
    t0 = time.perf_counter()
    models, _, _ = train_models(setup, FIG6_DATA, TRAINER)
    return setup, models, time.perf_counter() - t0


@pytest.fixture(scope="session")
def counting():
    """Train both systems on the default room and run the counting walk."""
    out = {}
    for kind in ("mimo", "miso"):
        setup = Setup.load("default", kind)
        t0 = time.perf_counter()
        models, _, _ = train_models(setup, DataConfig(kind, i_max=3, itr=COUNT_ITR), TRAINER)
        res = counting_run(setup, ("ccm", "ann"), models, i_max=5, itr=5, snapshots=10, seed=1)
        out[kind] = res, time.perf_counter() - t0
    return out


@pytest.mark.slow
def test_c10_static_ordering(fig6_models, record):
    setup, models, t_train = fig6_models
    t0 = time.perf_counter()
    err = static_experiment(setup, models, n_snapshots=1500, seed=0).errors()
    dt = time.perf_counter() - t0
    order = err["ann"] < err["ccm"] < err["bsm"]
    bands = err["ann"] <= 15 and err["ccm"] <= 20 and err["bsm"] <= 30
    ok = order and bands and dt + t_train <= 900
    record(10, ok, f"error ANN {err['ann']:.1f}% CCM {err['ccm']:.1f}% BSM {err['bsm']:.1f}% "
                   f"(need ANN < CCM < BSM: {order}; bands 15/20/30: {bands}); "
                   f"{t_train:.0f} s training + {dt:.0f} s run")
    assert ok


@pytest.mark.slow
def test_c11_displacement_crossover(fig6_models, record):
    setup, models, _ = fig6_models
    sweep = {f: r.errors() for f, r in displacement_sweep(setup, models, SWEEP, n_snapshots=1500).items()}
    low = all(e["ann"] <= min(e["ccm"], e["bsm"]) for f, e in sweep.items() if f <= 0.4)
    cross = sweep[1.0]["ann"] > sweep[1.0]["ccm"]
    target = {"ann": 35.0, "ccm": 13.0, "bsm": 27.0}
    close = all(abs(sweep[1.0][m] - v) <= 15 for m, v in target.items())
    ok = low and cross and close
    curve = "; ".join(f"{f:.1f}: " + "/".join(f"{e[m]:.1f}" for m in ("ann", "ccm", "bsm"))
                      for f, e in sweep.items())
    record(11, ok, f"ANN/CCM/BSM % by displacement [{curve}] "
                   f"(ANN lowest to 0.4: {low}; ANN > CCM at 1.0: {cross}; within 15 pp of 35/13/27: {close})")
    assert ok


@pytest.mark.slow
def test_c12_counting_mape(counting, record):
    m = {(k, meth): counting[k][0].mape(meth) for k in counting for meth in ("ccm", "ann")}
    runtime = max(t for _, t in counting.values())
    order = all(m[k, "ann"] < m[k, "ccm"] for k in counting) and m["miso", "ann"] < m["mimo", "ann"]
    bound = max(m["mimo", "ann"], m["miso", "ann"]) <= 10
    ok = order and bound and runtime <= 1800
    record(12, ok, "MAPE " + ", ".join(f"{k.upper()}-{meth.upper()} {v:.1f}%" for (k, meth), v in m.items())
           + f" (orderings: {order}; ANN <= 10%: {bound}); slowest system {runtime:.0f} s")
    assert ok


@pytest.mark.slow
def test_c13_positioning_error(counting, record):
    stats = {}
    for k in counting:
        for meth in ("ccm", "ann"):
            res = counting[k][0]
            stats[k, meth] = float(np.nanmean(res.drmse_values(meth))), res.cdf(meth).percentile(95)
    a_mimo, a_miso = stats["mimo", "ann"], stats["miso", "ann"]
    order = a_miso[0] < a_mimo[0] and a_miso[1] < a_mimo[1]
    bound = a_mimo[1] <= 0.6 and a_miso[1] <= 0.35
    per_system = all(stats[k, "ann"][1] <= stats[k, "ccm"][1] for k in counting)
    ok = order and bound and per_system
    record(13, ok, "DRMSE mean/p95 " + ", ".join(f"{k.upper()}-{meth.upper()} {s[0]:.3f}/{s[1]:.3f} m"
                                                  for (k, meth), s in stats.items())
           + f" (MISO < MIMO: {order}; p95 bounds 0.6/0.35: {bound}; ANN <= CCM: {per_system})")
    assert ok


@pytest.mark.slow
def test_c14_training_mse(record):
    setup = Setup.load("default", "mimo")
    link = ("mimo", 0, 0)
    _, reports, _ = train_models(setup, DataConfig("mimo", i_max=3, itr=50), TRAINER, links=(link,))
    rep = reports[link]
    ok = rep.best_val_mse <= 1e-4
    record(14, ok, f"best validation MSE {rep.best_val_mse:.2e} on link {link[1:]} "
                   f"(need <= 1e-4), train MSE {rep.best_train_mse:.2e}, {rep.n_hidden} hidden units")
    assert ok
