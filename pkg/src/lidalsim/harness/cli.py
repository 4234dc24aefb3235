"""Command line: simulate, train, evaluate, sweep.

Every subcommand writes CSV (and gnuplot-ready .dat) files under --out and
is deterministic for a given --seed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from ..distinguishers.ann import TrainerConfig
from ..lidal import run_mimo_cycle, run_miso_cycle
from ..scene import build_scene
from .datagen import DataConfig
from .experiments import (
    METHODS, ExperimentConfig, ModelError, Setup, counting_run, displacement_sweep, load_models,
    make_distinguisher, run_experiment, static_experiment, train_models, write_sweep_csv,
)

log = logging.getLogger("lidalsim")


def _out(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_simulate(args):
    setup = Setup.load(args.scenario, args.system)
    scene = build_scene({**setup.config, "seed": args.seed,
                         "targets": args.targets if args.targets is not None else setup.config.get("targets", 0)})
    snaps = setup.system.scan_all(scene.targets, seed=[args.seed])
    out = _out(args.out)
    with open(out / "waveforms.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("kind", "rx", "tx", "channel", "sample", "time_s", "current_a"))
        for link, s in sorted(snaps.items()):
            for c, wf in enumerate(s.waveforms):
                for i, v in enumerate(wf.samples):
                    w.writerow((*link, c, i, repr(wf.start_time + i * wf.sample_period), repr(float(v))))
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("kind", "rx", "tx", "bits"))
        for link, s in sorted(snaps.items()):
            w.writerow((*link, "".join(str(int(b)) for b in s.labels)))
    with open(out / "targets.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("id", "x", "y", "reflectivity"))
        for t in scene.targets:
            w.writerow((t.id, repr(t.position[0]), repr(t.position[1]), repr(t.reflectivity)))
    cycle = run_mimo_cycle if args.system == "mimo" else run_miso_cycle
    rep = cycle(scene, make_distinguisher("perfect", setup.system), [args.seed], system=setup.system,
                snapshots=snaps)
    with open(out / "detections.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("x", "y"))
        for x, y in rep.positions:
            w.writerow((repr(x), repr(y)))
    return 0


def cmd_train(args):
    setup = Setup.load(args.scenario, args.system)
    data = DataConfig(args.system, i_max=args.i_max, itr=args.itr, snapshots=args.snapshots, seed=args.seed)
    trainer = TrainerConfig(epochs=args.epochs, seed=args.seed,
                            beta_range=tuple(args.beta) if args.beta else TrainerConfig().beta_range)
    models, reports, _ = train_models(setup, data, trainer,
                                      links=[tuple(l) for l in args.link] if args.link else None)
    out = _out(args.out)
    models.save(out / "models")
    with open(out / "training.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("kind", "rx", "tx", "beta", "hidden", "best_val_mse", "best_train_mse"))
        for link, rep in sorted(reports.items()):
            w.writerow((*link, repr(rep.best_beta), rep.n_hidden, repr(rep.best_val_mse),
                        repr(rep.best_train_mse)))
            rep.to_csv(out / f"curve_{'_'.join(map(str, link))}.csv")
    return 0


def cmd_evaluate(args):
    cfg = ExperimentConfig(args.scenario, args.system, args.method, args.i_max, args.itr,
                           args.snapshots, args.seed, args.models)
    res = run_experiment(cfg, args.out)
    print(f"MAPE {res.mape():.3f}%")
    return 0


def cmd_sweep(args):
    setup = Setup.load(args.scenario, args.system)
    out = _out(args.out)
    methods = [args.method] if args.method else list(METHODS)
    models = load_models(args.models) if "ann" in methods else None
    if args.kind == "static":
        res = static_experiment(setup, models, args.snapshots, args.seed, methods)
        res.write_csv(out / "static.csv")
        with open(out / "static_errors.dat", "w") as fh:
            fh.write("# method error_percent\n")
            for m, e in res.errors().items():
                fh.write(f"{m} {e!r}\n")
    elif args.kind == "furniture":
        sweep = displacement_sweep(setup, models, tuple(args.fractions), args.snapshots, args.seed, methods)
        write_sweep_csv(out / "furniture.csv", sweep)
    else:
        with open(out / "counting.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("i_max", "method", "mape_percent"))
            for i_max in range(1, args.i_max + 1):
                res = counting_run(setup, methods, models, i_max, args.itr, args.per_walk, args.seed)
                for m in methods:
                    w.writerow((i_max, m, repr(res.mape(m))))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="lidalsim", description="Indoor optical target detection simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, method=False):
        sp.add_argument("--scenario", default="default", help="scenario JSON path or bundled name")
        sp.add_argument("--system", choices=("mimo", "miso"), default="mimo")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="out")
        if method:
            sp.add_argument("--method", choices=(*METHODS, "perfect"))
            sp.add_argument("--models", help="directory of trained model files")

    s = sub.add_parser("simulate", help="one scan of every link")
    common(s)
    s.add_argument("--targets", type=int, help="number of random targets (default: scenario)")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="generate labelled data and train one network per link")
    common(t)
    t.add_argument("--i-max", type=int, default=3)
    t.add_argument("--itr", type=int, default=50)
    t.add_argument("--snapshots", type=int, default=10)
    t.add_argument("--epochs", type=int, default=500)
    t.add_argument("--beta", type=float, nargs="*")
    t.add_argument("--link", type=lambda v: ("mimo" if "mimo" in v else "miso", *map(int, v.split(":")[1:])),
                   action="append", help="restrict to kind:rx:tx (repeatable)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="counting and localization experiment")
    common(e, method=True)
    e.add_argument("--i-max", type=int, default=15)
    e.add_argument("--itr", type=int, default=250)
    e.add_argument("--snapshots", type=int, default=10)
    e.set_defaults(func=cmd_evaluate, method="ann")

    w = sub.add_parser("sweep", help="static, furniture-displacement or target-count sweeps")
    common(w, method=True)
    w.add_argument("--kind", choices=("static", "furniture", "count"), default="furniture")
    w.add_argument("--fractions", type=float, nargs="*", default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    w.add_argument("--snapshots", type=int, default=1500, help="static/furniture run length")
    w.add_argument("--per-walk", type=int, default=10, help="count sweep: snapshots per walk")
    w.add_argument("--i-max", type=int, default=5)
    w.add_argument("--itr", type=int, default=10)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ModelError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
