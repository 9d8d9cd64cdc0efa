"""Command-line entry point: ``missshift <subcommand> ...``."""

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .. import datagen, estimators
from ..errors import MissShiftError
from ..missingness import KINDS, apply_mechanism, load_masked, save_masked
from ..neural import ArchSpec, TrainConfig
from .config import ExperimentConfig, apply_env_overrides, dump_config, load_config
from .experiment import run_experiment
from .report import report

log = logging.getLogger("missshift")


def _cmd_simulate(args):
    if args.table:
        schema = dict(item.split("=", 1) for item in args.schema)
        ds = datagen.ingest_table(args.table, schema, np.random.default_rng(args.seed))
    else:
        ds = datagen.simulate(args.d, args.lam, args.n, args.seed)
    datagen.save_dataset(ds, args.out)
    print(f"wrote {args.out}: n={ds.n} d={ds.d} sigma_eps={ds.oparams.sigma_eps:.6g}")


def _cmd_mask(args):
    ds = datagen.load_dataset(args.data)
    md = apply_mechanism(args.kind, ds, args.p, np.random.default_rng(args.seed), k=args.k, strength=args.strength)
    save_masked(md, args.out)
    print(f"wrote {args.out}: {args.kind} target rate {args.p:g}, realized {md.mask.mean():.4f}")


def _cmd_train(args):
    md = load_masked(args.data)
    rng = np.random.default_rng(args.seed)
    n_val = max(1, int(round(args.val_fraction * md.n)))
    rows = rng.permutation(md.n)
    train, val = md.subset(np.sort(rows[n_val:])), md.subset(np.sort(rows[:n_val]))
    cfg = TrainConfig(lr=args.lr, weight_decay=args.weight_decay, max_epochs=args.max_epochs, seed=args.seed)
    arch = ArchSpec(width=args.width, depth=args.depth, n_blocks=args.n_blocks)
    model = estimators.fit_estimator(args.estimator, train, val, cfg, arch, rng, args.n_imp)
    estimators.save_model(model, args.out)
    print(f"wrote {args.out}: {args.estimator} digest {estimators.weights_digest(model)[:16]}")


def _cmd_evaluate(args):
    model = estimators.load_model(args.model)
    md = load_masked(args.data)
    mse = float(np.mean((model.predict(md) - md.y) ** 2))
    bayes = None
    if estimators.analytic_available(md):
        ref = estimators.AnalyticModel("bayes", md.source.gparams, md.source.oparams, md.spec)
        bayes = float(np.mean((ref.predict(md) - md.y) ** 2))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["estimator", "n", "mse", "bayes_mse", "delta"])
    w.writerow([model.name, md.n, repr(mse), "" if bayes is None else repr(bayes),
                "" if bayes is None else repr(mse - bayes)])


def _cmd_run(args):
    cfg = load_config(args.config)
    if args.output:
        cfg.output = args.output
    records = run_experiment(cfg, workers=args.workers)
    out = Path(cfg.output)
    bad = sum(r.status != "ok" for r in records)
    print(f"{len(records)} records ({bad} not ok) in {out / 'results.csv'}")
    if args.report and records:
        summary, figs = report(out / "results.csv", args.baseline, out)
        print(f"summary in {out / 'summary.csv'}, {len(figs)} figure(s)")


def _cmd_report(args):
    out = args.out or Path(args.results).parent
    summary, figs = report(args.results, args.baseline, out)
    print(summary.to_csv(index=False, float_format="%.6g"), end="")
    for f in figs:
        print(f"figure: {f}", file=sys.stderr)


def _cmd_init(args):
    cfg = apply_env_overrides(ExperimentConfig())
    dump_config(cfg, args.out)
    print(f"wrote {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="missshift", description="Missingness-shift benchmark harness.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate (or ingest) a complete dataset")
    s.add_argument("--d", type=int, default=10)
    s.add_argument("--lam", type=float, default=0.7, help="covariance rank fraction")
    s.add_argument("--n", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--table", help="ingest this CSV instead of simulating")
    s.add_argument("--schema", nargs="*", default=[], metavar="COL=KIND", help="continuous|binary per column")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_simulate)

    m = sub.add_parser("mask", help="apply a missingness mechanism")
    m.add_argument("--data", required=True)
    m.add_argument("--kind", choices=KINDS, required=True)
    m.add_argument("--p", type=float, required=True, help="target missing rate")
    m.add_argument("--k", type=float, default=2.0, help="self-masking offset")
    m.add_argument("--strength", type=float, default=1.0, help="MAR-Y slope multiplier")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=_cmd_mask)

    t = sub.add_parser("train", help="fit one estimator on a masked dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--estimator", choices=estimators.ESTIMATORS, required=True)
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=1e-5)
    t.add_argument("--max-epochs", type=int, default=1000)
    t.add_argument("--width", type=int, default=50)
    t.add_argument("--depth", type=int, default=2)
    t.add_argument("--n-blocks", type=int, default=20)
    t.add_argument("--n-imp", type=int, default=estimators.N_IMP)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("evaluate", help="test MSE of a saved model on a masked dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=_cmd_evaluate)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--workers", type=int)
    r.add_argument("--output")
    r.add_argument("--report", action="store_true", help="render summary and figures afterwards")
    r.add_argument("--baseline", default="bayes")
    r.set_defaults(func=_cmd_run)

    g = sub.add_parser("report", help="summarize a results CSV")
    g.add_argument("results")
    g.add_argument("--baseline", default="bayes", help="bayes, complete, or any estimator name")
    g.add_argument("--out", help="output directory (default: next to the CSV)")
    g.set_defaults(func=_cmd_report)

    i = sub.add_parser("init", help="write a default config file")
    i.add_argument("out")
    i.set_defaults(func=_cmd_init)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except MissShiftError as exc:
        print(f"missshift: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
