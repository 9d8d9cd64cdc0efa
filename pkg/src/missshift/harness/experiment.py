"""Scenario construction and the experiment runner.

Every random stream is derived from the master seed through
``SeedSequence(master, spawn_key=...)`` with fixed keys, so a config replays
byte-for-byte regardless of job order or worker count.
"""

import csv
import logging
import threading
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import datagen, estimators
from ..errors import MissShiftError, UnavailableError
from ..missingness import apply_mechanism
from ..neural import GRID_SPACE, grid_search
from .config import ExperimentConfig, dump_config

log = logging.getLogger(__name__)

CSV_HEADER = ["scenario", "estimator", "environment", "rep", "mse", "bayes_mse", "delta", "seed", "wall_ms", "status"]
ENVIRONMENTS = ("source", "target-shifted", "target-noshift", "complete")

# spawn-key stream tags
_DATA, _SOURCE, _TARGET, _FIT, _INGEST = 1, 2, 3, 4, 5


def derive_seed(master, *keys):
    return int(np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in keys)).generate_state(1)[0])


def derive_rng(master, *keys):
    return np.random.default_rng(derive_seed(master, *keys))


@dataclass
class Split:
    train: object
    val: object
    test: object


@dataclass
class Scenario:
    rep: int
    dataset: object
    source: Split
    targets: dict  # target rate -> Split


@dataclass
class ResultRecord:
    scenario: str
    estimator: str
    environment: str
    rep: int
    mse: float = None
    bayes_mse: float = None
    delta: float = None
    seed: int = None
    wall_ms: float = None
    status: str = "ok"

    def row(self):
        def fmt(v):
            return "" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)

        return [fmt(getattr(self, k)) for k in CSV_HEADER]


class ResultStore:
    """Append-only CSV; appends are serialized and flushed per batch."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(CSV_HEADER)

    def append(self, records):
        with self._lock, open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            for r in records:
                w.writerow(r.row())
            fh.flush()


def _complete_dataset(cfg, rep):
    n = sum(int(cfg.sizes[k]) for k in ("train", "val", "test"))
    spec = cfg.dataset
    if spec["kind"] == "simulated":
        gp, op = datagen.make_generating_model(int(spec["d"]), float(spec["lambda"]), int(spec.get("seed", 0)))
        return datagen.simulate(gp.d, gp.lam, n, derive_seed(cfg.seed, rep, _DATA), gp, op)
    base = datagen.ingest_table(spec["path"], spec["schema"], derive_rng(cfg.seed, rep, _INGEST))
    if base.n < n:
        raise MissShiftError(f"table has {base.n} complete rows, config needs {n}")
    rows = derive_rng(cfg.seed, rep, _DATA).permutation(base.n)[:n]
    return base.subset(rows)


def _split(md, sizes):
    a, b = int(sizes["train"]), int(sizes["train"]) + int(sizes["val"])
    idx = np.arange(md.n)
    return Split(md.subset(idx[:a]), md.subset(idx[a:b]), md.subset(idx[b:]))


def build_scenario(cfg, rep):
    """One complete dataset per repetition, masked once at the source rate and,
    independently with freshly drawn mechanism parameters, at each target rate."""
    ds = _complete_dataset(cfg, rep)
    mech = cfg.mechanism
    kw = {"k": float(mech.get("k", 2.0)), "strength": float(mech.get("strength", 1.0))}
    source = apply_mechanism(mech["kind"], ds, cfg.source_rate, derive_rng(cfg.seed, rep, _SOURCE), **kw)
    targets = {}
    for i, rate in enumerate(cfg.target_rates):
        md = apply_mechanism(mech["kind"], ds, rate, derive_rng(cfg.seed, rep, _TARGET, i), **kw)
        targets[rate] = _split(md, cfg.sizes)
    return Scenario(rep, ds, _split(source, cfg.sizes), targets)


def _mse(model, md):
    return float(np.mean((model.predict(md) - md.y) ** 2))


def _bayes_mse(md):
    """MSE of the Bayes predictor of the environment that generated ``md``, if analytic."""
    if not estimators.analytic_available(md):
        return None
    src = md.source
    model = estimators.AnalyticModel("bayes", src.gparams, src.oparams, md.spec)
    return _mse(model, md)


def _fit(cfg, name, split, seed):
    """Fit one estimator, running the grid search first when configured."""
    tc, arch = cfg.train_config(), cfg.arch()
    if cfg.grid and name not in estimators.ANALYTIC + estimators.REFERENCE:
        grid = dict(cfg.grid)
        reps = int(grid.pop("reps", 1))
        space = {k: grid.get(k, GRID_SPACE[k]) for k in GRID_SPACE}
        rng = np.random.default_rng(seed)

        def score(point, rng):
            t = type(tc)(**{**tc.__dict__, "lr": point["lr"], "weight_decay": point["weight_decay"]})
            a = type(arch)(**{**arch.__dict__, "width": point["width"], "depth": point["depth"]})
            m = estimators.fit_estimator(name, split.train, split.val, t, a, rng, cfg.n_imp)
            return _mse(m, split.val)

        best = grid_search(space, score, reps, rng)
        tc = type(tc)(**{**tc.__dict__, "lr": best["lr"], "weight_decay": best["weight_decay"]})
        arch = type(arch)(**{**arch.__dict__, "width": best["width"], "depth": best["depth"]})
    return estimators.fit_estimator(name, split.train, split.val, tc, arch, np.random.default_rng(seed), cfg.n_imp)


def run_job(cfg, rep, name, scenario=None):
    """All records of one (repetition, estimator) cell."""
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    scenario = scenario or build_scenario(cfg, rep)
    est_index = estimators.ESTIMATORS.index(name)
    records = []

    def attempt(split, seed):
        t0 = time.perf_counter()
        try:
            return _fit(cfg, name, split, seed), None, t0
        except UnavailableError as exc:
            return None, f"unavailable: {exc}", t0
        except MissShiftError as exc:
            log.warning("%s rep %d failed: %s", name, rep, exc)
            return None, f"error: {type(exc).__name__}: {exc}", t0

    src_seed = derive_seed(cfg.seed, rep, _FIT, est_index, 0)
    src_model, src_err, t_src = attempt(scenario.source, src_seed)
    fit_ms = 1000 * (time.perf_counter() - t_src)

    for i, rate in enumerate(cfg.target_rates):
        sid = cfg.scenario_id(rate)
        target = scenario.targets[rate]
        tgt_seed = derive_seed(cfg.seed, rep, _FIT, est_index, 1 + i)
        tgt_model, tgt_err, t_tgt = attempt(target, tgt_seed)
        tgt_ms = 1000 * (time.perf_counter() - t_tgt)
        shifted_env = "complete" if rate == 0 else "target-shifted"
        for env, model, err, test, seed, ms in (
            ("source", src_model, src_err, scenario.source.test, src_seed, fit_ms),
            (shifted_env, src_model, src_err, target.test, src_seed, fit_ms),
            ("target-noshift", tgt_model, tgt_err, target.test, tgt_seed, tgt_ms),
        ):
            rec = ResultRecord(sid, name, env, rep, seed=seed)
            if err is not None:
                rec.status = err.replace("\n", " ")
            else:
                t0 = time.perf_counter()
                rec.mse = _mse(model, test)
                rec.wall_ms = round(ms + 1000 * (time.perf_counter() - t0), 1)
                rec.bayes_mse = _bayes_mse(test)
                if rec.bayes_mse is not None:
                    rec.delta = rec.mse - rec.bayes_mse
            records.append(rec)
    return records


def run_experiment(cfg, output=None, workers=None, results_name="results.csv"):
    """Run every (repetition, estimator) job and append the records to ``<output>/results.csv``."""
    out = Path(output or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    store = ResultStore(out / results_name)
    workers = int(workers or cfg.workers or 1)
    jobs = [(rep, name) for rep in range(cfg.repetitions) for name in cfg.estimators]
    all_records = []
    if workers <= 1 or len(jobs) <= 1:
        cache = {}
        for rep, name in jobs:
            if rep not in cache:
                cache.clear()
                cache[rep] = build_scenario(cfg, rep)
            recs = run_job(cfg, rep, name, cache[rep])
            store.append(recs)
            all_records.extend(recs)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_job, cfg.to_dict(), rep, name) for rep, name in jobs]
            for fut in as_completed(futures):
                recs = fut.result()
                store.append(recs)
                all_records.extend(recs)
    key = {(r, n): i for i, (r, n) in enumerate(jobs)}
    all_records.sort(key=lambda r: key[(r.rep, r.estimator)])
    return all_records
