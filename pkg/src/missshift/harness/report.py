"""Aggregate a results CSV into a summary table and per-scenario delta charts."""

import logging
import re
from pathlib import Path

import numpy as np
import pandas as pd

from ..errors import ContractError
from .experiment import CSV_HEADER
from .plotting import delta_chart

log = logging.getLogger(__name__)

KEY = ["scenario", "environment", "rep"]
SUMMARY_COLUMNS = [
    "scenario", "estimator", "environment", "n", "n_failed",
    "mse_mean", "mse_std", "delta_mean", "delta_std", "baseline",
]
BASELINE_ALIASES = {"complete-data": "complete", "complete_data": "complete"}


class ReportError(ContractError):
    pass


def read_results(path):
    frame = pd.read_csv(path, dtype={"scenario": str, "estimator": str, "environment": str, "status": str})
    missing = [c for c in CSV_HEADER if c not in frame.columns]
    if missing:
        raise ReportError(f"{path}: missing columns {missing}")
    frame["status"] = frame["status"].fillna("ok")
    return frame


def baseline_table(frame, baseline):
    """Baseline MSE per (scenario, environment, rep).

    ``bayes`` falls back to the ``bayes_mse`` column when no ``bayes`` rows
    were run.
    """
    ok = frame[(frame["status"] == "ok") & frame["mse"].notna()]
    rows = ok[ok["estimator"] == baseline]
    if len(rows):
        base = rows[KEY + ["mse"]]
    elif baseline == "bayes":
        base = ok[KEY + ["bayes_mse"]].dropna().drop_duplicates(KEY).rename(columns={"bayes_mse": "mse"})
    else:
        base = rows[KEY + ["mse"]]
    if base.duplicated(KEY).any():
        raise ReportError(f"baseline {baseline!r} has duplicate records for some (scenario, environment, rep)")
    return base.rename(columns={"mse": "baseline_mse"})


def with_deltas(frame, baseline):
    """Successful records joined to the baseline; raises naming every unpaired cell."""
    ok = frame[(frame["status"] == "ok") & frame["mse"].notna()].copy()
    base = baseline_table(frame, baseline)
    merged = ok.merge(base, on=KEY, how="left")
    gaps = merged.loc[merged["baseline_mse"].isna(), KEY].drop_duplicates()
    if len(gaps):
        listed = "; ".join(f"{s} {e} rep {r}" for s, e, r in gaps.itertuples(index=False))
        raise ReportError(f"no {baseline!r} baseline record for: {listed}")
    merged["delta"] = merged["mse"] - merged["baseline_mse"]
    return merged


def summarize(frame, baseline):
    merged = with_deltas(frame, baseline)
    failed = frame[frame["status"] != "ok"].groupby(["scenario", "estimator", "environment"]).size()
    out = []
    for (scen, est, env), g in merged.groupby(["scenario", "estimator", "environment"], sort=False):
        ddof = 1 if len(g) > 1 else 0
        out.append({
            "scenario": scen, "estimator": est, "environment": env,
            "n": len(g), "n_failed": int(failed.get((scen, est, env), 0)),
            "mse_mean": g["mse"].mean(), "mse_std": g["mse"].std(ddof=ddof),
            "delta_mean": g["delta"].mean(), "delta_std": g["delta"].std(ddof=ddof),
            "baseline": baseline,
        })
    # estimators that only failed still get a row
    seen = {(r["scenario"], r["estimator"], r["environment"]) for r in out}
    for (scen, est, env), k in failed.items():
        if (scen, est, env) not in seen:
            out.append({"scenario": scen, "estimator": est, "environment": env, "n": 0, "n_failed": int(k),
                        "mse_mean": np.nan, "mse_std": np.nan, "delta_mean": np.nan, "delta_std": np.nan,
                        "baseline": baseline})
    return pd.DataFrame(out, columns=SUMMARY_COLUMNS), merged


def _slug(text):
    return re.sub(r"[^A-Za-z0-9._-]+", "_", text).strip("_")


def report(results, baseline="bayes", out_dir=None):
    """Write ``summary.csv`` and one SVG chart per scenario; return (summary, figure paths)."""
    baseline = BASELINE_ALIASES.get(baseline, baseline)
    frame = read_results(results) if isinstance(results, (str, Path)) else results
    if frame.empty:
        raise ReportError("no result records to report")
    out = Path(out_dir or Path(results).parent)
    out.mkdir(parents=True, exist_ok=True)
    summary, merged = summarize(frame, baseline)
    summary.to_csv(out / "summary.csv", index=False)
    figures = []
    for scen, g in merged.groupby("scenario", sort=False):
        ref = g.loc[g["estimator"] == "mean", "delta"]
        path = out / f"deltas_{_slug(scen)}.svg"
        delta_chart(g, scen, path, baseline, reference=ref.mean() if len(ref) else None)
        figures.append(path)
    log.info("wrote %s and %d figures", out / "summary.csv", len(figures))
    return summary, figures
