"""Synthetic Gaussian covariates, the wave outcome, and tabular ingestion."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import ndtr

from . import container
from .diffcore import cholesky
from .errors import ContractError, FormatError, IngestionError

log = logging.getLogger(__name__)

WAVE_GAMMA = 20.0 * math.sqrt(math.pi / 8.0)
WAVE_S = ((2.0, -0.8), (-4.0, -1.0), (2.0, -1.2))
SNR = 10.0
NOISE_MC_SAMPLES = 100_000


@dataclass
class GaussianParams:
    """Mean and covariance of the covariates; ``Sigma`` already includes the diagonal jitter."""

    d: int
    mu: np.ndarray
    Sigma: np.ndarray
    B: np.ndarray
    lam: float
    _chol: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def chol(self):
        if self._chol is None:
            self._chol = cholesky(self.Sigma)
        return self._chol


@dataclass
class OutcomeParams:
    beta: np.ndarray
    beta0: float
    gamma: float = WAVE_GAMMA
    S: tuple = WAVE_S
    sigma_eps: float = 0.0


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    gparams: GaussianParams = None
    oparams: OutcomeParams = None
    seed: object = None
    columns: list = None
    kinds: list = None

    def __post_init__(self):
        if self.X.ndim != 2 or len(self.y) != self.X.shape[0]:
            raise ContractError(f"Dataset: X {self.X.shape} and y {self.y.shape} disagree")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def subset(self, rows):
        return Dataset(self.X[rows], self.y[rows], self.gparams, self.oparams, self.seed, self.columns, self.kinds)


def make_gaussian_params(d, lam, rng):
    if d < 1 or not 0.0 < lam <= 1.0:
        raise ContractError(f"need d >= 1 and 0 < lambda <= 1, got d={d}, lambda={lam}")
    k = math.ceil(lam * d)
    mu = rng.standard_normal(d)
    B = rng.standard_normal((d, k))
    S = B @ B.T
    S = 0.5 * (S + S.T)
    # BB^T is rank ceil(lambda*d); jitter keeps Cholesky and conditionals defined
    Sigma = S + (1e-6 * np.trace(S) / d) * np.eye(d)
    return GaussianParams(d, mu, Sigma, B, lam)


def sample_covariates(gp, n, rng):
    z = rng.standard_normal((n, gp.d))
    return gp.mu + z @ gp.chol.T


def rescaled_beta(cov):
    """Vector of ones scaled so that ``beta' cov beta == 1``."""
    d = cov.shape[0]
    ones = np.ones(d)
    q = float(ones @ cov @ ones)
    if q <= 0:
        return None
    return ones / math.sqrt(q)


def make_outcome_params(mean, cov, S=WAVE_S, gamma=WAVE_GAMMA):
    """Wave-outcome parameters for covariates with the given mean and covariance.

    The intercept centres the linear index ``X beta + beta0`` at 1, which is
    where the waves sit.
    """
    beta = rescaled_beta(cov)
    if beta is None:
        raise ContractError("covariance has zero variance along the ones direction")
    return OutcomeParams(beta=beta, beta0=float(1.0 - mean @ beta), gamma=gamma, S=tuple(S))


def wave_h(X, op):
    """Noiseless outcome function."""
    z = X @ op.beta + op.beta0
    out = z - 1.0
    for a, b in op.S:
        out = out + a * ndtr(op.gamma * (z + b))
    return out


def wave_outcome(X, op, rng):
    h = wave_h(X, op)
    return h + op.sigma_eps * rng.standard_normal(len(h))


def _noise_from_variance(var_h):
    if not var_h > 0:
        raise ContractError("outcome function is constant; signal-to-noise ratio undefined")
    return math.sqrt(var_h / SNR)


def calibrate_noise(gp, op, rng, n_mc=NOISE_MC_SAMPLES):
    """Noise std giving var(h(X)) / sigma^2 = 10, from a fresh Monte-Carlo draw."""
    X = sample_covariates(gp, n_mc, rng)
    return _noise_from_variance(float(np.var(wave_h(X, op))))


def simulate(d, lam, n, seed, gp=None, op=None):
    """Simulated dataset. The generating model is drawn from ``seed`` unless given."""
    ss = np.random.SeedSequence(seed)
    model_ss, noise_ss, data_ss = ss.spawn(3)
    if gp is None:
        gp = make_gaussian_params(d, lam, np.random.default_rng(model_ss))
    if op is None:
        op = make_outcome_params(gp.mu, gp.Sigma)
        op.sigma_eps = calibrate_noise(gp, op, np.random.default_rng(noise_ss))
    rng = np.random.default_rng(data_ss)
    X = sample_covariates(gp, n, rng)
    y = wave_outcome(X, op, rng)
    return Dataset(X, y, gp, op, seed=seed)


def make_generating_model(d, lam, seed):
    """``(GaussianParams, OutcomeParams)`` with calibrated noise, deterministic in ``seed``."""
    ds = simulate(d, lam, 0, seed)
    return ds.gparams, ds.oparams


_NA_TOKENS = {"", "NA"}


def ingest_table(path, schema, rng):
    """Load a comma-delimited table into a complete-case Dataset with a wave outcome.

    ``schema`` maps column name to ``"continuous"`` or ``"binary"``; only those
    columns are kept, in schema order. Rows with any empty, ``NA`` or
    unparseable cell are dropped.
    """
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    unknown = [c for c in schema if c not in raw.columns]
    if unknown:
        raise IngestionError(f"{path}: columns not in table: {unknown}")
    bad_kind = {c: k for c, k in schema.items() if k not in ("continuous", "binary")}
    if bad_kind:
        raise IngestionError(f"unknown column kinds {bad_kind}")

    columns = list(schema)
    values = np.full((len(raw), len(columns)), np.nan)
    for j, col in enumerate(columns):
        cells = raw[col].str.strip()
        missing = cells.isin(_NA_TOKENS)
        parsed = pd.to_numeric(cells.where(~missing), errors="coerce").to_numpy(dtype=float)
        if schema[col] == "binary":
            ok = np.isnan(parsed) | (parsed == 0) | (parsed == 1)
            if not ok.all():
                row = int(np.flatnonzero(~ok)[0])
                raise IngestionError(
                    f"{path}: binary column {col!r} has value {raw[col].iloc[row]!r} at data row {row + 1}"
                )
        values[:, j] = parsed

    complete = ~np.isnan(values).any(axis=1)
    dropped = int((~complete).sum())
    if not complete.any():
        raise IngestionError(f"{path}: no complete rows among {len(raw)}")
    if dropped:
        log.info("dropped %d of %d rows with missing cells (%.2f%%)", dropped, len(raw), 100 * dropped / len(raw))
    X = values[complete]

    kinds = [schema[c] for c in columns]
    for j, kind in enumerate(kinds):
        if kind == "continuous":
            sd = X[:, j].std()
            X[:, j] = (X[:, j] - X[:, j].mean()) / (sd if sd > 0 else 1.0)

    mean = X.mean(axis=0)
    cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=0))
    beta = rescaled_beta(cov)
    if beta is None:
        log.warning("degenerate empirical covariance; using unscaled beta")
        beta = np.ones(X.shape[1]) / math.sqrt(X.shape[1])
    op = OutcomeParams(beta=beta, beta0=float(1.0 - mean @ beta))
    var_h = float(np.var(wave_h(X, op)))
    op.sigma_eps = _noise_from_variance(var_h) if var_h > 0 else math.sqrt(1.0 / SNR)
    y = wave_outcome(X, op, rng)
    return Dataset(X, y, None, op, columns=columns, kinds=kinds)


def dataset_arrays(ds):
    """Named arrays and attrs describing a Dataset (see :mod:`missshift.container`)."""
    arrays = {"X": ds.X, "y": ds.y, "beta": ds.oparams.beta}
    attrs = {
        "kind": "dataset",
        "beta0": ds.oparams.beta0,
        "gamma": ds.oparams.gamma,
        "S": [list(p) for p in ds.oparams.S],
        "sigma_eps": ds.oparams.sigma_eps,
        "columns": ds.columns,
        "kinds": ds.kinds,
        "seed": ds.seed if isinstance(ds.seed, (int, type(None))) else str(ds.seed),
    }
    if ds.gparams is not None:
        arrays.update(mu=ds.gparams.mu, Sigma=ds.gparams.Sigma, B=ds.gparams.B)
        attrs["lam"] = ds.gparams.lam
    return arrays, attrs


def dataset_from_arrays(arrays, attrs):
    op = OutcomeParams(
        beta=arrays["beta"],
        beta0=attrs["beta0"],
        gamma=attrs["gamma"],
        S=tuple(tuple(p) for p in attrs["S"]),
        sigma_eps=attrs["sigma_eps"],
    )
    gp = None
    if "Sigma" in arrays:
        gp = GaussianParams(len(arrays["mu"]), arrays["mu"], arrays["Sigma"], arrays["B"], attrs["lam"])
    return Dataset(arrays["X"], arrays["y"], gp, op, attrs.get("seed"), attrs.get("columns"), attrs.get("kinds"))


def save_dataset(ds, path):
    arrays, attrs = dataset_arrays(ds)
    container.save_arrays(path, arrays, attrs)
    container.write_sidecar(
        path,
        {
            "seed": attrs["seed"],
            "lambda": attrs.get("lam"),
            "S": attrs["S"],
            "sigma_eps": float(ds.oparams.sigma_eps),
            "n": int(ds.n),
            "d": int(ds.d),
        },
    )


def load_dataset(path):
    arrays, attrs = container.load_arrays(path)
    if attrs.get("kind") not in ("dataset", "masked"):
        raise FormatError(f"{path} does not hold a dataset")
    return dataset_from_arrays(arrays, attrs)
