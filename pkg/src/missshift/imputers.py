"""Chained-equation imputers (ICE / MICE and their mask- and outcome-aware variants)."""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import container
from .diffcore import cho_factor
from .errors import ContractError

DEFAULT_ALPHA = 1e-6
SIGMA2_FLOOR = 1e-10


@dataclass
class RidgePosterior:
    mean: np.ndarray
    cov: np.ndarray
    sigma2: float
    alpha: float
    intercept: float = 0.0

    def predict(self, X):
        return X @ self.mean + self.intercept

    def predictive_var(self, X):
        return self.sigma2 + np.einsum("ij,jk,ik->i", X, self.cov, X)

    def sample(self, X, rng):
        return self.predict(X) + np.sqrt(self.predictive_var(X)) * rng.standard_normal(X.shape[0])


def fit_ridge_posterior(design, target, alpha=DEFAULT_ALPHA, fit_intercept=True):
    """Gaussian posterior of a linear model with prior precision ``alpha``.

    Two passes: a ridge point fit gives the residual variance, which then
    fixes the likelihood precision of the conjugate posterior.
    """
    X = np.asarray(design, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ContractError(f"degenerate design with shape {X.shape}")
    if X.shape[0] < 2:
        raise ContractError("need at least 2 rows to fit a conditional model")
    x_mean = X.mean(axis=0) if fit_intercept else np.zeros(X.shape[1])
    y_mean = float(y.mean()) if fit_intercept else 0.0
    Xc, yc = X - x_mean, y - y_mean
    gram, xty = Xc.T @ Xc, Xc.T @ yc
    eye = np.eye(X.shape[1])
    point = scipy.linalg.solve(gram + alpha * eye, xty, assume_a="sym")
    sigma2 = max(float(np.mean((yc - Xc @ point) ** 2)), SIGMA2_FLOOR)
    factor = cho_factor(alpha * eye + gram / sigma2)
    cov = scipy.linalg.cho_solve(factor, eye)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ xty / sigma2
    return RidgePosterior(mean, cov, sigma2, alpha, y_mean - float(x_mean @ mean))


@dataclass
class IceModel:
    d: int
    means: np.ndarray
    posteriors: dict = field(default_factory=dict)  # column -> RidgePosterior of the last sweep
    n_iter: int = 10
    use_mask: bool = False
    use_y: bool = False
    probabilistic: bool = False
    sequence: list = None  # one {column: RidgePosterior} per sweep, replayed by transform

    @property
    def sweeps(self):
        if self.sequence:
            return self.sequence
        return [self.posteriors] * (self.n_iter if self.posteriors else 0)

    @property
    def columns(self):
        return sorted(self.posteriors)

    @property
    def output_width(self):
        return 2 * self.d if self.use_mask else self.d


def _predictors(work, j, y):
    others = np.delete(work, j, axis=1)
    return others if y is None else np.column_stack([others, y])


def _fill_column(work, j, rows, post, y, rng, probabilistic):
    if not len(rows):
        return
    Z = _predictors(work[rows], j, None if y is None else y[rows])
    work[rows, j] = post.sample(Z, rng) if probabilistic else post.predict(Z)


def ice_fit(md, use_mask=False, use_y=False, probabilistic=False, n_iter=10, rng=None, alpha=DEFAULT_ALPHA):
    """Fit chained equations on a MaskedDataset.

    Missing cells start at the column means of observed entries. Each sweep
    refits, in column order, the conditional model of every incomplete column
    on the rows where it is observed and overwrites its missing cells with
    the conditional mean (or a posterior-predictive draw when
    ``probabilistic``).
    """
    if n_iter < 1:
        raise ContractError("n_iter must be at least 1")
    X, mask = md.Xtilde, md.mask
    n_obs = (~mask).sum(axis=0)
    if (n_obs < 2).any():
        raise ContractError(f"columns {np.flatnonzero(n_obs < 2).tolist()} have fewer than 2 observed values")
    rng = rng if rng is not None else np.random.default_rng(0)
    y = md.y if use_y else None
    means = np.nanmean(X, axis=0)
    work = np.where(mask, means, X)
    model = IceModel(X.shape[1], means, {}, n_iter, use_mask, use_y, probabilistic, [])
    incomplete = np.flatnonzero(mask.any(axis=0))
    for _ in range(n_iter if len(incomplete) else 0):
        sweep = {}
        for j in incomplete:
            obs = ~mask[:, j]
            Z = _predictors(work[obs], j, None if y is None else y[obs])
            post = fit_ridge_posterior(Z, work[obs, j], alpha)
            sweep[int(j)] = post
            _fill_column(work, j, np.flatnonzero(mask[:, j]), post, y, rng, probabilistic)
        model.sequence.append(sweep)
    model.posteriors = dict(model.sequence[-1]) if model.sequence else {}
    return model


def ice_transform(model, xtilde, rng=None, n_imp=1, y=None):
    """Complete ``xtilde`` (array with NaN, or a MaskedDataset) ``n_imp`` times.

    Starting from the training means, the conditional models of every sweep
    are replayed in fitting order. Columns that had no missing values during
    fitting are mean-filled.
    """
    if hasattr(xtilde, "Xtilde"):
        xtilde = xtilde.Xtilde
    X = np.atleast_2d(np.asarray(xtilde, dtype=np.float64))
    if X.shape[1] != model.d:
        raise ContractError(f"expected {model.d} columns, got {X.shape[1]}")
    if model.use_y and y is None:
        raise ContractError("this imputer conditions on the outcome; pass y (training data only)")
    if not model.probabilistic and n_imp != 1:
        raise ContractError("deterministic imputation produces exactly one completion")
    y = y if model.use_y else None
    rng = rng if rng is not None else np.random.default_rng(0)
    mask = np.isnan(X)
    missing_rows = {j: np.flatnonzero(mask[:, j]) for j in model.columns}
    active = [j for j in model.columns if len(missing_rows[j])]
    out = []
    for _ in range(n_imp):
        work = np.where(mask, model.means, X)
        for sweep in model.sweeps if active else []:
            for j in active:
                _fill_column(work, j, missing_rows[j], sweep[j], y, rng, model.probabilistic)
        if model.use_mask:
            work = np.column_stack([work, mask.astype(np.float64)])
        out.append(work)
    return out


def fit_complete_imputer(X, n_iter=10, probabilistic=False, alpha=DEFAULT_ALPHA):
    """Chained-equation imputer whose conditionals are fitted on complete data, one per column."""
    X = np.asarray(X, dtype=np.float64)
    model = IceModel(X.shape[1], X.mean(axis=0), {}, n_iter, False, False, probabilistic)
    for j in range(X.shape[1]):
        model.posteriors[j] = fit_ridge_posterior(np.delete(X, j, axis=1), X[:, j], alpha)
    return model


@dataclass
class YConditionalPipeline:
    designs: list  # completed source designs, each aligned with the source outcome
    imputer: IceModel  # outcome-free, for target-environment transforms
    first_stage: IceModel


def y_conditional_pipeline(md, rng, probabilistic=True, n_imp=5, n_iter=10, alpha=DEFAULT_ALPHA):
    """Two-stage strategy: impute with the outcome, then learn an outcome-free imputer.

    Stage 1 fits chained equations that include the outcome as a predictor;
    stage 2 draws completed designs from it; stage 3 fits a fresh imputer
    without the outcome on the stacked completed designs.
    """
    if not md.mask.any():
        X = md.Xtilde.copy()
        first = IceModel(md.d, X.mean(axis=0), {}, n_iter, False, True, probabilistic)
        return YConditionalPipeline([X], IceModel(md.d, X.mean(axis=0), {}, n_iter, False, False, probabilistic), first)
    first = ice_fit(md, use_y=True, probabilistic=probabilistic, n_iter=n_iter, rng=rng, alpha=alpha)
    k = n_imp if probabilistic else 1
    designs = ice_transform(first, md.Xtilde, rng, n_imp=k, y=md.y)
    second = fit_complete_imputer(np.vstack(designs), n_iter, probabilistic, alpha)
    return YConditionalPipeline(designs, second, first)


def imputer_arrays(model, prefix="imp."):
    """Flatten an IceModel into named arrays plus attrs for the binary container."""
    arrays = {f"{prefix}means": model.means}
    sweeps = model.sweeps
    for t, sweep in enumerate(sweeps):
        for j, post in sweep.items():
            arrays[f"{prefix}{t}.{j}.mean"] = post.mean
            arrays[f"{prefix}{t}.{j}.cov"] = post.cov
            arrays[f"{prefix}{t}.{j}.scalars"] = np.array([post.sigma2, post.alpha, post.intercept])
    attrs = {
        "d": model.d, "n_iter": model.n_iter, "use_mask": model.use_mask, "use_y": model.use_y,
        "probabilistic": model.probabilistic, "columns": model.columns, "n_sweeps": len(sweeps),
    }
    return arrays, attrs


def imputer_from_arrays(arrays, attrs, prefix="imp."):
    sequence = []
    for t in range(attrs["n_sweeps"]):
        sweep = {}
        for j in attrs["columns"]:
            key = f"{prefix}{t}.{j}"
            sigma2, alpha, intercept = arrays[f"{key}.scalars"]
            sweep[int(j)] = RidgePosterior(arrays[f"{key}.mean"], arrays[f"{key}.cov"], sigma2, alpha, intercept)
        sequence.append(sweep)
    return IceModel(attrs["d"], arrays[f"{prefix}means"], dict(sequence[-1]) if sequence else {}, attrs["n_iter"],
                    attrs["use_mask"], attrs["use_y"], attrs["probabilistic"], sequence)


def save_imputer(model, path):
    arrays, attrs = imputer_arrays(model)
    container.save_arrays(path, arrays, {"kind": "imputer", "imputer": attrs})


def load_imputer(path):
    arrays, attrs = container.load_arrays(path)
    return imputer_from_arrays(arrays, attrs["imputer"])
