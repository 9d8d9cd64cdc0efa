"""Missingness mechanisms: MCAR, non-monotone logistic MAR, Gaussian self-masking, MAR-Y.

Each mechanism is split into two steps. ``draw_mechanism`` draws and
calibrates the mechanism parameters against a dataset and returns a
:class:`MechanismSpec`; ``mask_with_spec`` applies a spec to a dataset. The
``apply_*`` helpers do both. A spec round-trips through ``to_dict`` /
``from_dict`` so an environment can be re-instantiated exactly.
"""

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import container
from .datagen import dataset_arrays, dataset_from_arrays
from .diffcore import stable_sigmoid
from .errors import CalibrationError, ContractError, FormatError

KINDS = ("mcar", "mar", "selfmask", "mar_y")
IGNORABLE = ("mcar", "mar")
MCAR_FRACTION = 0.3
S_RANGE = (0.1, 0.5)
BRACKET = (-30.0, 30.0)
CALIBRATION_TOL = 1e-3


@dataclass
class MechanismSpec:
    kind: str
    p: float
    # mar: J = mcar_cols, L = logistic_cols; slopes is |J| x |L|
    mcar_cols: np.ndarray = None
    logistic_cols: np.ndarray = None
    delta: np.ndarray = None
    s: np.ndarray = None
    v: np.ndarray = None
    slopes: np.ndarray = None
    intercepts: np.ndarray = None
    center: np.ndarray = None
    scale: np.ndarray = None
    # selfmask, one entry per column
    K: np.ndarray = None
    mu_tilde: np.ndarray = None
    sigma_tilde: np.ndarray = None
    k: float = None
    # mar_y
    strength: float = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown mechanism {self.kind!r}; expected one of {KINDS}")

    @property
    def ignorable(self):
        return self.kind in IGNORABLE

    def to_dict(self):
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if val is None:
                continue
            if isinstance(val, np.ndarray):
                val = val.tolist()
            elif isinstance(val, (np.floating, np.integer)):
                val = val.item()
            out[f.name] = val
        return out

    @classmethod
    def from_dict(cls, data):
        kw = dict(data)
        for f in fields(cls):
            if f.name in kw and isinstance(kw[f.name], list):
                arr = np.asarray(kw[f.name])
                kw[f.name] = arr.astype(int) if f.name in ("mcar_cols", "logistic_cols") else arr.astype(float)
        return cls(**kw)


@dataclass
class MaskedDataset:
    """Observed covariates with ``NaN`` where ``mask`` is True (missing)."""

    Xtilde: np.ndarray
    mask: np.ndarray
    source: object
    spec: MechanismSpec = None

    @property
    def y(self):
        return self.source.y

    @property
    def n(self):
        return self.Xtilde.shape[0]

    @property
    def d(self):
        return self.Xtilde.shape[1]

    def subset(self, rows):
        return MaskedDataset(self.Xtilde[rows], self.mask[rows], self.source.subset(rows), self.spec)

    @classmethod
    def from_mask(cls, ds, mask, spec=None):
        mask = np.asarray(mask, dtype=bool)
        return cls(np.where(mask, np.nan, ds.X), mask, ds, spec)


def calibrate_intercept(prob_fn, p, samples):
    """Bisection for the intercept ``g0`` with ``mean(prob_fn(g0, samples)) == p``.

    ``prob_fn`` must be nondecreasing in ``g0``.
    """
    lo, hi = BRACKET
    f_lo = float(np.mean(prob_fn(lo, samples))) - p
    f_hi = float(np.mean(prob_fn(hi, samples))) - p
    if f_lo > 0 or f_hi < 0:
        raise CalibrationError(f"rate {p} not bracketed by intercepts in {BRACKET}")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        f_mid = float(np.mean(prob_fn(mid, samples))) - p
        if f_mid == 0:
            lo = hi = mid
            break
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
    g0 = 0.5 * (lo + hi)
    achieved = float(np.mean(prob_fn(g0, samples)))
    if abs(achieved - p) > CALIBRATION_TOL:
        raise CalibrationError(f"intercept calibration reached rate {achieved:.4f}, wanted {p}")
    return g0


def _check_rate(p, upper_open=True):
    if not (0.0 <= p < 1.0 if upper_open else 0.0 <= p <= 1.0):
        raise ContractError(f"missing rate must be in [0, 1), got {p}")


def _marginals(ds):
    if ds.gparams is not None:
        return ds.gparams.mu.copy(), np.sqrt(np.diag(ds.gparams.Sigma))
    sd = ds.X.std(axis=0)
    return ds.X.mean(axis=0), np.where(sd > 0, sd, 1.0)


def _covariance(ds):
    if ds.gparams is not None:
        return ds.gparams.Sigma
    return np.atleast_2d(np.cov(ds.X, rowvar=False, ddof=0))


def _draw_direction(rng, size):
    while True:
        delta = rng.standard_normal(size)
        if np.linalg.norm(delta) >= 1e-8:
            return delta


def _mar_index(X, mcar_mask, spec):
    """Logistic linear index for every L column; masked J entries contribute 0."""
    J = spec.mcar_cols
    z = (X[:, J] - spec.center) / spec.scale
    z = np.where(mcar_mask[:, J], 0.0, z)
    return z @ spec.slopes


# -- mechanism parameter draws -------------------------------------------------


def draw_mechanism(kind, ds, p, rng, k=2.0, strength=1.0):
    """Draw and calibrate a mechanism of the given kind against ``ds``.

    For ``mar`` the calibration needs the realized MCAR stage, so the spec
    carries that stage's uniforms only implicitly; use :func:`apply_mar_logistic`
    to obtain the mask produced during calibration.
    """
    if kind == "mcar":
        _check_rate(p)
        return MechanismSpec("mcar", p)
    if kind == "mar":
        spec, _ = _draw_mar(ds, p, rng)
        return spec
    if kind == "selfmask":
        return _draw_selfmask(ds, p, k)
    if kind == "mar_y":
        return _draw_mar_y(ds, p, rng, strength)
    raise ContractError(f"unknown mechanism {kind!r}")


def _draw_mar(ds, p, rng):
    _check_rate(p)
    n, d = ds.X.shape
    if d < 2:
        raise ContractError("non-monotone MAR needs at least 2 covariates")
    n_j = max(1, int(math.floor(MCAR_FRACTION * d)))
    J = np.sort(rng.choice(d, n_j, replace=False))
    L = np.setdiff1d(np.arange(d), J)
    mu, sd = _marginals(ds)
    corr = _covariance(ds)[np.ix_(J, J)] / np.outer(sd[J], sd[J])

    delta = np.empty((n_j, len(L)))
    v = np.empty(len(L))
    for c in range(len(L)):
        while True:
            delta[:, c] = _draw_direction(rng, n_j)
            v[c] = math.sqrt(max(float(delta[:, c] @ corr @ delta[:, c]), 0.0))
            if v[c] > 1e-12:
                break
    s = rng.uniform(*S_RANGE, size=len(L))
    spec = MechanismSpec(
        "mar", p, mcar_cols=J, logistic_cols=L, delta=delta, s=s, v=v,
        slopes=delta / (s * v), intercepts=np.zeros(len(L)), center=mu[J], scale=sd[J],
    )
    mcar_mask = np.zeros((n, d), dtype=bool)
    mcar_mask[:, J] = rng.random((n, n_j)) < p
    if p == 0:
        spec.intercepts = np.full(len(L), -np.inf)
        return spec, mcar_mask
    index = _mar_index(ds.X, mcar_mask, spec)
    for c in range(len(L)):
        spec.intercepts[c] = calibrate_intercept(lambda g0, idx: stable_sigmoid(idx + g0), p, index[:, c])
    return spec, mcar_mask


def selfmask_marginal_rate(c, k):
    """Expected missing rate of a unit-height Gaussian bump of width ``c*sd`` centred ``k*sd``
    above the mean of a normal marginal with standard deviation ``sd``."""
    return c / math.sqrt(1.0 + c * c) * math.exp(-0.5 * k * k / (1.0 + c * c))


def _solve_width(rate_fn, p):
    lo, hi = -14.0, 14.0  # log width ratio
    if rate_fn(math.exp(hi)) < p:
        raise CalibrationError(f"self-masking cannot reach rate {p}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rate_fn(math.exp(mid)) < p:
            lo = mid
        else:
            hi = mid
    return math.exp(0.5 * (lo + hi))


def _draw_selfmask(ds, p, k):
    if not 0.0 <= p < 1.0:
        raise CalibrationError(f"self-masking cannot reach rate {p} with K <= 1")
    mu, sd = _marginals(ds)
    d = ds.X.shape[1]
    mu_tilde = mu + k * sd
    ratio = np.zeros(d)
    if p > 0:
        for j in range(d):
            if ds.gparams is not None:
                ratio[j] = _solve_width(lambda c: selfmask_marginal_rate(c, k), p)
            else:
                x = ds.X[:, j]
                ratio[j] = _solve_width(
                    lambda c, x=x, j=j: float(np.mean(np.exp(-0.5 * ((x - mu_tilde[j]) / (c * sd[j])) ** 2))), p
                )
    return MechanismSpec(
        "selfmask", p, K=np.full(d, 1.0 if p > 0 else 0.0), mu_tilde=mu_tilde,
        sigma_tilde=np.maximum(ratio, 1e-300) * sd, k=float(k),
    )


def selfmask_prob(X, spec):
    return spec.K * np.exp(-0.5 * ((X - spec.mu_tilde) / spec.sigma_tilde) ** 2)


def _draw_mar_y(ds, p, rng, strength):
    _check_rate(p)
    d = ds.X.shape[1]
    sigma_y = float(np.std(ds.y))
    if not sigma_y > 0:
        raise ContractError("MAR-Y needs a non-constant outcome")
    signs = np.array([np.sign(_draw_direction(rng, 1)[0]) for _ in range(d)])
    slopes = strength * signs / sigma_y
    spec = MechanismSpec("mar_y", p, slopes=slopes, intercepts=np.zeros(d), strength=float(strength))
    if p == 0:
        spec.intercepts[:] = -np.inf
        return spec
    for j in range(d):
        spec.intercepts[j] = calibrate_intercept(lambda g0, y, a=slopes[j]: stable_sigmoid(a * y + g0), p, ds.y)
    return spec


# -- applying a spec -----------------------------------------------------------


def mask_with_spec(ds, spec, rng):
    """Sample a mask for ``ds`` from an already calibrated spec."""
    n, d = ds.X.shape
    if spec.p == 0:
        return MaskedDataset.from_mask(ds, np.zeros((n, d), dtype=bool), spec)
    if spec.kind == "mcar":
        mask = rng.random((n, d)) < spec.p
    elif spec.kind == "mar":
        mask = np.zeros((n, d), dtype=bool)
        J, L = spec.mcar_cols, spec.logistic_cols
        mask[:, J] = rng.random((n, len(J))) < spec.p
        prob = stable_sigmoid(_mar_index(ds.X, mask, spec) + spec.intercepts)
        mask[:, L] = rng.random((n, len(L))) < prob
    elif spec.kind == "selfmask":
        mask = rng.random((n, d)) < selfmask_prob(ds.X, spec)
    else:
        prob = stable_sigmoid(np.outer(ds.y, spec.slopes) + spec.intercepts)
        mask = rng.random((n, d)) < prob
    return MaskedDataset.from_mask(ds, mask, spec)


def apply_mcar(ds, p, rng):
    return mask_with_spec(ds, draw_mechanism("mcar", ds, p, rng), rng)


def apply_mar_logistic(ds, p, rng):
    spec, mask = _draw_mar(ds, p, rng)
    if p > 0:
        L = spec.logistic_cols
        prob = stable_sigmoid(_mar_index(ds.X, mask, spec) + spec.intercepts)
        mask[:, L] = rng.random((ds.n, len(L))) < prob
    return MaskedDataset.from_mask(ds, mask, spec)


def apply_selfmask(ds, p, k, rng):
    return mask_with_spec(ds, _draw_selfmask(ds, p, k), rng)


def apply_mar_y(ds, p, rng, strength=1.0):
    return mask_with_spec(ds, _draw_mar_y(ds, p, rng, strength), rng)


def apply_mechanism(kind, ds, p, rng, k=2.0, strength=1.0):
    if kind == "mcar":
        return apply_mcar(ds, p, rng)
    if kind == "mar":
        return apply_mar_logistic(ds, p, rng)
    if kind == "selfmask":
        return apply_selfmask(ds, p, k, rng)
    if kind == "mar_y":
        return apply_mar_y(ds, p, rng, strength)
    raise ContractError(f"unknown mechanism {kind!r}")


def save_masked(md, path):
    """Persist a MaskedDataset together with its source Dataset and mechanism spec."""
    arrays, attrs = dataset_arrays(md.source)
    arrays.update(Xtilde=md.Xtilde, mask=md.mask)
    attrs["kind"] = "masked"
    if md.spec is not None:
        attrs["spec"] = md.spec.to_dict()
    container.save_arrays(path, arrays, attrs)
    container.write_sidecar(path, {"mechanism": attrs.get("spec"), "n": md.n, "d": md.d,
                                   "missing_rate": float(md.mask.mean())})


def load_masked(path):
    arrays, attrs = container.load_arrays(path)
    if attrs.get("kind") != "masked":
        raise FormatError(f"{path} does not hold a masked dataset")
    spec = MechanismSpec.from_dict(attrs["spec"]) if "spec" in attrs else None
    return MaskedDataset(arrays["Xtilde"], arrays["mask"], dataset_from_arrays(arrays, attrs), spec)
