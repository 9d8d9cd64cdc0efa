"""Gaussian conditionals, analytic Bayes predictors for the wave outcome, oracles, Bayes risk.

All predictors take a row-major matrix ``xtilde`` with ``NaN`` marking missing
entries (a single row may be passed as a 1-D array) and group rows by their
missingness pattern; every pattern's factorizations are computed once and
cached on a :class:`GaussianConditioner`.
"""

import threading
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import ndtr

from .datagen import wave_h
from .diffcore import cho_factor
from .errors import ContractError


@dataclass
class ConditionalGaussian:
    """Law of the missing coordinates given the observed ones."""

    pattern: np.ndarray
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class SelfMaskPosterior:
    D: np.ndarray
    A: np.ndarray
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class _Pattern:
    obs: np.ndarray
    mis: np.ndarray
    reg: np.ndarray  # Sigma_mis,obs Sigma_obs^-1
    cov: np.ndarray  # Sigma_mis|obs


class GaussianConditioner:
    """Per-pattern cache of conditional Gaussian factorizations for fixed ``(mu, Sigma)``."""

    def __init__(self, gp):
        self.gp = gp
        self._patterns = {}
        self._selfmask = {}
        self._lock = threading.Lock()

    def pattern(self, m):
        m = np.asarray(m, dtype=bool)
        key = m.tobytes()
        hit = self._patterns.get(key)
        if hit is not None:
            return hit
        Sigma = self.gp.Sigma
        obs, mis = np.flatnonzero(~m), np.flatnonzero(m)
        S_mo = Sigma[np.ix_(mis, obs)]
        S_mm = Sigma[np.ix_(mis, mis)]
        if len(obs) and len(mis):
            factor = cho_factor(Sigma[np.ix_(obs, obs)])
            reg = scipy.linalg.cho_solve(factor, S_mo.T).T
            cov = S_mm - reg @ S_mo.T
            cov = 0.5 * (cov + cov.T)
        else:
            reg = np.zeros((len(mis), len(obs)))
            cov = S_mm.copy()
        entry = _Pattern(obs, mis, reg, cov)
        with self._lock:
            self._patterns.setdefault(key, entry)
        return entry

    def selfmask_gain(self, m, sigma_tilde):
        """``Sigma_c (Sigma_c + D)^-1`` and the posterior covariance for a pattern."""
        m = np.asarray(m, dtype=bool)
        key = (m.tobytes(), sigma_tilde.tobytes())
        hit = self._selfmask.get(key)
        if hit is not None:
            return hit
        pat = self.pattern(m)
        D = sigma_tilde[pat.mis] ** 2
        Sc = pat.cov
        gain = scipy.linalg.cho_solve(cho_factor(Sc + np.diag(D)), Sc).T
        post = Sc - gain @ Sc
        post = 0.5 * (post + post.T)
        with self._lock:
            self._selfmask.setdefault(key, (gain, post))
        return gain, post

    def moments(self, xtilde, spec=None):
        """Yield ``(rows, pattern, mean_mis, cov_mis)`` for every pattern group.

        With a self-masking ``spec`` the moments are those of the posterior
        that also conditions on the coordinates having gone missing.
        """
        xtilde = np.atleast_2d(np.asarray(xtilde, dtype=np.float64))
        mask = np.isnan(xtilde)
        patterns, inverse = np.unique(mask, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        mu = self.gp.mu
        for g, m in enumerate(patterns):
            rows = np.flatnonzero(inverse == g)
            pat = self.pattern(m)
            x_obs = xtilde[np.ix_(rows, pat.obs)]
            A = mu[pat.mis] + (x_obs - mu[pat.obs]) @ pat.reg.T
            cov = pat.cov
            if spec is not None and spec.kind == "selfmask" and len(pat.mis):
                gain, cov = self.selfmask_gain(m, spec.sigma_tilde)
                A = A + (spec.mu_tilde[pat.mis] - A) @ gain.T
            yield rows, pat, A, cov


def conditional_gaussian(gp, m, x_obs, conditioner=None):
    m = np.asarray(m, dtype=bool)
    cond = conditioner or GaussianConditioner(gp)
    pat = cond.pattern(m)
    x_obs = np.asarray(x_obs, dtype=np.float64)
    if len(x_obs) != len(pat.obs):
        raise ContractError(f"x_obs has {len(x_obs)} entries, pattern observes {len(pat.obs)}")
    mean = gp.mu[pat.mis] + pat.reg @ (x_obs - gp.mu[pat.obs])
    return ConditionalGaussian(m.copy(), mean, pat.cov.copy())


def selfmask_posterior(gp, m, x_obs, spec, conditioner=None):
    cond = conditioner or GaussianConditioner(gp)
    cg = conditional_gaussian(gp, m, x_obs, cond)
    gain, post = cond.selfmask_gain(np.asarray(m, dtype=bool), spec.sigma_tilde)
    mis = np.flatnonzero(m)
    mean = cg.mean + gain @ (spec.mu_tilde[mis] - cg.mean)
    return SelfMaskPosterior(np.diag(spec.sigma_tilde[mis] ** 2), cg.mean, mean, post)


def wave_expectation(m_z, s2_z, op):
    """``E[h]`` when the linear index ``Z = X beta + beta0`` is ``N(m_z, s2_z)``."""
    out = m_z - 1.0
    scale = np.sqrt(1.0 + op.gamma**2 * s2_z)
    for a, b in op.S:
        out = out + a * ndtr(op.gamma * (m_z + b) / scale)
    return out


def _predict(xtilde, gp, op, spec, conditioner):
    xtilde = np.atleast_2d(np.asarray(xtilde, dtype=np.float64))
    cond = conditioner or GaussianConditioner(gp)
    out = np.empty(xtilde.shape[0])
    beta = op.beta
    for rows, pat, mean, cov in cond.moments(xtilde, spec):
        b_mis = beta[pat.mis]
        m_z = xtilde[np.ix_(rows, pat.obs)] @ beta[pat.obs] + op.beta0 + mean @ b_mis
        s2 = float(b_mis @ cov @ b_mis) if len(pat.mis) else 0.0
        out[rows] = wave_expectation(m_z, max(s2, 0.0), op)
    return out


def bayes_predict_mar(xtilde, gp, op, conditioner=None):
    """Exact ``E[Y | X_obs, M]`` under any ignorable mechanism."""
    return _predict(xtilde, gp, op, None, conditioner)


def bayes_predict_selfmask(xtilde, gp, op, spec, conditioner=None):
    """Exact ``E[Y | X_obs, M]`` under Gaussian self-masking with parameters ``spec``."""
    if spec is None or spec.kind != "selfmask":
        raise ContractError("bayes_predict_selfmask needs a self-masking MechanismSpec")
    return _predict(xtilde, gp, op, spec, conditioner)


def conditional_impute(xtilde, gp, spec=None, conditioner=None):
    """Replace missing entries by their conditional (or self-mask posterior) mean."""
    xtilde = np.atleast_2d(np.asarray(xtilde, dtype=np.float64))
    cond = conditioner or GaussianConditioner(gp)
    out = xtilde.copy()
    for rows, pat, mean, _ in cond.moments(xtilde, spec):
        if len(pat.mis):
            out[np.ix_(rows, pat.mis)] = mean
    return out


def oracle_cond_predict(xtilde, gp, op, spec=None, conditioner=None):
    return wave_h(conditional_impute(xtilde, gp, spec, conditioner), op)


def _psd_sqrt(cov):
    w, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.clip(w, 0.0, None))


def oracle_prob_predict(xtilde, gp, op, n_draws=5, rng=None, spec=None, conditioner=None):
    """Average of ``h`` over ``n_draws`` completions drawn from the true conditional law."""
    if n_draws < 1:
        raise ContractError("n_draws must be at least 1")
    rng = rng if rng is not None else np.random.default_rng()
    xtilde = np.atleast_2d(np.asarray(xtilde, dtype=np.float64))
    cond = conditioner or GaussianConditioner(gp)
    total = np.zeros(xtilde.shape[0])
    groups = list(cond.moments(xtilde, spec))
    for _ in range(n_draws):
        filled = xtilde.copy()
        for rows, pat, mean, cov in groups:
            if len(pat.mis):
                root = _psd_sqrt(cov)
                z = rng.standard_normal((len(rows), len(pat.mis)))
                filled[np.ix_(rows, pat.mis)] = mean + z @ root.T
        total += wave_h(filled, op)
    return total / n_draws


def empirical_bayes_risk(predictions, y):
    predictions = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if predictions.shape != y.shape:
        raise ContractError(f"length mismatch: {predictions.shape} vs {y.shape}")
    if y.size == 0:
        raise ContractError("empty input")
    return float(np.mean((y - predictions) ** 2))
