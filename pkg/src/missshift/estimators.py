"""Trained predictors behind one contract: ``model.predict(masked_dataset) -> ndarray``.

``fit_estimator`` builds any registered estimator from a source training and
validation split; ``save_model`` / ``load_model`` persist them in the binary
container.
"""

import hashlib
import json

import numpy as np

from . import analytic, container, imputers
from .datagen import GaussianParams, OutcomeParams, wave_h
from .errors import ContractError, FormatError, UnavailableError
from .missingness import MechanismSpec
from .neural import ArchSpec, Network, TrainConfig, observed_stats, train_network

ANALYTIC = ("bayes", "cond_oracle", "prob_oracle")
REFERENCE = ("mean", "complete")
IMPUTE_REGRESS = ("ice", "ice_mask", "mice", "ice_y", "mice_y")
NEURAL = ("neumiss", "neumise")
ESTIMATORS = ANALYTIC + REFERENCE + IMPUTE_REGRESS + NEURAL
N_IMP = 5
ORACLE_DRAWS = 5


def _xtilde(data):
    return data.Xtilde if hasattr(data, "Xtilde") else np.atleast_2d(np.asarray(data, dtype=np.float64))


class MeanModel:
    name = "mean"

    def __init__(self, value):
        self.value = float(value)

    def predict(self, data):
        return np.full(_xtilde(data).shape[0], self.value)


class CompleteModel:
    """The true outcome function applied to the fully observed covariates."""

    name = "complete"

    def __init__(self, op):
        self.op = op

    def predict(self, data):
        if not hasattr(data, "source"):
            raise ContractError("the complete-data predictor needs a MaskedDataset with its source")
        return wave_h(data.source.X, self.op)


class AnalyticModel:
    """Bayes predictor or oracle for Gaussian covariates with a known mechanism.

    For ignorable mechanisms the mechanism spec is irrelevant and ignored;
    for self-masking the spec of the training environment is used.
    """

    def __init__(self, name, gp, op, spec=None, n_draws=ORACLE_DRAWS, seed=0):
        self.name = name
        self.gp, self.op = gp, op
        self.spec = spec if spec is not None and spec.kind == "selfmask" else None
        self.n_draws = n_draws
        self.seed = seed
        self._cond = analytic.GaussianConditioner(gp)

    def predict(self, data):
        x = _xtilde(data)
        if self.name == "bayes":
            if self.spec is None:
                return analytic.bayes_predict_mar(x, self.gp, self.op, self._cond)
            return analytic.bayes_predict_selfmask(x, self.gp, self.op, self.spec, self._cond)
        if self.name == "cond_oracle":
            return analytic.oracle_cond_predict(x, self.gp, self.op, self.spec, self._cond)
        rng = np.random.default_rng(self.seed)
        return analytic.oracle_prob_predict(x, self.gp, self.op, self.n_draws, rng, self.spec, self._cond)


class ImputeRegressModel:
    """Frozen imputer followed by an MLP; multiple completions average the MLP outputs."""

    def __init__(self, name, imputer, net, n_imp=1, seed=0):
        self.name = name
        self.imputer = imputer
        self.net = net
        self.n_imp = n_imp
        self.seed = seed

    def designs(self, data, rng=None):
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        return imputers.ice_transform(self.imputer, _xtilde(data), rng, self.n_imp)

    def predict(self, data):
        return np.mean([self.net.predict(X) for X in self.designs(data)], axis=0)


class NeuralModel:
    def __init__(self, name, net):
        self.name = name
        self.net = net

    def predict(self, data):
        x = _xtilde(data)
        mask = np.isnan(x)
        return self.net.predict(np.where(mask, 0.0, x), mask)


def analytic_available(md):
    src = md.source
    return src.gparams is not None and (md.spec is None or md.spec.kind in ("mcar", "mar", "selfmask"))


def fit_estimator(name, train, val, cfg=None, arch=None, rng=None, n_imp=N_IMP):
    """Fit estimator ``name`` on a source training split, selecting on ``val``.

    ``arch`` supplies the MLP width/depth (and the embedding depth); its
    ``kind`` is overridden by the estimator.
    """
    cfg = cfg or TrainConfig()
    arch = arch or ArchSpec()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if name not in ESTIMATORS:
        raise ContractError(f"unknown estimator {name!r}; known: {ESTIMATORS}")
    src = train.source
    if name in ANALYTIC:
        if not analytic_available(train):
            raise UnavailableError(f"{name} needs simulated Gaussian data and an MCAR/MAR/self-masking mechanism")
        return AnalyticModel(name, src.gparams, src.oparams, train.spec, seed=int(rng.integers(2**31)))
    if name == "mean":
        return MeanModel(np.mean(train.y))
    if name == "complete":
        return CompleteModel(src.oparams)
    if name in NEURAL:
        return _fit_neural(name, train, val, cfg, arch, rng)
    return _fit_impute_regress(name, train, val, cfg, arch, rng, n_imp)


def _mse(pred, y):
    return float(np.mean((pred - y) ** 2))


def _fit_neural(name, train, val, cfg, arch, rng):
    a = ArchSpec(name, arch.width, arch.depth, arch.n_blocks, arch.bn_stats)
    center, scale = observed_stats(train.Xtilde)
    net = Network(a, train.d, rng, center, scale, y_mean=float(np.mean(train.y)))
    mask = train.mask.astype(np.float64)
    x = np.where(train.mask, 0.0, train.Xtilde)
    model = NeuralModel(name, net)
    train_network(net, x, mask, train.y, lambda _: _mse(model.predict(val), val.y), cfg, rng)
    return model


def _fit_impute_regress(name, train, val, cfg, arch, rng, n_imp):
    probabilistic = name in ("mice", "mice_y")
    k = n_imp if probabilistic else 1
    if name in ("ice_y", "mice_y"):
        pipe = imputers.y_conditional_pipeline(train, rng, probabilistic=probabilistic, n_imp=k)
        imputer, designs = pipe.imputer, pipe.designs
    else:
        imputer = imputers.ice_fit(train, use_mask=(name == "ice_mask"), probabilistic=probabilistic, rng=rng)
        designs = imputers.ice_transform(imputer, train.Xtilde, rng, k)
    X = np.vstack(designs)
    y = np.tile(train.y, len(designs))
    center, scale = X.mean(axis=0), X.std(axis=0)
    scale = np.where(scale < 1e-8, 1.0, scale)
    a = ArchSpec("mlp", arch.width, arch.depth, arch.n_blocks)
    net = Network(a, X.shape[1], rng, center, scale, y_mean=float(np.mean(y)))
    model = ImputeRegressModel(name, imputer, net, n_imp=k, seed=int(rng.integers(2**31)))
    val_designs = model.designs(val, np.random.default_rng(model.seed + 1))

    def val_fn(net):
        return _mse(np.mean([net.predict(D) for D in val_designs], axis=0), val.y)

    train_network(net, X, None, y, val_fn, cfg, rng)
    return model


# -- persistence ----------------------------------------------------------------


def _gauss_arrays(gp, op):
    arrays = {"op.beta": op.beta}
    attrs = {"op": {"beta0": op.beta0, "gamma": op.gamma, "S": [list(p) for p in op.S], "sigma_eps": op.sigma_eps}}
    if gp is not None:
        arrays.update({"gp.mu": gp.mu, "gp.Sigma": gp.Sigma, "gp.B": gp.B})
        attrs["gp"] = {"lam": gp.lam}
    return arrays, attrs


def _gauss_from(arrays, attrs):
    o = attrs["op"]
    op = OutcomeParams(arrays["op.beta"], o["beta0"], o["gamma"], tuple(tuple(p) for p in o["S"]), o["sigma_eps"])
    gp = None
    if "gp" in attrs:
        gp = GaussianParams(len(arrays["gp.mu"]), arrays["gp.mu"], arrays["gp.Sigma"], arrays["gp.B"], attrs["gp"]["lam"])
    return gp, op


def model_arrays(model):
    """Named arrays and attrs describing a fitted model."""
    attrs = {"kind": "model", "estimator": model.name}
    arrays = {}
    if isinstance(model, MeanModel):
        attrs["value"] = model.value
    elif isinstance(model, CompleteModel):
        arrays, extra = _gauss_arrays(None, model.op)
        attrs.update(extra)
    elif isinstance(model, AnalyticModel):
        arrays, extra = _gauss_arrays(model.gp, model.op)
        attrs.update(extra, n_draws=model.n_draws, seed=model.seed)
        if model.spec is not None:
            attrs["spec"] = model.spec.to_dict()
    elif isinstance(model, ImputeRegressModel):
        arrays, attrs["imputer"] = imputers.imputer_arrays(model.imputer)
        net_arrays, attrs["net"] = model.net.to_arrays()
        arrays.update(net_arrays)
        attrs.update(n_imp=model.n_imp, seed=model.seed)
    elif isinstance(model, NeuralModel):
        arrays, attrs["net"] = model.net.to_arrays()
    else:
        raise ContractError(f"cannot serialize {type(model).__name__}")
    return arrays, attrs


def save_model(model, path):
    arrays, attrs = model_arrays(model)
    container.save_arrays(path, arrays, attrs)


def load_model(path):
    arrays, attrs = container.load_arrays(path)
    if attrs.get("kind") != "model":
        raise FormatError(f"{path} does not hold a model")
    name = attrs["estimator"]
    if name == "mean":
        return MeanModel(attrs["value"])
    if name == "complete":
        return CompleteModel(_gauss_from(arrays, attrs)[1])
    if name in ANALYTIC:
        gp, op = _gauss_from(arrays, attrs)
        spec = MechanismSpec.from_dict(attrs["spec"]) if "spec" in attrs else None
        return AnalyticModel(name, gp, op, spec, attrs["n_draws"], attrs["seed"])
    if name in IMPUTE_REGRESS:
        imp = imputers.imputer_from_arrays(arrays, attrs["imputer"])
        return ImputeRegressModel(name, imp, Network.from_arrays(arrays, attrs["net"]), attrs["n_imp"], attrs["seed"])
    if name in NEURAL:
        return NeuralModel(name, Network.from_arrays(arrays, attrs["net"]))
    raise FormatError(f"unknown estimator {name!r} in {path}")


def weights_digest(model):
    """SHA-256 over a model's serialized arrays and attrs; used to check isolation."""
    arrays, attrs = model_arrays(model)
    h = hashlib.sha256(json.dumps(attrs, sort_keys=True, default=str).encode())
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k], dtype=np.float64).tobytes())
    return h.hexdigest()
