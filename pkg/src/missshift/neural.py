"""NeuMiss / NeuMISE embeddings, the MLP head, the training loop and grid search.

Networks use the row-vector convention: a batch is ``n x d`` and a linear
map is applied as ``X @ W``, so the stored ``V`` and ``W`` are the
transposes of the column-vector matrices.
"""

import copy
import itertools
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .errors import ContractError, DivergenceError

log = logging.getLogger(__name__)

EMBEDDINGS = ("neumiss", "neumise")
DEFAULT_BLOCKS = 20
GRID_SPACE = {
    "lr": [1e-2, 5e-3, 1e-3],
    "weight_decay": [1e-5, 1e-4, 1e-3],
    "width": [50, 250, 500],
    "depth": [1, 2, 5],
}
PREDICT_CHUNK = 8192


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 100
    max_epochs: int = 1000
    patience: int = 12
    lr_patience: int = 10
    lr_factor: float = 0.2
    min_rel_improvement: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1 or self.lr_patience < 1:
            raise ContractError("patience values must be positive")
        if not 0.0 < self.lr_factor < 1.0:
            raise ContractError("lr_factor must be in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ContractError("batch_size and max_epochs must be positive")


@dataclass
class ArchSpec:
    """Network shape. ``kind`` is ``mlp`` (completed design input) or an embedding name."""

    kind: str = "mlp"
    width: int = 50
    depth: int = 2
    n_blocks: int = DEFAULT_BLOCKS
    bn_stats: str = "observed"  # neumise only: "observed" or "zero_filled"

    def __post_init__(self):
        if self.kind not in ("mlp",) + EMBEDDINGS:
            raise ContractError(f"unknown architecture {self.kind!r}")
        if self.n_blocks < 0 or self.depth < 0 or self.width < 1:
            raise ContractError("n_blocks and depth must be >= 0, width >= 1")
        if self.bn_stats not in ("observed", "zero_filled"):
            raise ContractError(f"bn_stats must be 'observed' or 'zero_filled', got {self.bn_stats!r}")


class Network:
    """Optional Neumann embedding followed by a relu MLP with a scalar linear output.

    ``forward`` takes ``(x, mask)`` where ``x`` has NaN-free values (missing
    entries arbitrary) and ``mask`` is 1 where missing; for ``mlp`` the mask
    is ignored.
    """

    def __init__(self, arch, d_in, rng, input_center=None, input_scale=None, y_mean=0.0):
        self.arch = arch
        self.d_in = d_in
        self.params = {}
        self.bn = None
        self.center = np.zeros((1, d_in)) if input_center is None else dc.as_matrix(input_center)
        self.scale = np.ones((1, d_in)) if input_scale is None else dc.as_matrix(input_scale)
        d = d_in
        if arch.kind in EMBEDDINGS:
            s = 0.5 / np.sqrt(d)
            self.params["V"] = rng.normal(0.0, s, (d, d))
            self.params["W"] = rng.normal(0.0, s, (d, d))
            if arch.kind == "neumiss":
                self.params["mu"] = np.zeros((1, d))
            else:
                self.params["bn_gamma"] = np.ones((1, d))
                self.params["bn_beta"] = np.zeros((1, d))
                self.bn = dc.BatchNormState.create(d)
        fan_in = d
        for i in range(arch.depth):
            self.params[f"h{i}.W"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, arch.width))
            self.params[f"h{i}.b"] = np.zeros((1, arch.width))
            fan_in = arch.width
        self.params["out.W"] = rng.normal(0.0, np.sqrt(1.0 / fan_in), (fan_in, 1))
        self.params["out.b"] = np.full((1, 1), float(y_mean))

    def embed(self, x, mask, nodes, training):
        """Embedding graph; ``nodes`` maps parameter names to graph leaves."""
        kind = self.arch.kind
        mask = np.asarray(mask, dtype=np.float64)
        keep = 1.0 - mask
        xs = np.where(mask > 0, 0.0, (x - self.center) / self.scale)
        if kind == "neumiss":
            base = dc.mul(dc.sub(xs, nodes["mu"]), keep)
            gate = keep
        else:
            weights = keep if self.arch.bn_stats == "observed" else None
            normed = dc.batch_norm(xs, nodes["bn_gamma"], nodes["bn_beta"], self.bn, training, weights)
            base = dc.mul(normed, keep)
            gate = mask
        h = dc.add(dc.mul(dc.matmul(base, nodes["V"]), gate), base)
        for _ in range(self.arch.n_blocks):
            h = dc.add(dc.mul(dc.matmul(h, nodes["W"]), gate), base)
        return h

    def forward(self, x, mask, nodes, training=False):
        if self.arch.kind in EMBEDDINGS:
            h = self.embed(x, mask, nodes, training)
        else:
            h = dc.constant((x - self.center) / self.scale)
        for i in range(self.arch.depth):
            h = dc.relu(dc.add(dc.matmul(h, nodes[f"h{i}.W"]), nodes[f"h{i}.b"]))
        return dc.add(dc.matmul(h, nodes["out.W"]), nodes["out.b"])

    def leaves(self, trainable=True):
        if trainable:
            return {k: dc.param(v) for k, v in self.params.items()}
        return {k: dc.Node(v) for k, v in self.params.items()}

    def predict(self, x, mask=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mask = np.zeros_like(x) if mask is None else np.asarray(mask, dtype=np.float64)
        nodes = self.leaves(trainable=False)
        out = np.empty(x.shape[0])
        for lo in range(0, x.shape[0], PREDICT_CHUNK):
            hi = lo + PREDICT_CHUNK
            out[lo:hi] = self.forward(x[lo:hi], mask[lo:hi], nodes, training=False).value[:, 0]
        return out

    def snapshot(self):
        return copy.deepcopy((self.params, self.bn))

    def restore(self, snap):
        self.params, self.bn = copy.deepcopy(snap)

    def to_arrays(self, prefix="net."):
        arrays = {f"{prefix}{k}": v for k, v in self.params.items()}
        arrays[f"{prefix}center"] = self.center
        arrays[f"{prefix}scale"] = self.scale
        if self.bn is not None:
            arrays[f"{prefix}bn_running_mean"] = self.bn.running_mean
            arrays[f"{prefix}bn_running_var"] = self.bn.running_var
        attrs = {"arch": asdict(self.arch), "d_in": self.d_in}
        if self.bn is not None:
            attrs["bn"] = {"momentum": self.bn.momentum, "eps": self.bn.eps}
        return arrays, attrs

    @classmethod
    def from_arrays(cls, arrays, attrs, prefix="net."):
        net = cls.__new__(cls)
        net.arch = ArchSpec(**attrs["arch"])
        net.d_in = attrs["d_in"]
        reserved = {"center", "scale", "bn_running_mean", "bn_running_var"}
        net.params = {
            k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix) and k[len(prefix):] not in reserved
        }
        net.center = arrays[f"{prefix}center"]
        net.scale = arrays[f"{prefix}scale"]
        net.bn = None
        if "bn" in attrs:
            net.bn = dc.BatchNormState(
                arrays[f"{prefix}bn_running_mean"], arrays[f"{prefix}bn_running_var"], **attrs["bn"]
            )
        return net


@dataclass
class TrainHistory:
    train_loss: list
    val_loss: list
    lr: list
    best_epoch: int
    stopped_epoch: int


def train_network(net, x, mask, y, val_fn, cfg, rng):
    """Minibatch Adam on MSE with plateau LR decay, early stopping and best-weight restore.

    ``val_fn(net)`` returns the validation loss after each epoch. Raises
    DivergenceError carrying the epoch index on a non-finite loss.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    mask = np.zeros_like(x) if mask is None else np.asarray(mask, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ContractError("need at least 2 training rows")
    names = list(net.params)
    state = dc.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    best, best_epoch, bad, since_decay = np.inf, 0, 0, 0
    snap = net.snapshot()
    hist = TrainHistory([], [], [], 0, 0)
    bs = cfg.batch_size
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, bs):
            idx = order[lo : lo + bs]
            if len(idx) < 2 and n >= 2:
                idx = order[max(0, n - 2):]
            nodes = net.leaves()
            loss = dc.mse_loss(net.forward(x[idx], mask[idx], nodes, training=True), y[idx])
            value, grads = dc.forward_backward(loss, [nodes[k] for k in names])
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch)
            try:
                dc.adam_step(state, [net.params[k] for k in names], grads)
            except DivergenceError as exc:
                raise DivergenceError(f"non-finite gradient at epoch {epoch}", epoch) from exc
            total += value * len(idx)
        val = float(val_fn(net))
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}", epoch)
        hist.train_loss.append(total / n)
        hist.val_loss.append(val)
        hist.lr.append(state.lr)
        if val < best * (1.0 - cfg.min_rel_improvement) or best == np.inf:
            best, best_epoch, bad, since_decay = val, epoch, 0, 0
            snap = net.snapshot()
        else:
            bad += 1
            since_decay += 1
            if since_decay >= cfg.lr_patience:
                state.lr *= cfg.lr_factor
                since_decay = 0
            if bad >= cfg.patience:
                break
    net.restore(snap)
    hist.best_epoch, hist.stopped_epoch = best_epoch, epoch
    log.debug("trained %s: best val %.5f at epoch %d, stopped %d", net.arch.kind, best, best_epoch, epoch)
    return hist


def neumiss_forward(net, xtilde, mask=None):
    """Embedded batch of a NeuMiss network (evaluation mode)."""
    return _embedding(net, xtilde, mask, "neumiss")


def neumise_forward(net, xtilde, mask=None, training=False):
    return _embedding(net, xtilde, mask, "neumise", training)


def _embedding(net, xtilde, mask, kind, training=False):
    if net.arch.kind != kind:
        raise ContractError(f"network is {net.arch.kind!r}, not {kind!r}")
    xtilde = np.atleast_2d(np.asarray(xtilde, dtype=np.float64))
    if xtilde.shape[1] != net.d_in:
        raise ContractError(f"expected {net.d_in} columns, got {xtilde.shape[1]}")
    mask = np.isnan(xtilde) if mask is None else np.asarray(mask, dtype=bool)
    x = np.where(mask, 0.0, xtilde)
    return net.embed(x, mask, net.leaves(trainable=False), training).value


def observed_stats(xtilde):
    """Column means and standard deviations over observed entries (sd floored at 1e-8)."""
    mean = np.nanmean(xtilde, axis=0)
    sd = np.nanstd(xtilde, axis=0)
    mean = np.where(np.isnan(mean), 0.0, mean)
    sd = np.where(np.isnan(sd) | (sd < 1e-8), 1.0, sd)
    return mean, sd


def grid_points(space):
    keys = list(space)
    for combo in itertools.product(*(space[k] for k in keys)):
        yield dict(zip(keys, combo))


def grid_search(space, fit_score, reps, rng):
    """Exhaustive search; returns the point with lowest mean validation loss over ``reps``.

    ``fit_score(point, rng)`` trains once and returns a validation loss. Ties
    go to the smaller width, then the smaller depth.
    """
    points = list(grid_points(space))
    if not points:
        raise ContractError("empty search space")
    scored = []
    for i, point in enumerate(points):
        losses = [float(fit_score(point, rng)) for _ in range(reps)]
        mean = float(np.mean(losses)) if all(np.isfinite(losses)) else np.inf
        scored.append((mean, point.get("width", 0), point.get("depth", 0), i))
        log.info("grid %s -> %.5f", point, mean)
    best = min(scored)
    return points[best[3]]
