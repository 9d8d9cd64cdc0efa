import numpy as np
import pytest

from missshift import neural
from missshift.errors import ContractError, DivergenceError
from missshift.neural import ArchSpec, Network, TrainConfig


def _net(kind, d=4, seed=0, **kw):
    return Network(ArchSpec(kind, **kw), d, np.random.default_rng(seed))


def test_default_hyperparameters():
    assert neural.DEFAULT_BLOCKS == 20 and ArchSpec().n_blocks == 20
    assert neural.GRID_SPACE["lr"] == [1e-2, 5e-3, 1e-3]
    assert neural.GRID_SPACE["weight_decay"] == [1e-5, 1e-4, 1e-3]
    assert neural.GRID_SPACE["width"] == [50, 250, 500]
    assert neural.GRID_SPACE["depth"] == [1, 2, 5]
    cfg = TrainConfig()
    assert cfg.batch_size == 100 and cfg.max_epochs == 1000


def test_neumiss_zero_weights_forward_input():
    net = Network(ArchSpec("neumiss", n_blocks=5), 3, np.random.default_rng(0),
                  input_center=[1.0, 2.0, 3.0], input_scale=[2.0, 2.0, 2.0])
    net.params["W"][:] = 0
    net.params["V"][:] = 0
    x = np.array([[3.0, np.nan, 7.0], [np.nan, 0.0, np.nan]])
    out = neural.neumiss_forward(net, x)
    np.testing.assert_array_equal(out, [[1.0, 0.0, 2.0], [0.0, -1.0, 0.0]])


def _pd(d, rng, radius=0.8):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    eig = rng.uniform(1 - radius, 1 + radius, d)
    return (Q * eig) @ Q.T


def test_neumiss_neumann_series():
    rng = np.random.default_rng(1)
    d = 5
    Sigma = _pd(d, rng)
    x = rng.normal(size=(3, d))
    target = np.linalg.solve(Sigma, x.T).T
    rho = np.max(np.abs(np.linalg.eigvalsh(np.eye(d) - Sigma)))
    errs = []
    for k in range(0, 12):
        net = _net("neumiss", d, n_blocks=k)
        net.params["W"] = np.eye(d) - Sigma
        net.params["V"] = np.eye(d) - Sigma
        out = neural.neumiss_forward(net, x)
        # k blocks after the V step give the partial sum of (I - Sigma)^i for i <= k + 1
        partial = sum(np.linalg.matrix_power(np.eye(d) - Sigma, i) for i in range(k + 2))
        np.testing.assert_allclose(out, x @ partial, atol=1e-12)
        errs.append(np.linalg.norm(out - target))
    ratios = np.array(errs[1:]) / np.array(errs[:-1])
    assert np.all(ratios <= rho + 1e-9)
    assert errs[-1] < errs[0] * rho ** 10 * 10


@pytest.mark.parametrize("bn", ["observed", "zero_filled"])
def test_neumise_observed_rows_pass_through(bn):
    rng = np.random.default_rng(2)
    net = _net("neumise", 4, n_blocks=7, bn_stats=bn)
    for k in ("W", "V"):
        net.params[k] = rng.normal(size=(4, 4)) * 3
    net.params["bn_gamma"] = rng.normal(size=(1, 4))
    net.params["bn_beta"] = rng.normal(size=(1, 4))
    net.bn.running_mean = rng.normal(size=(1, 4))
    net.bn.running_var = rng.uniform(0.5, 2, size=(1, 4))
    x = rng.normal(size=(6, 4))
    normed = (x - net.bn.running_mean) / np.sqrt(net.bn.running_var + net.bn.eps) * net.params["bn_gamma"] \
        + net.params["bn_beta"]
    np.testing.assert_allclose(neural.neumise_forward(net, x), normed, rtol=0, atol=1e-12)


def test_fully_missing_rows_embed_to_zero():
    for kind in neural.EMBEDDINGS:
        net = _net(kind, 3, seed=4, n_blocks=4)
        out = (neural.neumiss_forward if kind == "neumiss" else neural.neumise_forward)(net, np.full((2, 3), np.nan))
        np.testing.assert_array_equal(out, 0.0)


def test_embeddings_update_complementary_coordinates():
    rng = np.random.default_rng(5)
    d = 5
    x = rng.normal(size=(8, d))
    mask = rng.random((8, d)) < 0.4
    mask[0] = [True, False, True, False, False]
    xt = np.where(mask, np.nan, x)
    V, W = rng.normal(size=(d, d)), rng.normal(size=(d, d))
    outs = {}
    for kind in neural.EMBEDDINGS:
        net = _net(kind, d, n_blocks=3)
        net.params["V"], net.params["W"] = V, W
        if kind == "neumise":
            net.bn.running_mean[:] = 0.0
            net.bn.running_var[:] = 1.0 - net.bn.eps
        outs[kind] = (neural.neumiss_forward if kind == "neumiss" else neural.neumise_forward)(net, xt)
    base = np.where(mask, 0.0, x)
    # NeuMiss moves only observed coordinates; NeuMISE moves only missing ones
    np.testing.assert_array_equal(outs["neumiss"][mask], 0.0)
    np.testing.assert_allclose(outs["neumise"][~mask], base[~mask], rtol=0, atol=1e-12)
    assert np.all(np.abs(outs["neumiss"][~mask] - base[~mask]) > 0)
    assert np.all(np.abs(outs["neumise"][mask]) > 0)


def test_embedding_kind_checked():
    with pytest.raises(ContractError):
        neural.neumise_forward(_net("neumiss"), np.zeros((1, 4)))


# -- training -------------------------------------------------------------------------


def test_constant_target_converges_to_constant():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(400, 3))
    y = 2.0 + 0.1 * rng.normal(size=400)
    net = Network(ArchSpec("mlp", width=8, depth=1), 3, rng, y_mean=0.0)
    xv = rng.normal(size=(200, 3))
    yv = 2.0 + 0.1 * rng.normal(size=200)
    neural.train_network(net, x, None, y, lambda n: np.mean((n.predict(xv) - yv) ** 2),
                         TrainConfig(lr=1e-2, max_epochs=200), rng)
    pred = net.predict(xv)
    assert abs(pred.mean() - 2.0) < 0.05 and np.std(pred) < 0.1
    assert np.mean((pred - yv) ** 2) == pytest.approx(0.01, rel=0.3)


def test_early_stop_fires_twelve_epochs_after_last_improvement():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(50, 2)), rng.normal(size=50)
    for p in (1, 5, 20):
        scores = iter([10.0 - e for e in range(p)] + [100.0] * 1000)
        net = _net("mlp", 2, width=3, depth=1)
        hist = neural.train_network(net, x, None, y, lambda _: next(scores), TrainConfig(max_epochs=500), rng)
        assert hist.best_epoch == p and hist.stopped_epoch == p + 12


def test_plateau_decay_and_best_weights_restored():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(50, 2)), rng.normal(size=50)
    net = _net("mlp", 2, width=3, depth=1)
    snaps = []

    def score(n):
        snaps.append(n.snapshot())
        return 5.0 if len(snaps) == 3 else 10.0 + len(snaps)

    hist = neural.train_network(net, x, None, y, score, TrainConfig(lr=1e-2, max_epochs=100), rng)
    assert hist.best_epoch == 3 and hist.stopped_epoch == 15
    assert hist.lr[13] == pytest.approx(1e-2 * 0.2) and hist.lr[12] == pytest.approx(1e-2)
    for k, v in net.params.items():
        np.testing.assert_array_equal(v, snaps[2][0][k])


def test_tiny_improvements_do_not_count():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(20, 2)), rng.normal(size=20)
    vals = iter([1.0] + [1.0 - 1e-6 * (i + 1) for i in range(100)])
    hist = neural.train_network(_net("mlp", 2, width=3, depth=1), x, None, y, lambda _: next(vals),
                                TrainConfig(max_epochs=100), rng)
    assert hist.best_epoch == 1 and hist.stopped_epoch == 13


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_carries_epoch():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(100, 2)) * 1e200
    y = rng.normal(size=100) * 1e200
    with pytest.raises(DivergenceError) as info:
        neural.train_network(_net("mlp", 2, width=3, depth=1), x, None, y, lambda _: 0.0,
                             TrainConfig(lr=1.0, max_epochs=5), rng)
    assert info.value.epoch == 1


def test_network_round_trip():
    rng = np.random.default_rng(3)
    net = Network(ArchSpec("neumise", width=5, depth=2, n_blocks=2), 3, rng, [0.1, 0.2, 0.3], [1.0, 2.0, 3.0], 0.5)
    x = rng.normal(size=(10, 3))
    m = rng.random((10, 3)) < 0.3
    arrays, attrs = net.to_arrays()
    back = Network.from_arrays(arrays, attrs)
    np.testing.assert_array_equal(back.predict(x, m), net.predict(x, m))


# -- grid search --------------------------------------------------------------------


def test_single_point_grid():
    space = {"lr": [1e-3], "weight_decay": [1e-5], "width": [50], "depth": [2]}
    assert neural.grid_search(space, lambda p, r: 1.0, 1, np.random.default_rng(0)) == \
        {"lr": 1e-3, "weight_decay": 1e-5, "width": 50, "depth": 2}


def test_rigged_grid_returns_dominant_point():
    best = {"lr": 5e-3, "weight_decay": 1e-4, "width": 250, "depth": 1}
    for seed in range(5):
        def score(p, rng):
            return rng.uniform(0.0, 0.1) if p == best else 1.0 + rng.uniform()

        assert neural.grid_search(neural.GRID_SPACE, score, 2, np.random.default_rng(seed)) == best


def test_grid_ties_prefer_small_networks():
    space = {"lr": [1e-3], "width": [500, 50, 250], "depth": [5, 1]}
    got = neural.grid_search(space, lambda p, r: 0.0, 1, np.random.default_rng(0))
    assert got["width"] == 50 and got["depth"] == 1


def test_grid_skips_non_finite_scores():
    space = {"lr": [1e-2, 1e-3]}
    got = neural.grid_search(space, lambda p, r: np.nan if p["lr"] == 1e-3 else 5.0, 1, np.random.default_rng(0))
    assert got["lr"] == 1e-2
