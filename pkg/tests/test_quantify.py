import math

import numpy as np
import pytest

from kplab import tensor as T
from kplab.errors import ConfigError, DegenerateFeatureError
from kplab.nn import Network, default_spec, init_params, rescale_layers
from kplab.quantify import (HALF_LOG_2PIE, QuantifierConfig, SigmaField, entropy_map, estimate_delta_f2,
                            optimize_sigma, optimize_sigma_batch, validation_loss)


def identity(x):
    return x.reshape(x.shape[0], -1)


def diagonal(w):
    wt = T.Tensor(np.asarray(w, float).ravel())
    return lambda x: x.reshape(x.shape[0], -1) * wt


def linear(W):
    return lambda x: x.reshape(x.shape[0], -1) @ T.Tensor(W)


PIXEL_GRID = dict(grid=(1, 1))


# -- delta_f2 ---------------------------------------------------------------------
def test_delta_f2_identity():
    x = np.zeros((1, 4, 4))
    got = estimate_delta_f2(identity, x, tau=0.01, n=256, seed=0)
    assert abs(got - 0.0016) / 0.0016 < 0.2


@pytest.mark.parametrize("seed", range(5))
def test_delta_f2_linear(seed):
    r = np.random.default_rng(seed)
    W = r.standard_normal((16, 6))
    got = estimate_delta_f2(linear(W), r.random((1, 4, 4)), tau=0.01, n=256, seed=seed)
    want = 1e-4 * np.sum(W ** 2)
    assert abs(got - want) / want < 0.2


def test_delta_f2_constant_feature():
    with pytest.raises(DegenerateFeatureError):
        estimate_delta_f2(lambda x: x.reshape(x.shape[0], -1) * 0.0, np.ones((1, 2, 2)), tau=0.1)


@pytest.mark.parametrize("bad", [dict(tau=0.0), dict(n=1)])
def test_delta_f2_preconditions(bad):
    kw = dict(tau=0.01, n=8) | bad
    with pytest.raises(ConfigError):
        estimate_delta_f2(identity, np.ones((1, 2, 2)), **kw)


# -- sigma oracles ----------------------------------------------------------------
@pytest.mark.parametrize("seed", range(3))
def test_identity_closed_form(seed):
    cfg = QuantifierConfig(seed=seed, **PIXEL_GRID)
    sf = optimize_sigma(identity, np.zeros((1, 4, 4)), cfg, delta_f2=0.0016)
    want = math.sqrt(1.0 * 0.0016 / 2)
    assert want == pytest.approx(0.02828, abs=1e-5)
    assert np.max(np.abs(sf.sigma - want) / want) < 0.05


def test_identity_closed_form_alpha_scaling():
    cfg = QuantifierConfig(alpha=4.0, **PIXEL_GRID)
    sf = optimize_sigma(identity, np.zeros((1, 4, 4)), cfg, delta_f2=0.0016)
    assert np.max(np.abs(sf.sigma - math.sqrt(4 * 0.0016 / 2)) / math.sqrt(4 * 0.0016 / 2)) < 0.05


def test_diagonal_linear_closed_form():
    w = np.array([1.0, 2.0, 0.5, 4.0] * 4).reshape(1, 4, 4)
    cfg = QuantifierConfig(seed=1, **PIXEL_GRID)
    d2 = 0.0016
    sf = optimize_sigma(diagonal(w), np.zeros((1, 4, 4)), cfg, delta_f2=d2)
    want = math.sqrt(d2 / 2) / np.abs(w[0])
    assert np.max(np.abs(sf.sigma - want) / want) < 0.05
    # doubling a weight halves sigma
    ratio = sf.sigma[:, 1] / sf.sigma[:, 0]
    np.testing.assert_allclose(ratio, 0.5, rtol=0.07)


def test_ignored_cell_hits_upper_bound():
    w = np.ones((1, 4, 4))
    w[0, 2, 3] = 0.0
    cfg = QuantifierConfig(n_steps=400, **PIXEL_GRID)
    sf = optimize_sigma(diagonal(w), np.zeros((1, 4, 4)), cfg, delta_f2=0.0016)
    assert sf.sigma[2, 3] == pytest.approx(100.0, rel=1e-9)
    H = entropy_map(sf, np.zeros((4, 4), bool)).H
    assert H[2, 3] == H.max() and not sf.degenerate


def test_all_cells_ignored_is_flagged_degenerate():
    cfg = QuantifierConfig(n_steps=300, **PIXEL_GRID)
    with pytest.warns(RuntimeWarning):
        sf = optimize_sigma(diagonal(np.zeros((1, 2, 2))), np.zeros((1, 2, 2)), cfg, delta_f2=1.0)
    assert sf.degenerate and sf.notes


def test_grid_cells_share_sigma():
    x = np.zeros((1, 8, 8))
    sf = optimize_sigma(identity, x, QuantifierConfig(grid=(4, 4)), delta_f2=0.0064 * 16)
    assert sf.sigma.shape == (2, 2)
    # every cell holds 16 identity pixels: stationarity gives sigma^2 * 16 / d2 = alpha / 2
    np.testing.assert_allclose(sf.sigma, math.sqrt(0.0064 * 16 / 2 / 16), rtol=0.05)


def test_grid_must_divide_input():
    with pytest.raises(ConfigError):
        optimize_sigma(identity, np.zeros((1, 6, 6)), QuantifierConfig(grid=(4, 4)), delta_f2=1.0)


@pytest.mark.parametrize("bad", [dict(alpha=0.0), dict(tau=-1.0), dict(sigma_init=1e3),
                                 dict(grid_mode="pixel"), dict(n_mc_delta=1)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        QuantifierConfig(**bad)


def test_shared_noise_mode_runs():
    cfg = QuantifierConfig(grid=(2, 2), grid_mode="shared_noise", n_steps=50)
    sf = optimize_sigma(identity, np.zeros((1, 4, 4)), cfg, delta_f2=0.0016)
    assert sf.sigma.shape == (2, 2) and np.all(sf.sigma > 0)


# -- entropy ----------------------------------------------------------------------
@pytest.mark.parametrize("sigma,H", [(1.0, 1.41894), (math.e, 2.41894)])
def test_entropy_plug_in(sigma, H):
    sf = SigmaField(np.full((2, 2), sigma), (1, 1))
    em = entropy_map(sf, np.eye(2, dtype=bool))
    np.testing.assert_allclose(em.H, H, atol=1e-5)
    assert HALF_LOG_2PIE == pytest.approx(1.41894, abs=1e-5)


def test_entropy_map_exact_relation(rng):
    sf = SigmaField(np.exp(rng.normal(size=(3, 3))), (1, 1))
    em = entropy_map(sf, np.zeros((3, 3), bool))
    assert np.array_equal(em.H, np.log(sf.sigma) + HALF_LOG_2PIE)
    assert em.background.all()


# -- real network -----------------------------------------------------------------
@pytest.fixture(scope="module")
def net():
    spec = default_spec(3, input_shape=(1, 16, 16))
    return Network(spec, init_params(spec, np.random.default_rng(4)))


@pytest.fixture(scope="module")
def probes():
    return np.random.default_rng(8).random((3, 1, 16, 16))


def test_validation_loss_decreases(net, probes):
    cfg = QuantifierConfig(n_steps=60, seed=2)
    for sf in optimize_sigma_batch(net.feature_fn("fc1"), probes, cfg, tap="fc1"):
        assert sf.loss_final <= sf.loss_initial
        again = validation_loss(net.feature_fn("fc1"), probes[sf.sample_id], sf.sigma, cfg, sf.delta_f2,
                                sf.sample_id)
        assert again == pytest.approx(sf.loss_final, rel=1e-9)


def test_quantifier_deterministic_and_batch_independent(net, probes):
    cfg = QuantifierConfig(n_steps=30, seed=5)
    f = net.feature_fn("fc1")
    a = optimize_sigma_batch(f, probes, cfg, sample_ids=[10, 11, 12])
    b = optimize_sigma_batch(f, probes, cfg, sample_ids=[10, 11, 12])
    assert all(x.sigma.tobytes() == y.sigma.tobytes() for x, y in zip(a, b))
    single = optimize_sigma(f, probes[1], cfg, sample_id=11)
    np.testing.assert_allclose(single.sigma, a[1].sigma, rtol=1e-9)


@pytest.mark.parametrize("tap", ["conv_top", "fc1", "fc2"])
def test_rescaling_leaves_entropy_unchanged(net, probes, tap):
    spec = net.spec
    first_dense = next(i for i, l in enumerate(spec.layers) if type(l).__name__ == "Dense")
    scaled = Network(spec, rescale_layers(spec, net.params, first_dense, 4.0))
    x = probes[:2]
    np.testing.assert_allclose(scaled.logits(x), net.logits(x), rtol=1e-12, atol=1e-12)
    cfg = QuantifierConfig(n_steps=40, seed=1)
    before = optimize_sigma_batch(net.feature_fn(tap), x, cfg, tap=tap)
    after = optimize_sigma_batch(scaled.feature_fn(tap), x, cfg, tap=tap)
    for s0, s1 in zip(before, after):
        assert np.max(np.abs(np.log(s0.sigma) - np.log(s1.sigma))) < 1e-2
