import numpy as np
import pytest

from amortcd import autodiff as ad
from amortcd.model import (
    InferenceModel, ModelConfig, embed_inputs, encoder_forward, forward, init_params,
    log_q,
)
from amortcd.scm import Dataset
from amortcd.suites import invariance_check

# nonzero v map so beliefs vary with the data and equivariance tests are not vacuous
CFG = ModelConfig(layers=2, width=16, key_size=4, heads=2, ff_size=32, head_v_init_gain=0.05)


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.fixture(scope="module")
def params():
    with ad.precision(np.float64):
        return init_params(CFG, rng(1))


def data(n, d, seed=0):
    r = rng(seed)
    mask = np.zeros((n, d))
    mask[n // 2:, 0] = 1
    return r.normal(size=(n, d)), mask


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(width=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(layers=0)
    with pytest.raises(ValueError):
        ModelConfig(dropout=1.0)


# ----------------------------------------------------------------------------
# embedding


def test_zero_embedding_map_gives_zero_tensor(params):
    p = params.copy()
    p["embed/w"].data[:] = 0
    p["embed/b"].data[:] = 0
    x, m = data(5, 3)
    assert not embed_inputs(x, m, p).data.any()


def test_embedding_shape_and_shared_map(params):
    x, m = data(6, 4)
    x[3] = x[2]
    m[3] = m[2]
    e = embed_inputs(x, m, params).data
    assert e.shape == (6, 4, CFG.width)
    np.testing.assert_array_equal(e[2], e[3])


def test_embedding_rejects_nan(params):
    x, m = data(4, 2)
    x[1, 1] = np.nan
    with pytest.raises(ValueError):
        embed_inputs(x, m, params)


# ----------------------------------------------------------------------------
# encoder


def test_encoder_row_and_column_equivariance(params):
    x, m = data(9, 5, seed=2)
    base = encoder_forward(embed_inputs(x, m, params), params, CFG).data
    rows = rng(3).permutation(9)
    cols = rng(4).permutation(5)
    by_rows = encoder_forward(embed_inputs(x[rows], m[rows], params), params, CFG).data
    by_cols = encoder_forward(embed_inputs(x[:, cols], m[:, cols], params), params, CFG).data
    np.testing.assert_allclose(by_rows, base[rows], atol=1e-10)
    np.testing.assert_allclose(by_cols, base[:, cols], atol=1e-10)


def test_encoder_degenerate_shape(params):
    out = encoder_forward(embed_inputs(np.ones((1, 1)), np.zeros((1, 1)), params), params, CFG)
    assert out.shape == (1, 1, CFG.width)
    assert np.all(np.isfinite(out.data))


def test_encoder_dropout_only_with_rng():
    cfg = ModelConfig(layers=1, width=8, key_size=4, heads=2, ff_size=8, dropout=0.5)
    with ad.precision(np.float64):
        p = init_params(cfg, rng(5))
        x, m = data(4, 3)
        e = embed_inputs(x, m, p)
        a = encoder_forward(e, p, cfg).data
        b = encoder_forward(e, p, cfg).data
        c = encoder_forward(e, p, cfg, rng(6)).data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


# ----------------------------------------------------------------------------
# edge head


def test_zero_head_maps_give_prior_bias(params):
    p = params.copy()
    for k in ("head/u/w", "head/u/b", "head/v/w", "head/v/b"):
        p[k].data[:] = 0
    x, m = data(5, 4)
    theta = forward(p, CFG, x, m).data
    off = ~np.eye(4, dtype=bool)
    np.testing.assert_allclose(theta[off], 1 / (1 + np.exp(3.0)), rtol=1e-12)
    assert theta[off][0] == pytest.approx(0.04743, abs=1e-5)


def test_beliefs_shape_range_and_zero_diagonal(params):
    x, m = data(7, 6)
    theta = InferenceModel(CFG, params).predict(Dataset(x, m))
    assert theta.shape == (6, 6)
    assert np.all(np.diag(theta) == 0)
    off = theta[~np.eye(6, dtype=bool)]
    assert np.all((off > 0) & (off < 1))


def test_variable_permutation_conjugates_beliefs(params):
    x, m = data(8, 5, seed=7)
    model = InferenceModel(CFG, params)
    theta = model.predict(Dataset(x, m))
    pi = rng(8).permutation(5)
    permuted = model.predict(Dataset(x[:, pi], m[:, pi]))
    np.testing.assert_allclose(permuted, theta[np.ix_(pi, pi)], atol=1e-12)


def test_batched_prediction_matches_single(params):
    model = InferenceModel(CFG, params)
    sets = [Dataset(*data(6, 4, seed=s)) for s in range(3)]
    batch = model.predict(sets)
    for k, ds in enumerate(sets):
        np.testing.assert_allclose(batch[k], model.predict(ds), atol=1e-12)


def test_invariance_property_on_fresh_model(params):
    ok, detail = invariance_check(params, CFG, sizes=((40, 6), (120, 12)), seed=9)
    assert ok, detail


def test_larger_inputs_than_training_sizes(params):
    x, m = data(500, 30, seed=10)
    theta = InferenceModel(CFG, params).predict(Dataset(x, m))
    off = theta[~np.eye(30, dtype=bool)]
    assert theta.shape == (30, 30) and np.all((off > 0) & (off < 1))


def test_untrained_model_outputs_prior_exactly():
    cfg = ModelConfig(layers=2, width=16, key_size=4, heads=2, ff_size=32)
    with ad.precision(np.float64):
        p = init_params(cfg, rng(14))
    x, m = data(9, 5, seed=15)
    theta = InferenceModel(cfg, p).predict(Dataset(x, m))
    off = theta[~np.eye(5, dtype=bool)]
    assert np.all(off == off[0]) and off[0] == pytest.approx(1 / (1 + np.exp(3.0)), rel=1e-12)


def test_zero_v_map_still_receives_gradient():
    cfg = ModelConfig(layers=2, width=16, key_size=4, heads=2, ff_size=32)
    x, m = data(6, 4, seed=16)
    g = np.array([[0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 0], [1, 0, 0, 0]])
    with ad.precision(np.float64):
        p = init_params(cfg, rng(17))
        grads = ad.backward(ad.scale(log_q(g, forward(p, cfg, x, m)), -1.0), p.params)
    assert np.any(grads["head/v/w"]) and np.any(grads["head/bias"])


def test_every_parameter_receives_gradient():
    with ad.precision(np.float64):
        p = init_params(CFG, rng(11))
        x, m = data(6, 4, seed=12)
        theta = forward(p, CFG, x, m)
        g = (rng(13).random((4, 4)) < 0.4).astype(float)
        np.fill_diagonal(g, 0)
        grads = ad.backward(ad.scale(log_q(g, theta), -1.0), p.params)
    dead = [k for k, v in grads.items() if not np.any(v)]
    assert dead == []


# ----------------------------------------------------------------------------
# log q


def test_log_q_uniform_beliefs():
    theta = np.array([[0.0, 0.5], [0.5, 0.0]])
    for g in ([[0, 0], [0, 0]], [[0, 1], [0, 0]], [[0, 1], [1, 0]]):
        assert float(log_q(np.array(g), theta).data) == pytest.approx(2 * np.log(0.5), abs=1e-12)


def test_log_q_at_clamp_boundary():
    g = np.array([[0, 1], [0, 0]])
    theta = np.array([[0.0, 1.0], [0.0, 0.0]])
    val = float(log_q(g, theta).data)
    assert val == pytest.approx(2 * np.log1p(-1e-7), rel=1e-6)
    assert abs(val) < 1e-6


def test_log_q_matches_elementwise_sum():
    r = rng(14)
    for _ in range(20):
        d = int(r.integers(2, 7))
        theta = r.uniform(0.01, 0.99, size=(d, d))
        g = (r.random((d, d)) < 0.3).astype(int)
        np.fill_diagonal(g, 0)
        total = 0.0
        for i in range(d):
            for j in range(d):
                if i != j:
                    total += np.log(theta[i, j]) if g[i, j] else np.log(1 - theta[i, j])
        assert float(log_q(g, theta).data) == pytest.approx(total, rel=1e-12)


def test_log_q_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        log_q(np.zeros((3, 3)), np.zeros((2, 2)))
