import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gvcc.fields import (
    Conditioning,
    GaussianMixtureField,
    GaussianMixturePrior,
    ToyField,
    ToyFieldWeights,
    TrainConfig,
    eval_field,
    flow_matching_loss,
    gaussian_score,
    gaussian_velocity,
    load_prior,
    save_prior,
    standard_normal_prior,
    train_toy_field,
)
from gvcc.flow import score_from_velocity


def gmm(dim=3, seed=0):
    r = np.random.default_rng(seed)
    return GaussianMixturePrior(np.array([0.2, 0.5, 0.3]), r.normal(0, 1.5, (3, dim)),
                                np.array([0.4, 0.8, 0.6]))


def test_single_gaussian_velocity_formula():
    p = standard_normal_prior((1,))
    for t in (0.1, 0.5, 0.9):
        x = np.array([0.7])
        assert gaussian_velocity(x, t, p)[0] == pytest.approx(
            (2 * t - 1) / ((1 - t) ** 2 + t * t) * 0.7, rel=1e-13)
    np.testing.assert_array_equal(gaussian_velocity(np.array([0.7]), 0.0, p), [-0.7])


def test_velocity_monte_carlo_regression():
    # regress x1 - x0 on x_t for N(0, s^2) data: slope is the analytic gain
    s, t, n = 0.7, 0.3, 1_000_000
    rng = np.random.default_rng(5)
    x0 = rng.normal(0, s, n)
    x1 = rng.standard_normal(n)
    xt = (1 - t) * x0 + t * x1
    slope = np.dot(xt, x1 - x0) / np.dot(xt, xt)
    p = GaussianMixturePrior(np.ones(1), np.zeros((1, 1)), np.array([s]))
    assert gaussian_velocity(np.array([1.0]), t, p)[0] == pytest.approx(slope, abs=5e-3)


def test_symmetric_mixture_zero_at_origin():
    p = GaussianMixturePrior(np.array([0.5, 0.5]), np.array([[1.5], [-1.5]]), np.array([0.5, 0.5]))
    for t in (0.2, 0.6, 0.95):
        assert gaussian_velocity(np.zeros(1), t, p)[0] == pytest.approx(0.0, abs=1e-15)


def test_score_examples():
    p = standard_normal_prior((1,))
    assert gaussian_score(np.array([1.0]), 0.5, p)[0] == pytest.approx(-2.0, rel=1e-14)
    q = GaussianMixturePrior(np.ones(1), np.array([[0.4]]), np.ones(1))
    assert gaussian_score(np.array([0.4 * 0.5]), 0.5, q)[0] == pytest.approx(0.0, abs=1e-15)


@given(st.floats(0.05, 1.0), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_score_matches_finite_difference(t, seed):
    p = gmm()
    x = np.random.default_rng(seed).normal(0, 1.5, 3)
    h = 1e-5
    fd = np.empty(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd[i] = (p.log_density(x + e, t) - p.log_density(x - e, t)) / (2 * h)
    np.testing.assert_allclose(gaussian_score(x, t, p), fd, rtol=1e-6, atol=1e-6)


def test_velocity_to_score_matches_closed_form():
    p = gmm(4, 3)
    rng = np.random.default_rng(9)
    for _ in range(200):
        t = rng.uniform(0.05, 1.0)
        x = rng.normal(0, 2, 4)
        got = score_from_velocity(x, t, gaussian_velocity(x, t, p))
        want = gaussian_score(x, t, p)
        assert np.linalg.norm(got - want) <= 1e-9 * np.linalg.norm(want)


def test_marginal_moments_match_samples():
    p = gmm(2, 1)
    rng = np.random.default_rng(2)
    x0 = p.sample(400_000, rng)
    t = 0.4
    xt = (1 - t) * x0 + t * rng.standard_normal(x0.shape)
    m, v = p.marginal_moments(t)
    np.testing.assert_allclose(xt.mean(0), m, atol=4 * np.sqrt(v.max() / 400_000))
    np.testing.assert_allclose(xt.var(0), v, rtol=0.02)


def test_prior_validation_and_io(tmp_path):
    with pytest.raises(ValueError):
        GaussianMixturePrior(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones(2))
    with pytest.raises(ValueError):
        GaussianMixturePrior(np.array([1.0]), np.zeros((2, 1)), np.ones(2))
    p = gmm()
    save_prior(tmp_path / "p.npz", p)
    q = load_prior(tmp_path / "p.npz")
    np.testing.assert_array_equal(q.means, p.means)


def test_analytic_field_ignores_conditioning():
    p = gmm(2)
    f = GaussianMixtureField(p)
    x = np.array([0.3, -0.2])
    c = Conditioning.first(np.zeros(2), 1)
    np.testing.assert_array_equal(f(x, 0.4, c), gaussian_velocity(x, 0.4, p))
    np.testing.assert_array_equal(eval_field(p, x, 0.4), gaussian_velocity(x, 0.4, p))


def test_conditioning_volume_and_pin():
    a, b = np.ones((2, 1, 1)), 2 * np.ones((2, 1, 1))
    c = Conditioning.dual(a, b, 4)
    assert c.positions == (0, 3)
    vol = c.volume((2, 1, 1))
    assert vol[0].sum() == 2 and vol[3].sum() == 4 and vol[1:3].sum() == 0
    x = np.zeros((4, 2, 1, 1))
    pinned = c.pin(x)
    np.testing.assert_array_equal(pinned[3], b)
    assert Conditioning.none(4).positions == ()
    assert Conditioning.first(a, 4).positions == (0,)


def small_weights(seed=0):
    data = np.random.default_rng(seed).normal(size=(16, 2, 1, 2, 2))
    return train_toy_field(data, TrainConfig(hidden=16, epochs=2, batch_size=8, seed=seed)).weights


def test_toy_field_shape_purity_and_format(tmp_path):
    w = small_weights()
    f = ToyField(w)
    x = np.random.default_rng(0).normal(size=(2, 1, 2, 2))
    c = Conditioning.first(x[0], 2)
    a, b = f(x, 0.3, c), f(x, 0.3, c)
    assert a.shape == x.shape and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)
    w.save(tmp_path / "w.gvcf")
    g = ToyField(ToyFieldWeights.load(tmp_path / "w.gvcf"))
    np.testing.assert_array_equal(g(x, 0.3, c), a)
    raw = (tmp_path / "w.gvcf").read_bytes()
    with pytest.raises(ValueError):
        ToyFieldWeights.from_bytes(raw[:-3])
    with pytest.raises(ValueError):
        ToyFieldWeights.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        f(np.zeros((3, 1, 2, 2)), 0.5)


def test_training_is_deterministic():
    a, b = small_weights(3), small_weights(3)
    for x, y in zip(a.arrays, b.arrays):
        np.testing.assert_array_equal(x, y)


def test_constant_zero_data():
    z = np.zeros((32, 2, 1, 2, 2))
    w = train_toy_field(z, TrainConfig(hidden=16, epochs=5, batch_size=8)).weights
    # target x1 - x0 = x1 has unit variance
    assert flow_matching_loss(ToyField(w), z[:4], n_draws=50) <= 0.2


def test_single_sample_memorisation():
    x = np.random.default_rng(0).normal(size=(1, 2, 1, 2, 2))
    res = train_toy_field(np.repeat(x, 64, 0), TrainConfig(hidden=32, epochs=10, batch_size=64))
    assert res.epoch_losses[-1] < 1e-3
