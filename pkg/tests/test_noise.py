import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfsup.noise import (
    GammaNoise,
    GaussianNoise,
    PoissonNoise,
    gr2r_pair,
    nll,
    snr,
    snr_split_check,
)
from selfsup.rng import RngStream


def _models():
    return {
        "gaussian_iso": GaussianNoise(sigma=1.0, n=4),
        "gaussian_aniso": GaussianNoise(cov=np.diag([0.5, 1.0, 2.0, 0.25])),
        "gaussian_correlated": GaussianNoise(filt=np.array([0.8, 0.4, 0.2]), n=4),
        "poisson": PoissonNoise(gain=0.5),
        "gamma": GammaNoise(shape_l=3.0),
    }


def test_zero_noise_identity():
    x = np.array([1.0, -2.0, 3.0])
    out = GaussianNoise(sigma=0.0, n=3).corrupt(x, RngStream(0, 0))
    assert np.array_equal(out, x)


def test_poisson_zero_rate():
    out = PoissonNoise(gain=1.0).corrupt(np.zeros(5), RngStream(0, 0))
    assert np.array_equal(out, np.zeros(5))


def test_gamma_moments():
    N = 100_000
    x = np.ones(1)
    y = GammaNoise(shape_l=3.0).corrupt(np.broadcast_to(x, (N, 1)), RngStream(3, 0))
    var = 1.0 / 3.0
    se_mean = np.sqrt(var / N)
    # mu4 = (3 + 6/l) var^2 for Gamma
    mu4 = (3 + 6 / 3.0) * var**2
    se_var = np.sqrt((mu4 - var**2) / N)
    assert abs(y.mean() - 1.0) <= 3 * se_mean
    assert abs(y.var(ddof=1) - var) <= 3 * se_var


def test_mean_preservation_all_kinds():
    N = 100_000
    rng = RngStream(17, 0)
    for name, model in _models().items():
        x = np.array([2.0, 6.0, 1.5, 3.0])
        Y = model.corrupt(np.broadcast_to(x, (N, 4)), rng)
        se = Y.std(axis=0, ddof=1) / np.sqrt(N)
        assert np.all(np.abs(Y.mean(axis=0) - x) <= 3 * se), name


def test_gaussian_symmetric_split():
    model = GaussianNoise(sigma=1.0, n=3)
    y = np.array([1.0, 2.0, 3.0])
    pair = model.gr2r_pair(y, 0.5, RngStream(1, 0))
    assert np.allclose(pair.y1 + pair.y2, 2 * y, atol=1e-12)


def test_poisson_half_split_identity():
    model = PoissonNoise(gain=1.0)
    z = np.array([4.0, 0.0, 7.0])
    pair = model.gr2r_pair(z, 0.5, RngStream(2, 0))
    assert np.allclose(pair.y1 + pair.y2, 2 * z, atol=1e-12)
    # y1 = 2(z - w), y2 = 2w for integer w between 0 and z
    w = pair.y2 / 2.0
    assert np.all(w == np.rint(w))
    assert np.all((0 <= w) & (w <= z))


@pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9])
def test_affine_reconstruction_exact(alpha):
    rng = RngStream(23, int(alpha * 10))
    for name, model in _models().items():
        x = np.array([2.0, 6.0, 1.5, 3.0])
        y = model.corrupt(np.broadcast_to(x, (64, 4)), rng)
        pair = model.gr2r_pair(y, alpha, rng)
        recon = (1 - alpha) * pair.y1 + alpha * pair.y2
        assert np.allclose(recon, y, atol=1e-9), name
        # equivalent form used by the NEF rows
        y2 = y / alpha - (1 - alpha) / alpha * pair.y1
        assert np.allclose(y2, pair.y2, atol=1e-8), name


@pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9])
def test_pair_decorrelated_and_variances(alpha):
    N = 100_000
    rng = RngStream(31, int(alpha * 10))
    for name, model in _models().items():
        x = np.array([2.0, 6.0, 1.5, 3.0])
        Y = model.corrupt(np.broadcast_to(x, (N, 4)), rng)
        pair = model.gr2r_pair(Y, alpha, rng)
        a = pair.y1 - x
        b = pair.y2 - x
        prod = a * b
        se = prod.std(axis=0, ddof=1) / np.sqrt(N)
        assert np.all(np.abs(prod.mean(axis=0)) <= 3 * se), name
        var_y = Y.var(axis=0, ddof=1)
        for arr, scale in ((pair.y1, 1 - alpha), (pair.y2, alpha)):
            v = arr.var(axis=0, ddof=1)
            target = var_y / scale
            # variance-of-variance bound from normal theory, inflated for skew
            se_v = 4.0 * v * np.sqrt(2.0 / N)
            assert np.all(np.abs(v - target) <= se_v + 3e-2 * target), name


def test_snr_constant_is_infinite():
    assert snr(np.ones((10, 3))) == np.inf


def test_snr_split_ratios():
    model = GaussianNoise(sigma=1.0, n=4)
    x = np.full(4, 2.0)  # ||x||^2 / n = 4
    out = snr_split_check(model, x, alpha=0.1, n_draws=100_000, rng=RngStream(41, 0))
    assert abs(out["ratio_y1"] - 0.9) <= 0.02


def test_snr_split_symmetric_alpha_half():
    model = GaussianNoise(sigma=1.0, n=4)
    x = np.full(4, 2.0)
    out = snr_split_check(model, x, alpha=0.5, n_draws=100_000, rng=RngStream(43, 0))
    assert abs(out["snr_y1"] - out["snr_y2"]) <= 0.05 * out["snr_y"]


def test_nll_gaussian_zero_residual():
    model = GaussianNoise(sigma=1.0, n=3)
    y = np.array([1.0, 2.0, 3.0])
    assert nll(model, y, y) == 0.0


def test_nll_poisson_plugin():
    model = PoissonNoise(gain=1.0)
    assert abs(nll(model, np.array([1.0]), np.array([1.0])) - 1.0) <= 1e-12


def test_nll_gamma_minimized_at_y():
    model = GammaNoise(shape_l=2.0)
    y = np.array([3.0])
    base = nll(model, y, y)
    for u in [2.0, 2.5, 2.9, 3.1, 3.5, 4.0]:
        assert nll(model, np.array([u]), y) > base


def test_nll_domain_errors():
    with pytest.raises(ValueError):
        nll(PoissonNoise(1.0), np.array([0.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        nll(GammaNoise(2.0), np.array([-1.0]), np.array([1.0]))


def test_poisson_noninteger_counts_rejected():
    with pytest.raises(ValueError, match="integer"):
        PoissonNoise(gain=1.0).gr2r_pair(np.array([1.5]), 0.5, RngStream(0, 0))


def test_gamma_zero_signal_rejected():
    with pytest.raises(ValueError, match="x"):
        GammaNoise(shape_l=2.0).corrupt(np.array([0.0]), RngStream(0, 0))


def test_poisson_negative_signal_rejected():
    with pytest.raises(ValueError, match="x"):
        PoissonNoise(gain=1.0).corrupt(np.array([-1.0]), RngStream(0, 0))


@pytest.mark.parametrize("alpha", [-0.1, 0.0, 1.0, 1.3])
def test_alpha_domain(alpha):
    with pytest.raises(ValueError, match="alpha"):
        gr2r_pair(GaussianNoise(sigma=1.0, n=2), np.zeros(2), alpha, RngStream(0, 0))


def test_correlated_noise_covariance_matches_filter():
    filt = np.array([0.8, 0.4, 0.2])
    model = GaussianNoise(filt=filt, n=6)
    N = 200_000
    draws = model.draw((N, 6), RngStream(53, 0))
    emp = draws.T @ draws / N
    S = model.cov_dense()
    assert np.linalg.norm(emp - S) <= 0.02 * np.linalg.norm(S)


def test_aniso_requires_pd():
    with pytest.raises(ValueError, match="cov"):
        GaussianNoise(cov=np.diag([1.0, 0.0]))


@settings(max_examples=25, deadline=None)
@given(
    alpha=st.floats(0.05, 0.95),
    seed=st.integers(0, 2**31 - 1),
)
def test_property_affine_identity_poisson(alpha, seed):
    model = PoissonNoise(gain=1.0)
    y = np.array([0.0, 3.0, 11.0, 2.0])
    pair = model.gr2r_pair(y, alpha, RngStream(seed, 0))
    assert np.allclose((1 - alpha) * pair.y1 + alpha * pair.y2, y, atol=1e-10)
