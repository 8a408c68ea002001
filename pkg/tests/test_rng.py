import numpy as np
import pytest

from selfsup.rng import RngStream, sample


def test_repeatability_bit_identical():
    a = sample("gaussian", RngStream(7, 3), mu=0.0, sigma=1.0, size=100)
    b = sample("gaussian", RngStream(7, 3), mu=0.0, sigma=1.0, size=100)
    assert np.array_equal(a, b)


def test_distinct_streams_decorrelated():
    N = 100_000
    a = sample("gaussian", RngStream(7, 0), mu=0.0, sigma=1.0, size=N)
    b = sample("gaussian", RngStream(7, 1), mu=0.0, sigma=1.0, size=N)
    corr = float(np.corrcoef(a, b)[0, 1])
    assert abs(corr) <= 3.0 / np.sqrt(N)


def test_child_streams_differ_from_parent_and_each_other():
    parent = RngStream(11, 0)
    c0 = parent.child(0)
    c1 = parent.child(1)
    draws = {
        tuple(sample("uniform", s, a=0.0, b=1.0, size=4))
        for s in (RngStream(11, 0), c0, c1)
    }
    assert len(draws) == 3


def test_poisson_zero_rate_degenerate():
    assert sample("poisson", RngStream(0, 0), lam=0.0) == 0


def test_bernoulli_sure_event():
    assert sample("bernoulli", RngStream(0, 0), p=1.0) == 1


def test_gaussian_moments_million_draws():
    z = sample("gaussian", RngStream(1234, 0), mu=0.0, sigma=1.0, size=1_000_000)
    assert -0.004 <= z.mean() <= 0.004
    assert 0.995 <= z.var() <= 1.005


@pytest.mark.parametrize("lam", [0.5, 2.0, 20.0])
def test_poisson_moments(lam):
    N = 100_000
    z = sample("poisson", RngStream(99, int(lam * 10)), lam=lam, size=N)
    se_mean = np.sqrt(lam / N)
    # Var of the sample variance from the fourth central moment mu4 = lam + 3 lam^2
    se_var = np.sqrt((lam + 2.0 * lam**2) / N)
    assert abs(z.mean() - lam) <= 3 * se_mean
    assert abs(z.var(ddof=1) - lam) <= 3 * se_var


@pytest.mark.parametrize(
    "kind,params,field",
    [
        ("gaussian", {"mu": 0.0, "sigma": -1.0}, "sigma"),
        ("poisson", {"lam": -2.0}, "lam"),
        ("binomial", {"k": 3, "p": 1.5}, "p"),
        ("beta", {"a": 0.0, "b": 1.0}, "a"),
        ("gamma", {"shape": 1.0, "rate": -1.0}, "rate"),
        ("bernoulli", {"p": -0.1}, "p"),
        ("uniform", {"a": 2.0, "b": 1.0}, "b"),
    ],
)
def test_domain_errors_name_field(kind, params, field):
    with pytest.raises(ValueError, match=field):
        sample(kind, RngStream(0, 0), **params)


def test_unknown_distribution_rejected():
    with pytest.raises(ValueError):
        sample("cauchy", RngStream(0, 0))


def test_missing_parameter_rejected():
    with pytest.raises(ValueError, match="lam"):
        sample("poisson", RngStream(0, 0))
