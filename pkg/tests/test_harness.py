import json

import numpy as np
import pytest

from selfsup.estimators import AffineEstimator
from selfsup.harness import (
    ArraySource,
    DivergenceError,
    TrainConfig,
    config_hash,
    gap_experiment,
    gradient_variance_probe,
    noisier2noise_equivalence,
    train,
    variance_probe,
)
from selfsup.losses import Batch, loss_r2r, loss_sup, loss_sure, loss_unsure, unsure_inner_max
from selfsup.masks import identity_basis
from selfsup.noise import CapabilityError, GaussianNoise, PoissonNoise
from selfsup.optim import Adam, Sgd, make_optimizer
from selfsup.priors import AtomPrior, GmmPrior
from selfsup.rng import RngStream


def affine_const(n, b):
    f = AffineEstimator(n)
    f.W = np.zeros((n, n))
    f.b = np.asarray(b, dtype=np.float64)
    return f


# --- optimizers ----------------------------------------------------------


def test_sgd_step_arithmetic():
    opt = Sgd(lr=0.1)
    theta = np.array([1.0, -2.0])
    out = opt.step(theta, np.array([10.0, 10.0]))
    assert np.allclose(out, [0.0, -3.0])


def test_zero_gradient_is_noop():
    theta = np.array([0.3, -0.7, 2.0])
    for opt in (Sgd(lr=0.5), Adam(lr=0.5)):
        out = opt.step(theta, np.zeros(3))
        assert np.array_equal(out, theta)


def test_adam_first_step_bias_correction():
    # after one step m_hat = g and v_hat = g^2, so the update is
    # lr * g / (|g| + eps), independent of the gradient magnitude
    opt = Adam(lr=0.01, eps=1e-8)
    theta = np.zeros(2)
    g = np.array([100.0, -0.001])
    out = opt.step(theta, g)
    want = -0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(out, want, rtol=1e-12)


def test_optimizer_validation():
    with pytest.raises(ValueError):
        Sgd(lr=0.0)
    with pytest.raises(ValueError):
        Adam(lr=-1.0)
    with pytest.raises(ValueError):
        Adam(beta1=1.0)
    with pytest.raises(ValueError):
        make_optimizer("newton")
    assert make_optimizer("adam", lr=0.1).lr == 0.1


# --- config and source ---------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(early_stop_patience=0)
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(select="median")


def test_config_hash_excludes_timestamp():
    a = config_hash({"lr": 0.1, "seed": 3})
    b = config_hash({"seed": 3, "lr": 0.1, "timestamp": "2026-01-01"})
    assert a == b
    assert config_hash({"lr": 0.2, "seed": 3}) != a


def test_array_source_split_deterministic():
    ys = np.arange(20, dtype=np.float64).reshape(10, 2)
    src = ArraySource(ys, xs=ys + 1)
    tr1, va1 = src.split(0.2, RngStream(5))
    tr2, va2 = src.split(0.2, RngStream(5))
    assert np.array_equal(tr1.ys, tr2.ys)
    assert np.array_equal(va1.ys, va2.ys)
    assert len(va1) == 2 and len(tr1) == 8
    assert va1.xs is not None


def test_array_source_split_leaves_training_items():
    src = ArraySource(np.ones((2, 1)))
    with pytest.raises(ValueError):
        src.split(0.9, RngStream(0))


# --- training loop -------------------------------------------------------


def sure_loss_fn(sig2):
    def fn(batch, f, with_grad, rng):
        return loss_sure(batch, f, sig2, with_grad=with_grad)

    return fn


def sup_loss_fn(batch, f, with_grad, rng):
    return loss_sup(batch, f, with_grad=with_grad)


def test_train_sure_reaches_posterior_mean_map():
    # scalar conjugate testbed: prior N(0,1), noise N(0,1), best map y/2;
    # the self-supervised hold-out epoch also scores near the oracle best
    prior = GmmPrior(means=[[0.0]], covs=[[[1.0]]], weights=[1.0])
    rng = RngStream(42)
    N, sig = 32768, 1.0
    X = prior.sample(N, rng)
    Y = X + sig * rng.generator.standard_normal(X.shape)
    cfg = TrainConfig(lr=5e-3, epochs=300, batch_size=64, early_stop_patience=40, seed=1)

    f = AffineEstimator(1, rng=RngStream(9))
    f, rep = train(cfg, ArraySource(Y, xs=X), sure_loss_fn(sig**2), f)
    assert abs(f.W[0, 0] - 0.5) < 1e-2
    assert abs(f.b[0]) < 1e-2

    # supervised training on the same data finds the same map
    f2 = AffineEstimator(1, rng=RngStream(9))
    f2, _ = train(cfg, ArraySource(Y, xs=X), sup_loss_fn, f2)
    assert abs(f.W[0, 0] - f2.W[0, 0]) < 1e-2
    assert abs(f.b[0] - f2.b[0]) < 1e-2

    # hold-out proxy: oracle MSE at the selected epoch is within 5% of the
    # best oracle MSE seen across epochs
    oracle = [row["oracle_mse"] for row in rep.curves]
    assert rep.curves[rep.best_epoch]["oracle_mse"] <= 1.05 * min(oracle)
    assert rep.best_epoch == int(np.argmin([row["val_loss"] for row in rep.curves]))
    assert rep.config_hash == config_hash(cfg.to_dict())


def test_train_misspecified_sure_loses_to_unsure():
    # noise variance assumed 4x true: the plug-in map over-contracts, the
    # self-tuned multiplier version stays near the zero-estimator MSE
    s0, sig = 0.2, 1.0
    prior = GmmPrior(means=[[0.0]], covs=[[[s0]]], weights=[1.0])
    rng = RngStream(50)
    N = 8192
    X = prior.sample(N, rng)
    Y = X + sig * rng.generator.standard_normal(X.shape)

    cfg = TrainConfig(lr=5e-3, epochs=200, batch_size=64, early_stop_patience=200, seed=1)
    fm = AffineEstimator(1, rng=RngStream(9))
    fm, _ = train(cfg, ArraySource(Y), sure_loss_fn(4.0), fm)
    mse_mis = float(np.mean((fm.forward(Y) - X) ** 2))

    basis = identity_basis(1)
    state = {"eta": np.zeros(1)}

    def unsure_fn(batch, f, with_grad, rng2):
        if with_grad:
            state["eta"] = unsure_inner_max(
                batch, f, basis, steps=1, lr=5e-3, eta0=state["eta"]
            )
            return loss_unsure(batch, f, basis, state["eta"], with_grad=True)
        return loss_unsure(batch, f, basis, state["eta"])

    cfg_u = TrainConfig(
        lr=5e-3, epochs=200, batch_size=64, early_stop_patience=200, seed=1,
        select="final",
    )
    fu = AffineEstimator(1, rng=RngStream(9))
    fu, _ = train(cfg_u, ArraySource(Y), unsure_fn, fu)
    mse_un = float(np.mean((fu.forward(Y) - X) ** 2))

    assert mse_mis > mse_un
    # the self-tuned multiplier lands at E[y^2] and the map at the
    # zero estimator: MSE ~ prior variance
    assert abs(mse_un - s0) / s0 < 0.10
    assert abs(state["eta"][0] - (s0 + sig**2)) / (s0 + sig**2) < 0.10


def test_train_divergence_diagnostic():
    calls = {"k": 0}

    def bad_fn(batch, f, with_grad, rng):
        calls["k"] += 1
        lv = loss_sup(Batch(batch.ys, xs=batch.ys), f, with_grad=with_grad)
        if calls["k"] >= 3 and with_grad:
            from selfsup.losses import LossValue

            return LossValue(np.full(len(batch), np.nan)), np.zeros(f.param_count)
        return lv

    f = AffineEstimator(2, rng=RngStream(1))
    cfg = TrainConfig(epochs=5, batch_size=4, seed=0)
    with pytest.raises(DivergenceError) as exc:
        train(cfg, ArraySource(np.ones((32, 2))), bad_fn, f)
    assert set(exc.value.diagnostic) == {"epoch", "step", "loss"}


def test_train_deterministic_reports():
    noise = GaussianNoise(sigma=0.5)

    def r2r_fn(batch, f, with_grad, rng):
        return loss_r2r(batch, f, noise, 0.3, rng=rng, with_grad=with_grad)

    rng = RngStream(60)
    Y = rng.generator.standard_normal((256, 2)) + 1.0
    cfg = TrainConfig(lr=1e-2, epochs=8, batch_size=32, early_stop_patience=8, seed=7)
    out = []
    for _ in range(2):
        f = AffineEstimator(2, rng=RngStream(3))
        f, rep = train(cfg, ArraySource(Y.copy()), r2r_fn, f)
        out.append((json.dumps(rep.to_dict(), sort_keys=True), f.get_params().copy()))
    assert out[0][0] == out[1][0]
    assert np.array_equal(out[0][1], out[1][1])


def test_train_early_stop_at_patience():
    noise = GaussianNoise(sigma=1.0)

    def r2r_fn(batch, f, with_grad, rng):
        return loss_r2r(batch, f, noise, 0.5, rng=rng, with_grad=with_grad)

    rng = RngStream(61)
    Y = rng.generator.standard_normal((200, 2))
    cfg = TrainConfig(
        lr=1e-4, epochs=100, batch_size=50, early_stop_patience=3, seed=11
    )
    f = AffineEstimator(2, rng=RngStream(4))
    f, rep = train(cfg, ArraySource(Y), r2r_fn, f)
    assert rep.stopped_epoch >= 0
    vals = [row["val_loss"] for row in rep.curves]
    assert rep.best_epoch == int(np.argmin(vals))
    assert rep.stopped_epoch == rep.best_epoch + 3


# --- loss variance probe --------------------------------------------------


def test_variance_probe_perfect_estimator_derived():
    atom = [1.0, -0.5, 2.0, 0.0]
    prior = AtomPrior([atom])
    f = affine_const(4, atom)
    out = variance_probe(f, prior, GaussianNoise(sigma=1.0), 20000, 4, RngStream(70))
    assert out["mse"] == 0.0
    assert abs(out["delta_measured"] - out["delta_derived"]) <= 3 * out["se_delta"]


@pytest.mark.xfail(
    strict=True,
    reason="printed closed form 3 sigma^4/n overstates the excess variance; "
    "the exact second-moment computation gives 2 sigma^4/n + 4 sigma^2 MSE/n "
    "(the two agree only at n = 1 when the squared bias is folded in)",
)
def test_variance_probe_perfect_estimator_printed_formula():
    atom = [1.0, -0.5, 2.0, 0.0]
    prior = AtomPrior([atom])
    f = affine_const(4, atom)
    out = variance_probe(f, prior, GaussianNoise(sigma=1.0), 20000, 4, RngStream(70))
    assert abs(out["delta_measured"] - out["delta_printed"]) <= 3 * out["se_delta"]


def test_variance_probe_halves_when_n_doubles():
    deltas = {}
    for n in (4, 8):
        atom = list(np.linspace(-1, 2, n))
        f = affine_const(n, atom)
        out = variance_probe(
            f, AtomPrior([atom]), GaussianNoise(sigma=1.0), 40000, n, RngStream(71)
        )
        deltas[n] = out["delta_measured"]
    assert abs(deltas[8] / deltas[4] - 0.5) < 0.06


def test_variance_probe_random_affine():
    prior = GmmPrior(
        means=[[-1.0, 0.0, 1.0], [1.0, 0.5, -0.5]],
        covs=[np.eye(3) * 0.4, np.eye(3) * 0.7],
        weights=[0.5, 0.5],
    )
    f = AffineEstimator(3, rng=RngStream(8))
    out = variance_probe(f, prior, GaussianNoise(sigma=0.8), 30000, 3, RngStream(72))
    assert abs(out["delta_measured"] - out["delta_derived"]) <= 3 * out["se_delta"]


def test_variance_probe_needs_gaussian():
    f = affine_const(2, [1.0, 1.0])
    with pytest.raises(CapabilityError):
        variance_probe(f, AtomPrior([[1.0, 1.0]]), PoissonNoise(gain=1.0), 100, 2, RngStream(0))


# --- gradient variance probe -----------------------------------------------


def test_gradient_probe_zero_noise_zero_gap():
    prior = GmmPrior(means=[[0.5, -0.5]], covs=[np.eye(2)], weights=[1.0])
    f = AffineEstimator(2, rng=RngStream(5))
    out = gradient_variance_probe(f, prior, GaussianNoise(sigma=0.0), 500, RngStream(73))
    assert out["gap_measured"] == 0.0
    assert out["formula_term"] == 0.0


def test_gradient_probe_affine_matches_formula():
    prior = GmmPrior(
        means=[[-1.0, 1.0], [1.0, 0.0]],
        covs=[np.eye(2) * 0.5, np.eye(2) * 0.5],
        weights=[0.5, 0.5],
    )
    f = AffineEstimator(2, rng=RngStream(6))
    out = gradient_variance_probe(f, prior, GaussianNoise(sigma=0.7), 4000, RngStream(74))
    assert abs(out["gap_measured"] - out["formula_term"]) <= 3 * out["se_gap"]


def test_gradient_probe_sigma_doubling_quadruples_term():
    # the sigma^2 factor quadruples; the Jacobian average drifts only at
    # second order for small sigma
    prior = GmmPrior(means=[[0.0]], covs=[[[1.0]]], weights=[1.0])
    f = AffineEstimator(1, rng=RngStream(7))
    t1 = gradient_variance_probe(f, prior, GaussianNoise(sigma=0.1), 2000, RngStream(75))
    t2 = gradient_variance_probe(f, prior, GaussianNoise(sigma=0.2), 2000, RngStream(75))
    ratio = t2["formula_term"] / t1["formula_term"]
    assert 3.8 <= ratio <= 4.3


# --- gap experiment ---------------------------------------------------------


def test_gap_experiment_slope_and_ordering():
    prior = GmmPrior(
        means=[[-1.0], [1.5]], covs=[[[0.4]], [[0.6]]], weights=[0.5, 0.5]
    )
    noise = GaussianNoise(sigma=1.0)
    Ns = [64, 256, 1024]
    out_sure = gap_experiment(Ns, 8, prior, noise, "sure", RngStream(80), test_size=60000)
    out_sup = gap_experiment(Ns, 8, prior, noise, "sup", RngStream(81), test_size=60000)
    assert out_sure["slope"] < 0
    mg = out_sure["mean_gaps"]
    assert mg[0] > mg[1] > mg[2]
    se_sure = out_sure["gaps"].std(axis=0, ddof=1) / np.sqrt(8)
    se_sup = out_sup["gaps"].std(axis=0, ddof=1) / np.sqrt(8)
    assert np.all(out_sup["mean_gaps"] <= mg + 2 * (se_sure + se_sup))


def test_gap_experiment_drops_nonpositive_with_warning():
    prior = GmmPrior(means=[[0.0]], covs=[[[1.0]]], weights=[1.0])
    noise = GaussianNoise(sigma=1.0)
    with pytest.warns(UserWarning, match="nonpositive"):
        out = gap_experiment(
            [5000, 20000], 5, prior, noise, "sup", RngStream(82), test_size=2000
        )
    assert out["dropped"] > 0


def test_gap_experiment_unknown_loss():
    prior = GmmPrior(means=[[0.0]], covs=[[[1.0]]], weights=[1.0])
    with pytest.raises(ValueError):
        gap_experiment([32], 2, prior, GaussianNoise(sigma=1.0), "mystery", RngStream(0))


# --- noisier2noise equivalence ----------------------------------------------


def test_noisier2noise_corrected_map_matches():
    prior = GmmPrior(means=[[0.3]], covs=[[[1.0]]], weights=[1.0])
    out = noisier2noise_equivalence(prior, sigma=1.0, tau=1.0, N=200000, rng=RngStream(90))
    assert out["max_param_gap_oracle"] <= 1e-2
    assert out["max_param_gap_r2r"] <= 2e-2
    # matched input law: alpha = tau/(1+tau)
    assert abs(out["alpha"] - 0.5) < 1e-12


def test_noisier2noise_variance_grows_at_small_tau():
    # the correction factor (1+tau)/tau blows up as tau -> 0: repeated
    # training shows parameter variance decreasing in tau
    prior = GmmPrior(means=[[0.3]], covs=[[[1.0]]], weights=[1.0])
    rng = RngStream(91)
    var_by_tau = []
    for tau in (0.25, 1.0, 4.0):
        ws = [
            noisier2noise_equivalence(prior, 1.0, tau, 2000, rng)["params_corrected"][0]
            for _ in range(120)
        ]
        var_by_tau.append(np.var(ws, ddof=1))
    assert var_by_tau[0] > var_by_tau[1] > var_by_tau[2]


def test_noisier2noise_validates_tau():
    prior = GmmPrior(means=[[0.0]], covs=[[[1.0]]], weights=[1.0])
    with pytest.raises(ValueError):
        noisier2noise_equivalence(prior, 1.0, 0.0, 100, RngStream(0))
