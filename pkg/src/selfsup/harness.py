"""Training loop, self-supervised hold-out validation, and the variance,
gradient-variance, sample-complexity, and pair-construction diagnostics."""

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .estimators import Estimator
from .losses import Batch
from .noise import CapabilityError, GaussianNoise, NoiseModel
from .optim import make_optimizer
from .rng import RngStream

__all__ = [
    "TrainConfig",
    "ExperimentReport",
    "ArraySource",
    "DivergenceError",
    "train",
    "variance_probe",
    "gradient_variance_probe",
    "gap_experiment",
    "noisier2noise_equivalence",
    "config_hash",
]


class DivergenceError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 64
    early_stop_patience: int = 20
    val_fraction: float = 0.2
    seed: int = 0
    select: str = "best_val"
    loss_spec: dict = None
    estimator_spec: dict = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr: must be > 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience: must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs: must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size: must be >= 1")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError("val_fraction: must be in (0, 1)")
        if self.select not in ("best_val", "final"):
            raise ValueError("select: must be 'best_val' or 'final'")

    def optimizer_kwargs(self):
        if self.optimizer == "sgd":
            return {"lr": self.lr}
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    def to_dict(self):
        out = {
            "optimizer": self.optimizer,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "early_stop_patience": self.early_stop_patience,
            "val_fraction": self.val_fraction,
            "seed": self.seed,
            "select": self.select,
        }
        if self.loss_spec is not None:
            out["loss_spec"] = self.loss_spec
        if self.estimator_spec is not None:
            out["estimator_spec"] = self.estimator_spec
        return out


def config_hash(config_dict: dict) -> str:
    """Canonical-JSON hash; any 'timestamp' key is excluded."""
    trimmed = {k: v for k, v in config_dict.items() if k != "timestamp"}
    blob = json.dumps(trimmed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class ExperimentReport:
    curves: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1
    final: dict = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0

    def to_dict(self):
        return {
            "curves": self.curves,
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
            "final": self.final,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }


class ArraySource:
    """In-memory data source with a deterministic train/val split and an
    optional oracle-scored test split."""

    def __init__(self, ys, ops=None, xs=None, test_ys=None, test_ops=None, test_xs=None):
        self.ys = np.asarray(ys, dtype=np.float64)
        if self.ys.ndim == 1:
            self.ys = self.ys[None, :]
        self.ops = ops
        self.xs = None if xs is None else np.asarray(xs, dtype=np.float64)
        self.test_ys = None if test_ys is None else np.asarray(test_ys, dtype=np.float64)
        self.test_ops = test_ops
        self.test_xs = None if test_xs is None else np.asarray(test_xs, dtype=np.float64)

    def _subset(self, idx):
        ops = self.ops
        if isinstance(ops, list):
            ops = [ops[i] for i in idx]
        xs = None if self.xs is None else self.xs[idx]
        return Batch(self.ys[idx], ops=ops, xs=xs)

    def split(self, val_fraction: float, rng: RngStream):
        N = self.ys.shape[0]
        n_val = max(1, int(round(val_fraction * N)))
        if n_val >= N:
            raise ValueError("val_fraction: leaves no training items")
        perm = rng.generator.permutation(N)
        return self._subset(perm[n_val:]), self._subset(perm[:n_val])

    def test_batch(self):
        if self.test_ys is None:
            return None
        return Batch(self.test_ys, ops=self.test_ops, xs=self.test_xs)


def _oracle_mse(f: Estimator, batch: Batch) -> float:
    pred = f.forward(batch.ys, ops=batch.ops)
    return float(np.mean(np.sum((pred - batch.xs) ** 2, axis=-1) / pred.shape[1]))


def train(config: TrainConfig, source: ArraySource, loss_fn, estimator: Estimator):
    """Minimize loss_fn over the estimator's parameters with early stopping
    on a self-supervised hold-out split.

    loss_fn(batch, f, with_grad, rng) -> LossValue or (LossValue, grad);
    all randomness must come from the rng argument so that a fixed config
    seed reproduces the run bit for bit.
    """
    rng = RngStream(config.seed)
    train_batch, val_batch = source.split(config.val_fraction, rng)
    opt = make_optimizer(config.optimizer, **config.optimizer_kwargs())
    f = estimator

    n_train = len(train_batch)
    best_val = np.inf
    best_params = f.get_params().copy()
    best_epoch = -1
    since_best = 0
    curves = []
    stopped = -1

    for epoch in range(config.epochs):
        order = rng.generator.permutation(n_train)
        for start in range(0, n_train, config.batch_size):
            idx = order[start : start + config.batch_size]
            ops = train_batch.ops
            if isinstance(ops, list):
                ops = [ops[i] for i in idx]
            xs = None if train_batch.xs is None else train_batch.xs[idx]
            mb = Batch(train_batch.ys[idx], ops=ops, xs=xs)
            lv, grad = loss_fn(mb, f, True, rng)
            if not (np.isfinite(lv.value) and np.all(np.isfinite(grad))):
                raise DivergenceError(
                    "loss diverged",
                    {"epoch": epoch, "step": start // config.batch_size,
                     "loss": float(lv.value)},
                )
            f.set_params(opt.step(f.get_params(), grad))

        tr = loss_fn(train_batch, f, False, rng)
        vl = loss_fn(val_batch, f, False, rng)
        if isinstance(tr, tuple):
            tr = tr[0]
        if isinstance(vl, tuple):
            vl = vl[0]
        if not (np.isfinite(tr.value) and np.isfinite(vl.value)):
            raise DivergenceError(
                "loss diverged",
                {"epoch": epoch, "step": -1, "loss": float(vl.value)},
            )
        row = {
            "epoch": epoch,
            "train_loss": float(tr.value),
            "val_loss": float(vl.value),
        }
        if val_batch.xs is not None:
            row["oracle_mse"] = _oracle_mse(f, val_batch)
        curves.append(row)

        if vl.value < best_val:
            best_val = float(vl.value)
            best_params = f.get_params().copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                stopped = epoch
                break

    if config.select == "best_val":
        f.set_params(best_params)
    # a moving training state (multiplier ascent) makes validation values
    # non-comparable across epochs; select="final" keeps the last parameters
    final = {"val_loss": best_val}
    if val_batch.xs is not None:
        final["oracle_mse"] = _oracle_mse(f, val_batch)
    test = source.test_batch()
    if test is not None:
        tv = loss_fn(test, f, False, rng)
        if isinstance(tv, tuple):
            tv = tv[0]
        final["test_loss"] = float(tv.value)
        if test.xs is not None:
            final["test_oracle_mse"] = _oracle_mse(f, test)
    report = ExperimentReport(
        curves=curves,
        best_epoch=best_epoch,
        stopped_epoch=stopped,
        final=final,
        config_hash=config_hash(config.to_dict()),
        seed=config.seed,
    )
    return f, report


# --- variance diagnostics -------------------------------------------------


def _require_iso_gaussian(noise: NoiseModel):
    if not isinstance(noise, GaussianNoise) or noise.kind != "gaussian_iso":
        raise CapabilityError(
            "variance diagnostics: closed forms need isotropic gaussian noise"
        )


def variance_probe(f: Estimator, prior, noise: NoiseModel, samples: int, n: int,
                   rng: RngStream) -> dict:
    """Monte-Carlo variances of the supervised and two-measurement losses on
    a fixed estimator, against the printed closed form
    3 sigma^4/n + (4 sigma^2/n) MSE and the re-derived
    2 sigma^4/n + (4 sigma^2/n) MSE."""
    _require_iso_gaussian(noise)
    sig2 = noise._sigma**2
    X = prior.sample(samples, rng)
    Z1 = rng.generator.standard_normal(X.shape)
    Z2 = rng.generator.standard_normal(X.shape)
    Y1 = X + noise._sigma * Z1
    Y2 = X + noise._sigma * Z2
    pred = f.forward(Y1)
    l_sup = np.mean((pred - X) ** 2, axis=-1)
    l_n2n = np.mean((pred - Y2) ** 2, axis=-1)
    var_sup = float(l_sup.var(ddof=1))
    var_n2n = float(l_n2n.var(ddof=1))
    delta = var_n2n - var_sup
    v = (l_n2n - l_n2n.mean()) ** 2 - (l_sup - l_sup.mean()) ** 2
    se_delta = float(v.std(ddof=1) / np.sqrt(samples))
    mse = float(l_sup.mean())
    return {
        "var_sup": var_sup,
        "var_n2n": var_n2n,
        "delta_measured": delta,
        "se_delta": se_delta,
        "mse": mse,
        "delta_printed": 3 * sig2**2 / n + 4 * sig2 * mse / n,
        "delta_derived": 2 * sig2**2 / n + 4 * sig2 * mse / n,
        "n": n,
        "sigma2": sig2,
    }


def gradient_variance_probe(f: Estimator, prior, noise: NoiseModel, samples: int,
                            rng: RngStream) -> dict:
    """Excess per-item gradient variance of the two-measurement loss over the
    supervised loss, against sigma^2 E||(1/n) df/dtheta||_F^2.

    Uses the gradient of the half squared error (1/(2n))||f - t||^2, for
    which the excess equals the formula exactly."""
    _require_iso_gaussian(noise)
    sig2 = noise._sigma**2
    X = prior.sample(samples, rng)
    n = X.shape[1]
    Y1 = X + noise._sigma * rng.generator.standard_normal(X.shape)
    Y2 = X + noise._sigma * rng.generator.standard_normal(X.shape)
    P = f.param_count
    G_sup = np.zeros((samples, P))
    G_n2n = np.zeros((samples, P))
    for i in range(samples):
        bundle = f.eval_bundle(Y1[i])
        G_sup[i] = bundle.vjp_params((bundle.value - X[i]) / n)
        G_n2n[i] = bundle.vjp_params((bundle.value - Y2[i]) / n)
    var_sup = float(np.sum(G_sup.var(axis=0, ddof=1)))
    var_n2n = float(np.sum(G_n2n.var(axis=0, ddof=1)))
    u = np.sum(G_n2n * G_n2n, axis=1) - np.sum(G_sup * G_sup, axis=1)
    mu_corr = float(np.sum(G_n2n.mean(axis=0) ** 2) - np.sum(G_sup.mean(axis=0) ** 2))
    gap = float(u.mean() - mu_corr)
    se_gap = float(u.std(ddof=1) / np.sqrt(samples))
    fro2 = f.param_jacobian_fro2(Y1)
    formula = float(sig2 * np.mean(fro2) / n**2)
    return {
        "var_sup_grad": var_sup,
        "var_n2n_grad": var_n2n,
        "gap_measured": gap,
        "se_gap": se_gap,
        "formula_term": formula,
    }


# --- sample-complexity experiment ------------------------------------------


def _erm_affine_scalar(loss_kind: str, prior, sigma: float, N: int, rng: RngStream):
    """Exact empirical-risk minimizer of a scalar affine map for the given
    training objective."""
    X = prior.sample(N, rng)[:, 0]
    Z = rng.generator.standard_normal(N)
    Y = X + sigma * Z
    if loss_kind == "sup":
        design = np.stack([Y, np.ones(N)], axis=1)
        sol, *_ = np.linalg.lstsq(design, X, rcond=None)
        return float(sol[0]), float(sol[1])
    if loss_kind == "n2n":
        Y2 = X + sigma * rng.generator.standard_normal(N)
        design = np.stack([Y, np.ones(N)], axis=1)
        sol, *_ = np.linalg.lstsq(design, Y2, rcond=None)
        return float(sol[0]), float(sol[1])
    if loss_kind == "sure":
        # minimize E_N (w y + b - y)^2 + 2 sigma^2 w in closed form
        ey = Y.mean()
        ey2 = float(np.mean(Y * Y))
        A = np.array([[ey2, ey], [ey, 1.0]])
        rhs = np.array([ey2 - sigma**2, ey])
        sol = np.linalg.solve(A, rhs)
        return float(sol[0]), float(sol[1])
    raise ValueError(f"loss_kind: unknown {loss_kind!r}")


def gap_experiment(Ns, repeats: int, prior, noise: NoiseModel, loss_kind: str,
                   rng: RngStream, test_size: int = 200000) -> dict:
    """Optimality gap (test MSE minus matched-draw oracle MSE) of trained
    scalar affine estimators as a function of the training-set size; fits
    the slope of log(gap) against log(N)."""
    _require_iso_gaussian(noise)
    sigma = noise._sigma
    Ns = [int(N) for N in Ns]
    gaps = np.zeros((repeats, len(Ns)))
    for r in range(repeats):
        Xt = prior.sample(test_size, rng)[:, 0]
        Yt = Xt + sigma * rng.generator.standard_normal(test_size)
        fstar = prior.posterior_mean(Yt[:, None], sigma**2 * np.eye(1))[:, 0]
        oracle_mse = np.mean((fstar - Xt) ** 2)
        for j, N in enumerate(Ns):
            w, b = _erm_affine_scalar(loss_kind, prior, sigma, N, rng)
            mse = np.mean((w * Yt + b - Xt) ** 2)
            gaps[r, j] = mse - oracle_mse
    logN = []
    logG = []
    dropped = 0
    for j, N in enumerate(Ns):
        for r in range(repeats):
            if gaps[r, j] > 0:
                logN.append(np.log(N))
                logG.append(np.log(gaps[r, j]))
            else:
                dropped += 1
    if dropped:
        warnings.warn(f"dropped {dropped} nonpositive gaps from the log-log fit")
    if len(set(logN)) < 2:
        raise RuntimeError("gap fit needs positive gaps at two or more distinct N")
    fit = stats.linregress(logN, logG)
    ci95 = 1.96 * fit.stderr
    return {
        "Ns": Ns,
        "gaps": gaps,
        "mean_gaps": gaps.mean(axis=0),
        "slope": float(fit.slope),
        "intercept": float(fit.intercept),
        "slope_ci95": float(ci95),
        "dropped": dropped,
    }


# --- pair-construction equivalence ------------------------------------------


def _oracle_affine_map(prior, noise_var: float, rng: RngStream, samples: int = 400000):
    """Affine projection of the posterior-mean map at the given input noise
    variance (exact for a single-component prior)."""
    means = np.asarray(prior.means)
    if means.shape[0] == 1:
        s0 = float(np.asarray(prior.covs)[0, 0, 0])
        mu0 = float(means[0, 0])
        w = s0 / (s0 + noise_var)
        return w, (1 - w) * mu0
    X = prior.sample(samples, rng)[:, 0]
    Y = X + np.sqrt(noise_var) * rng.generator.standard_normal(samples)
    fstar = prior.posterior_mean(Y[:, None], noise_var * np.eye(1))[:, 0]
    design = np.stack([Y, np.ones(samples)], axis=1)
    sol, *_ = np.linalg.lstsq(design, fstar, rcond=None)
    return float(sol[0]), float(sol[1])


def noisier2noise_equivalence(prior, sigma: float, tau: float, N: int,
                              rng: RngStream) -> dict:
    """Train on the extra-noise pair (y1 = y + sqrt(tau) sigma w -> y),
    apply the test-time correction ((1+tau)/tau) f*(y1) - (1/tau) y1, and
    compare the corrected affine map against the matched-alpha two-point
    pair training and the posterior-mean oracle at the same input law."""
    if tau <= 0:
        raise ValueError("tau: must be > 0")
    noise = GaussianNoise(sigma=sigma)
    X = prior.sample(N, rng)[:, 0]
    Y = X + sigma * rng.generator.standard_normal(N)
    Y1 = Y + np.sqrt(tau) * sigma * rng.generator.standard_normal(N)
    design = np.stack([Y1, np.ones(N)], axis=1)
    sol, *_ = np.linalg.lstsq(design, Y, rcond=None)
    w_star, b_star = float(sol[0]), float(sol[1])
    w_corr = ((1 + tau) * w_star - 1.0) / tau
    b_corr = (1 + tau) * b_star / tau

    # matched pair construction: alpha = tau/(1+tau) gives the same input law
    alpha = tau / (1.0 + tau)
    X2 = prior.sample(N, rng)[:, 0]
    Y2 = X2 + sigma * rng.generator.standard_normal(N)
    pair = noise.gr2r_pair(Y2[:, None], alpha, rng)
    design = np.stack([pair.y1[:, 0], np.ones(N)], axis=1)
    sol, *_ = np.linalg.lstsq(design, pair.y2[:, 0], rcond=None)
    w_r2r, b_r2r = float(sol[0]), float(sol[1])

    w_o, b_o = _oracle_affine_map(prior, (1 + tau) * sigma**2, rng)
    return {
        "params_corrected": (w_corr, b_corr),
        "params_r2r": (w_r2r, b_r2r),
        "params_oracle": (w_o, b_o),
        "max_param_gap_r2r": max(abs(w_corr - w_r2r), abs(b_corr - b_r2r)),
        "max_param_gap_oracle": max(abs(w_corr - w_o), abs(b_corr - b_o)),
        "alpha": alpha,
    }
