"""Signal priors with closed-form or brute-force Bayesian oracles.

GmmPrior gives exact marginal scores, posterior means and MMSE values for
Gaussian measurement noise.  AtomPrior is a finite support prior whose
posterior is computable by direct enumeration under any of the noise
models, including partially observed coordinates; it is the brute-force
oracle used to validate self-supervised losses on non-Gaussian and
incomplete data.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln, logsumexp

from .linalg import as_f64, psd_sqrt
from .noise import GammaNoise, GaussianNoise, NoiseModel, PoissonNoise
from .rng import RngStream


def _as_cov(noise_cov, n: int) -> np.ndarray:
    """Normalize scalar variance / diagonal / dense input to dense (n, n)."""
    arr = np.asarray(noise_cov, dtype=np.float64)
    if arr.ndim == 0:
        return float(arr) * np.eye(n)
    if arr.ndim == 1:
        if arr.shape[0] != n:
            raise ValueError("noise_cov: diagonal length mismatch")
        return np.diag(arr)
    if arr.shape != (n, n):
        raise ValueError("noise_cov: shape mismatch")
    return arr


class GmmPrior:
    """x ~ sum_k w_k N(m_k, C_k); component covariances may be singular."""

    def __init__(self, means, covs, weights=None):
        self.means = as_f64(np.atleast_2d(means), "means")
        K, n = self.means.shape
        covs = np.asarray(covs, dtype=np.float64)
        if covs.ndim == 0:
            covs = np.broadcast_to(covs, (K,))
        if covs.ndim == 1:
            if covs.shape[0] != K:
                raise ValueError("covs: one variance per component required")
            covs = covs[:, None, None] * np.eye(n)[None, :, :]
        if covs.shape != (K, n, n):
            raise ValueError("covs: must be (K, n, n)")
        if np.min(np.linalg.eigvalsh(covs)) < -1e-12:
            raise ValueError("covs: components must be PSD")
        self.covs = covs
        if weights is None:
            weights = np.full(K, 1.0 / K)
        self.weights = as_f64(weights, "weights")
        if self.weights.shape != (K,) or np.any(self.weights < 0):
            raise ValueError("weights: nonnegative, one per component")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights: must sum to 1")
        self.K, self.n = K, n
        self._sqrts = np.stack([psd_sqrt(C) for C in covs])

    def sample(self, size: int, rng: RngStream) -> np.ndarray:
        gen = rng.generator
        ks = gen.choice(self.K, size=size, p=self.weights)
        eps = gen.standard_normal((size, self.n))
        return self.means[ks] + np.einsum("ij,ikj->ik", eps, self._sqrts[ks])

    def _noisy_factors(self, noise_cov):
        S = _as_cov(noise_cov, self.n)
        invs, logdets = [], []
        for C in self.covs:
            M = C + S
            sign, logdet = np.linalg.slogdet(M)
            if sign <= 0:
                raise ValueError("noise_cov: component marginal not PD")
            invs.append(np.linalg.inv(M))
            logdets.append(logdet)
        return np.stack(invs), np.array(logdets), S

    def _log_joint(self, Y, invs, logdets):
        # (N, K): log w_k + log N(y; m_k, C_k + S), constants included
        Y = as_f64(np.atleast_2d(Y), "Y")
        d = Y[:, None, :] - self.means[None, :, :]
        quad = np.einsum("nki,kij,nkj->nk", d, invs, d)
        return (
            np.log(self.weights)[None, :]
            - 0.5 * (quad + logdets[None, :] + self.n * np.log(2.0 * np.pi))
        )

    def log_density_y(self, Y, noise_cov) -> np.ndarray:
        invs, logdets, _ = self._noisy_factors(noise_cov)
        return logsumexp(self._log_joint(Y, invs, logdets), axis=1)

    def responsibilities(self, Y, noise_cov) -> np.ndarray:
        invs, logdets, _ = self._noisy_factors(noise_cov)
        lj = self._log_joint(Y, invs, logdets)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def score_y(self, Y, noise_cov) -> np.ndarray:
        """grad_y log p_y(y) for y = x + e, e ~ N(0, noise_cov)."""
        invs, logdets, _ = self._noisy_factors(noise_cov)
        Y = as_f64(np.atleast_2d(Y), "Y")
        lj = self._log_joint(Y, invs, logdets)
        r = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
        d = self.means[None, :, :] - Y[:, None, :]
        per_k = np.einsum("kij,nkj->nki", invs, d)
        return np.einsum("nk,nki->ni", r, per_k)

    def posterior_mean(self, Y, noise_cov) -> np.ndarray:
        """E[x | y] for Gaussian noise, exact mixture form."""
        invs, logdets, S = self._noisy_factors(noise_cov)
        Y = as_f64(np.atleast_2d(Y), "Y")
        lj = self._log_joint(Y, invs, logdets)
        r = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
        d = Y[:, None, :] - self.means[None, :, :]
        gains = np.stack([C @ inv for C, inv in zip(self.covs, invs)])
        cond = self.means[None, :, :] + np.einsum("kij,nkj->nki", gains, d)
        return np.einsum("nk,nki->ni", r, cond)

    def mmse(self, noise_cov, method: str, n_samples: int = 0, rng: RngStream = None):
        """Mean posterior variance per pixel, E||x - E[x|y]||^2 / n.

        method "score_formula" uses tr(S)/n - E||S s(y)||^2/n with the exact
        mixture score (isotropic or diagonal noise only); "monte_carlo"
        compares posterior means to fresh x draws.  Returns
        (value, standard_error).
        """
        S = _as_cov(noise_cov, self.n)
        if method not in ("score_formula", "monte_carlo"):
            raise ValueError("method: one of score_formula, monte_carlo")
        if method == "score_formula" and np.any(S != np.diag(np.diag(S))):
            raise ValueError("score_formula: isotropic or diagonal noise only")
        if n_samples <= 0 or rng is None:
            raise ValueError("n_samples and rng required")
        X = self.sample(n_samples, rng)
        noise = rng.generator.standard_normal(X.shape) @ psd_sqrt(S).T
        Y = X + noise
        if method == "score_formula":
            s = self.score_y(Y, S)
            vals = np.trace(S) / self.n - np.sum((s @ S) ** 2, axis=-1) / self.n
        else:
            fh = self.posterior_mean(Y, S)
            vals = np.sum((fh - X) ** 2, axis=-1) / self.n
        return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_samples))


class AtomPrior:
    """Finite-support prior: x takes one of K atoms with given weights."""

    def __init__(self, atoms, weights=None):
        self.atoms = as_f64(np.atleast_2d(atoms), "atoms")
        K = self.atoms.shape[0]
        if weights is None:
            weights = np.full(K, 1.0 / K)
        self.weights = as_f64(weights, "weights")
        if self.weights.shape != (K,) or np.any(self.weights < 0):
            raise ValueError("weights: nonnegative, one per atom")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights: must sum to 1")
        self.K, self.n = self.atoms.shape

    def sample(self, size: int, rng: RngStream) -> np.ndarray:
        ks = rng.generator.choice(self.K, size=size, p=self.weights)
        return self.atoms[ks].copy()

    def log_lik(self, Y, noise: NoiseModel, mask=None) -> np.ndarray:
        """(N, K) log p(y_obs | atom_k); mask selects observed coordinates."""
        Y = as_f64(np.atleast_2d(Y), "Y")
        if mask is None:
            obs = np.ones(self.n, dtype=bool)
        else:
            obs = np.asarray(mask, dtype=np.float64).astype(bool)
        Yo = Y[:, obs]
        A = self.atoms[:, obs]
        if isinstance(noise, GaussianNoise):
            S = noise.cov_dense(self.n)[np.ix_(obs, obs)]
            inv = np.linalg.inv(S)
            d = Yo[:, None, :] - A[None, :, :]
            return -0.5 * np.einsum("nki,ij,nkj->nk", d, inv, d)
        if isinstance(noise, PoissonNoise):
            g = noise.gain
            z = Yo / g
            zi = np.rint(z)
            if np.max(np.abs(z - zi), initial=0.0) > 1e-9:
                raise ValueError("Y: must be gain * integer counts")
            rate = A / g
            with np.errstate(divide="ignore", invalid="ignore"):
                lograte = np.where(A > 0, np.log(np.where(A > 0, rate, 1.0)), -np.inf)
                term = np.where(
                    zi[:, None, :] == 0, 0.0, zi[:, None, :] * lograte[None, :, :]
                )
            return np.sum(term - rate[None, :, :] - gammaln(zi + 1.0)[:, None, :], axis=-1)
        if isinstance(noise, GammaNoise):
            el = noise.shape_l
            if np.any(A <= 0):
                raise ValueError("atoms: must be > 0 on observed coords for gamma noise")
            return np.sum(
                el * np.log(el / A)[None, :, :]
                + (el - 1.0) * np.log(Yo)[:, None, :]
                - el * Yo[:, None, :] / A[None, :, :]
                - gammaln(el),
                axis=-1,
            )
        raise ValueError(f"unsupported noise model: {noise.kind}")

    def posterior_weights(self, Y, noise: NoiseModel, mask=None) -> np.ndarray:
        ll = self.log_lik(Y, noise, mask=mask) + np.log(self.weights)[None, :]
        return np.exp(ll - logsumexp(ll, axis=1, keepdims=True))

    def posterior_mean(self, Y, noise: NoiseModel, mask=None) -> np.ndarray:
        """E[x | y_obs] by enumeration."""
        return self.posterior_weights(Y, noise, mask=mask) @ self.atoms

    def posterior_mean_linear(self, Ym, op_dense, noise_cov) -> np.ndarray:
        """E[x | A x + e = y_m], e ~ N(0, noise_cov) in measurement space."""
        Ym = as_f64(np.atleast_2d(Ym), "Ym")
        A = as_f64(op_dense, "op_dense")
        S = _as_cov(noise_cov, A.shape[0])
        inv = np.linalg.inv(S)
        proj = self.atoms @ A.T
        d = Ym[:, None, :] - proj[None, :, :]
        ll = -0.5 * np.einsum("nki,ij,nkj->nk", d, inv, d) + np.log(self.weights)[None, :]
        r = np.exp(ll - logsumexp(ll, axis=1, keepdims=True))
        return r @ self.atoms

    def posterior_mean_noiseless(self, Ym, op_dense, tol: float = 1e-9) -> np.ndarray:
        """E[x | A x = y_m] exactly: prior-weighted mean of consistent atoms."""
        Ym = as_f64(np.atleast_2d(Ym), "Ym")
        A = as_f64(op_dense, "op_dense")
        proj = self.atoms @ A.T
        d = Ym[:, None, :] - proj[None, :, :]
        hit = np.linalg.norm(d, axis=-1) <= tol
        if not np.all(hit.any(axis=1)):
            raise ValueError("Ym: some rows match no atom")
        w = hit * self.weights[None, :]
        w = w / w.sum(axis=1, keepdims=True)
        return w @ self.atoms

    def second_moment(self) -> np.ndarray:
        return (self.weights[:, None, None] * np.einsum("ki,kj->kij", self.atoms, self.atoms)).sum(
            axis=0
        )

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms


# dispatching facades over both prior kinds


def score_y(prior: GmmPrior, noise_cov, Y) -> np.ndarray:
    return prior.score_y(Y, noise_cov)


def posterior_mean(prior, noise, Y, mask=None) -> np.ndarray:
    """E[x | y]; GmmPrior needs Gaussian noise, AtomPrior takes any model."""
    if isinstance(prior, AtomPrior):
        return prior.posterior_mean(Y, noise, mask=mask)
    if isinstance(prior, GmmPrior):
        if isinstance(noise, GaussianNoise):
            if mask is not None:
                raise ValueError("mask: AtomPrior only")
            return prior.posterior_mean(Y, noise.cov_dense(prior.n))
        raise ValueError(f"GmmPrior posterior requires gaussian noise, got {noise.kind}")
    raise ValueError("prior: unsupported kind")


def mmse(prior, noise, method: str, n_samples: int, rng: RngStream):
    """Per-pixel MMSE with standard error, (value, se)."""
    if isinstance(prior, GmmPrior):
        if not isinstance(noise, GaussianNoise):
            raise ValueError("GmmPrior mmse requires gaussian noise")
        return prior.mmse(noise.cov_dense(prior.n), method, n_samples, rng)
    if isinstance(prior, AtomPrior):
        if method != "monte_carlo":
            raise ValueError("AtomPrior mmse: monte_carlo only")
        X = prior.sample(n_samples, rng)
        Y = noise.corrupt(X, rng)
        fh = prior.posterior_mean(Y, noise)
        vals = np.sum((fh - X) ** 2, axis=-1) / prior.n
        return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_samples))
    raise ValueError("prior: unsupported kind")


# score-based estimators and gap diagnostics


def tweedie_estimate(Y, noise_cov, score_vals) -> np.ndarray:
    """f*(y) = y + S s(y), the posterior mean under Gaussian noise."""
    Y = as_f64(np.atleast_2d(Y), "Y")
    S = _as_cov(noise_cov, Y.shape[-1])
    return Y + as_f64(score_vals, "score_vals") @ S.T


def score_second_moment(prior: GmmPrior, noise_cov, n_samples: int = 0, rng: RngStream = None):
    """E ||grad log p_y||^2; exact trace formula for K=1, Monte Carlo otherwise."""
    S = _as_cov(noise_cov, prior.n)
    if prior.K == 1:
        return float(np.trace(np.linalg.inv(prior.covs[0] + S)))
    if n_samples <= 0 or rng is None:
        raise ValueError("n_samples and rng required for K > 1")
    X = prior.sample(n_samples, rng)
    Y = X + rng.generator.standard_normal(X.shape) @ psd_sqrt(S).T
    s = prior.score_y(Y, S)
    return float(np.mean(np.sum(s * s, axis=-1)))


def zed_estimate(Y, score_vals, score_sq_moment: float) -> np.ndarray:
    """Zero-shot score denoiser f(y) = y + (n / E||s||^2) s(y)."""
    Y = as_f64(Y, "Y")
    if score_sq_moment <= 0:
        raise ValueError("score_sq_moment: must be > 0")
    eta = Y.shape[-1] / score_sq_moment
    return Y + eta * as_f64(score_vals, "score_vals")


def zed_gap(mmse_value: float, noise_var: float) -> float:
    """MSE of the ZED map: MMSE (1 - MMSE/sigma^2)^-1 = n/E||score||^2 - sigma^2."""
    if mmse_value >= noise_var:
        raise ValueError("mmse_value: must be < noise variance")
    return mmse_value / (1.0 - mmse_value / noise_var)
