"""Noise models: corruption samplers, NLL rows, and pair resampling.

Three natural-exponential-family models are implemented in closed form:
isotropic/anisotropic/correlated Gaussian, scaled Poisson, and Gamma.
Each supports corrupt(), an exact two-sample resampler gr2r_pair() which
maps one noisy draw y into a pair (y1, y2) that is conditionally
independent given x with mean x on both sides, and the matching
negative-log-likelihood metric.

gr2r_pair identities (exact, not statistical):
  y = (1-alpha) y1 + alpha y2
  Var(y1) = Var(y)/(1-alpha),  Var(y2) = Var(y)/alpha
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import as_f64, psd_inv_sqrt, psd_sqrt
from .rng import RngStream


class CapabilityError(ValueError):
    """Raised when a model cannot support the requested operation."""


@dataclass
class R2RPair:
    y1: np.ndarray
    y2: np.ndarray
    alpha: float


def _check_alpha(alpha):
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha: out of (0,1)")


class NoiseModel:
    kind = "abstract"

    def corrupt(self, x, rng: RngStream) -> np.ndarray:
        raise NotImplementedError

    def gr2r_pair(self, y, alpha: float, rng: RngStream, mask=None) -> R2RPair:
        raise NotImplementedError

    def nll(self, xhat, y) -> np.ndarray:
        """Per-item NLL metric, summed over pixels and divided by n."""
        raise NotImplementedError

    def var_y(self, x) -> np.ndarray:
        """Per-pixel variance of y given x."""
        raise NotImplementedError

    def natural_param(self, x) -> np.ndarray:
        raise CapabilityError(f"{self.kind}: no continuous NEF factorization exposed")

    def grad_log_h(self, y) -> np.ndarray:
        raise CapabilityError(f"{self.kind}: no continuous NEF factorization exposed")


class GaussianNoise(NoiseModel):
    """y = x + e, e ~ N(0, Sigma).

    Exactly one of sigma (isotropic), cov (dense SPD), filt (circular
    correlation filter: e = filt (*) white, Sigma = C C^T) must be given.
    """

    def __init__(self, sigma: float = None, cov=None, filt=None, n: int = None):
        given = sum(v is not None for v in (sigma, cov, filt))
        if given != 1:
            raise ValueError("exactly one of sigma, cov, filt must be given")
        self._sigma = None
        self._cov = None
        self._filt = None
        if sigma is not None:
            if sigma < 0:
                raise ValueError("sigma: must be >= 0")
            self.kind = "gaussian_iso"
            self._sigma = float(sigma)
            self.n = n
        elif cov is not None:
            cov = as_f64(cov, "cov")
            if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
                raise ValueError("cov: must be square")
            if np.linalg.eigvalsh(cov)[0] <= 0:
                raise ValueError("cov: must be positive definite")
            self.kind = "gaussian_aniso"
            self._cov = cov
            self.n = cov.shape[0]
        else:
            filt = as_f64(filt, "filt")
            if n is None:
                raise ValueError("n: required with filt")
            if filt.size > n:
                raise ValueError("filt: longer than signal")
            self.kind = "gaussian_correlated"
            self._filt = filt
            self.n = int(n)
            k = np.zeros(self.n)
            k[: filt.size] = filt
            idx = (np.arange(self.n)[:, None] - np.arange(self.n)[None, :]) % self.n
            self._circ = k[idx]
        self._sqrt = None
        self._inv_sqrt = None
        self._inv = None

    def cov_dense(self, n: int = None) -> np.ndarray:
        if self._sigma is not None:
            if n is None:
                n = self.n
            if n is None:
                raise ValueError("n: required for isotropic covariance")
            return self._sigma**2 * np.eye(n)
        if self._cov is not None:
            return self._cov
        return self._circ @ self._circ.T

    def _factors(self, n):
        if self._sqrt is None:
            S = self.cov_dense(n)
            self._sqrt = psd_sqrt(S)
            self._inv_sqrt = psd_inv_sqrt(S)
            self._inv = self._inv_sqrt @ self._inv_sqrt
        return self._sqrt, self._inv_sqrt, self._inv

    def draw(self, shape, rng: RngStream) -> np.ndarray:
        """Draw noise with covariance Sigma, shape (..., n)."""
        eps = rng.generator.standard_normal(shape)
        if self._sigma is not None:
            return self._sigma * eps
        if self._filt is not None:
            # circular convolution of white noise with the filter
            return eps @ self._circ.T
        sqrt, _, _ = self._factors(shape[-1])
        return eps @ sqrt.T

    def corrupt(self, x, rng: RngStream) -> np.ndarray:
        x = as_f64(x, "x")
        return x + self.draw(x.shape, rng)

    def gr2r_pair(self, y, alpha, rng, mask=None) -> R2RPair:
        _check_alpha(alpha)
        y = as_f64(y, "y")
        w = self.draw(y.shape, rng)
        if mask is not None:
            w = w * mask
        y1 = y + np.sqrt(alpha / (1.0 - alpha)) * w
        y2 = y - np.sqrt((1.0 - alpha) / alpha) * w
        return R2RPair(y1, y2, float(alpha))

    def nll(self, xhat, y) -> np.ndarray:
        xhat, y = as_f64(xhat, "xhat"), as_f64(y, "y")
        r = xhat - y
        if self._sigma is not None:
            if self._sigma == 0.0:
                raise ValueError("sigma: zero-noise model has no NLL metric")
            return np.sum(r * r, axis=-1) / (self._sigma**2 * r.shape[-1])
        _, inv_sqrt, _ = self._factors(r.shape[-1])
        z = r @ inv_sqrt.T
        return np.sum(z * z, axis=-1) / r.shape[-1]

    def var_y(self, x) -> np.ndarray:
        x = as_f64(x, "x")
        if self._sigma is not None:
            return np.full_like(x, self._sigma**2)
        return np.broadcast_to(np.diag(self.cov_dense(x.shape[-1])), x.shape).copy()

    def natural_param(self, x) -> np.ndarray:
        x = as_f64(x, "x")
        if self._sigma is not None:
            if self._sigma == 0.0:
                raise ValueError("sigma: zero-noise model has no natural parameter")
            return x / self._sigma**2
        _, _, inv = self._factors(x.shape[-1])
        return x @ inv

    def grad_log_h(self, y) -> np.ndarray:
        return -self.natural_param(y)


class PoissonNoise(NoiseModel):
    """y = gain * z with z ~ Poisson(x / gain), elementwise."""

    kind = "poisson"

    def __init__(self, gain: float):
        if gain <= 0:
            raise ValueError("gain: must be > 0")
        self.gain = float(gain)

    def corrupt(self, x, rng: RngStream) -> np.ndarray:
        x = as_f64(x, "x")
        if np.any(x < 0):
            raise ValueError("x: must be >= 0 for poisson noise")
        return self.gain * rng.generator.poisson(x / self.gain).astype(np.float64)

    def _counts(self, y) -> np.ndarray:
        z = y / self.gain
        zi = np.rint(z)
        if np.max(np.abs(z - zi), initial=0.0) > 1e-9:
            raise ValueError("y: must be gain * integer counts")
        return zi.astype(np.int64)

    def gr2r_pair(self, y, alpha, rng, mask=None) -> R2RPair:
        _check_alpha(alpha)
        y = as_f64(y, "y")
        z = self._counts(y)
        w = rng.generator.binomial(z, alpha).astype(np.float64)
        y1 = (y - self.gain * w) / (1.0 - alpha)
        y2 = self.gain * w / alpha
        return R2RPair(y1, y2, float(alpha))

    def nll(self, xhat, y) -> np.ndarray:
        xhat, y = as_f64(xhat, "xhat"), as_f64(y, "y")
        if np.any(xhat <= 0):
            raise ValueError("xhat: must be > 0 for poisson nll")
        n = y.shape[-1]
        return (-np.sum(y * np.log(xhat), axis=-1) + np.sum(xhat, axis=-1)) / n

    def var_y(self, x) -> np.ndarray:
        return self.gain * as_f64(x, "x")


class GammaNoise(NoiseModel):
    """y ~ Gamma(shape=l, rate=l/x) elementwise; mean x, variance x^2/l."""

    kind = "gamma"

    def __init__(self, shape_l: float):
        if shape_l <= 0:
            raise ValueError("shape_l: must be > 0")
        self.shape_l = float(shape_l)

    def corrupt(self, x, rng: RngStream) -> np.ndarray:
        x = as_f64(x, "x")
        if np.any(x <= 0):
            raise ValueError("x: must be > 0 for gamma noise")
        return rng.generator.gamma(self.shape_l, x / self.shape_l)

    def gr2r_pair(self, y, alpha, rng, mask=None) -> R2RPair:
        _check_alpha(alpha)
        y = as_f64(y, "y")
        w = rng.generator.beta(self.shape_l * alpha, self.shape_l * (1.0 - alpha), size=y.shape)
        if mask is not None:
            w = w * mask
        y1 = y * (1.0 - w) / (1.0 - alpha)
        y2 = y * w / alpha
        return R2RPair(y1, y2, float(alpha))

    def nll(self, xhat, y) -> np.ndarray:
        xhat, y = as_f64(xhat, "xhat"), as_f64(y, "y")
        if np.any(xhat <= 0):
            raise ValueError("xhat: must be > 0 for gamma nll")
        n = y.shape[-1]
        return (np.sum(np.log(xhat), axis=-1) + np.sum(y / xhat, axis=-1)) / n

    def var_y(self, x) -> np.ndarray:
        x = as_f64(x, "x")
        return x * x / self.shape_l

    def natural_param(self, x) -> np.ndarray:
        x = as_f64(x, "x")
        if np.any(x <= 0):
            raise ValueError("x: must be > 0")
        return -self.shape_l / x

    def grad_log_h(self, y) -> np.ndarray:
        y = as_f64(y, "y")
        if np.any(y <= 0):
            raise ValueError("y: must be > 0")
        return (self.shape_l - 1.0) / y


# spec-named functional facade


def corrupt(model: NoiseModel, x, rng: RngStream) -> np.ndarray:
    return model.corrupt(x, rng)


def gr2r_pair(model: NoiseModel, y, alpha: float, rng: RngStream, mask=None) -> R2RPair:
    return model.gr2r_pair(y, alpha, rng, mask=mask)


def nll(model: NoiseModel, xhat, y) -> np.ndarray:
    return model.nll(xhat, y)


def snr(samples) -> float:
    """||E z||^2 / E||z - E z||^2 over rows of samples; inf for zero deviation."""
    samples = as_f64(samples, "samples")
    mean = samples.mean(axis=0)
    dev = samples - mean
    msd = float(np.mean(np.sum(dev * dev, axis=-1)))
    num = float(np.sum(mean * mean))
    if msd == 0.0:
        return np.inf
    return num / msd


def snr_split_check(model: NoiseModel, x, alpha: float, n_draws: int, rng: RngStream) -> dict:
    """Empirical SNR ratios of (y, y1, y2) at fixed x.

    For unbiased pairs, SNR(y1)/SNR(y) -> 1-alpha and SNR(y2)/SNR(y) -> alpha.
    """
    _check_alpha(alpha)
    x = as_f64(x, "x")
    X = np.broadcast_to(x, (n_draws,) + x.shape)
    Y = model.corrupt(X, rng)
    pair = model.gr2r_pair(Y, alpha, rng)
    out = {
        "snr_y": snr(Y),
        "snr_y1": snr(pair.y1),
        "snr_y2": snr(pair.y2),
    }
    out["ratio_y1"] = out["snr_y1"] / out["snr_y"]
    out["ratio_y2"] = out["snr_y2"] / out["snr_y"]
    return out
