"""Self-supervised loss evaluators over (batch, estimator, rng).

Every evaluator returns a LossValue with the batch mean, the standard
error of that mean across items, the number of internal noise resamples
consumed, and the per-item values. With with_grad=True the return is
(LossValue, grad) where grad is the exact derivative of the mean value
with respect to the estimator's flattened parameters; stochastic losses
differentiate the realized draw, so the gradient estimate stays unbiased.
"""

from __future__ import annotations

import warnings

import numpy as np

from .estimators import AffineEstimator, Estimator, input_jacobian_trace
from .masks import MaskGenerator, check_basis_independent
from .noise import (
    CapabilityError,
    GammaNoise,
    GaussianNoise,
    NoiseModel,
    PoissonNoise,
)
from .operators import (
    GroupAction,
    Identity,
    LinearOperator,
    OperatorDistribution,
    compose_with_transform,
    is_equivariant,
)
from .rng import RngStream
from .splits import SplitDistribution, embedded_support


class LossValue:
    """Batch mean of a loss with its sampling uncertainty."""

    __slots__ = ("value", "standard_error", "resample_count", "per_item")

    def __init__(self, per_item, resample_count: int = 0):
        per_item = np.atleast_1d(np.asarray(per_item, dtype=np.float64))
        self.per_item = per_item
        self.value = float(np.mean(per_item))
        if per_item.size > 1:
            self.standard_error = float(
                np.std(per_item, ddof=1) / np.sqrt(per_item.size)
            )
        else:
            self.standard_error = 0.0
        self.resample_count = int(resample_count)

    def __repr__(self):  # pragma: no cover
        return (
            f"LossValue({self.value:.6g} +- {self.standard_error:.2g}, "
            f"resamples={self.resample_count})"
        )


class Batch:
    """Measurements with an optional shared or per-item operator and signals."""

    def __init__(self, ys, ops=None, xs=None):
        ys = np.asarray(ys, dtype=np.float64)
        if ys.ndim == 1:
            ys = ys[None, :]
        if ys.ndim != 2:
            raise ValueError("ys: expected (N, m) array")
        if isinstance(ops, (list, tuple)) and len(ops) != ys.shape[0]:
            raise ValueError("ops: per-item list length mismatch")
        self.ys = ys
        self.ops = list(ops) if isinstance(ops, (list, tuple)) else ops
        self.xs = None
        if xs is not None:
            xs = np.asarray(xs, dtype=np.float64)
            if xs.ndim == 1:
                xs = xs[None, :]
            if xs.shape[0] != ys.shape[0]:
                raise ValueError("xs: item count mismatch")
            self.xs = xs

    def __len__(self):
        return self.ys.shape[0]

    def op(self, i: int):
        if self.ops is None:
            return None
        if isinstance(self.ops, list):
            return self.ops[i]
        return self.ops

    def op_list(self):
        if self.ops is None:
            return None
        if isinstance(self.ops, list):
            return self.ops
        return [self.ops] * len(self)

    def is_denoising(self) -> bool:
        if self.ops is None:
            return True
        ops = self.ops if isinstance(self.ops, list) else [self.ops]
        return all(isinstance(op, Identity) for op in ops)


def _require_denoising(batch: Batch, name: str):
    if not batch.is_denoising():
        raise CapabilityError(f"{name}: denoising setting required (identity operator)")


def _finish(per_item, resamples, grad, with_grad):
    lv = LossValue(per_item, resamples)
    return (lv, grad) if with_grad else lv


def _cov_dense(noise_cov, n: int) -> np.ndarray:
    S = np.asarray(noise_cov, dtype=np.float64)
    if S.ndim == 0:
        return float(S) * np.eye(n)
    if S.ndim == 1:
        if S.size != n:
            raise ValueError("noise_cov: diagonal length mismatch")
        return np.diag(S)
    if S.shape != (n, n):
        raise ValueError("noise_cov: shape mismatch")
    return S


def _affine_div_grad(f: Estimator, S: np.ndarray) -> np.ndarray:
    # d trace(S @ W_eff) / d theta for the (W, b) parameterization
    if not isinstance(f, AffineEstimator):
        raise CapabilityError("analytic divergence gradient: affine estimators only")
    dW = S.T.copy()
    if f.constraint == "zero_diagonal":
        np.fill_diagonal(dW, 0.0)
    return np.concatenate([dW.ravel(), np.zeros(f.n)])


# ---------------------------------------------------------------------------
# supervised reference and paired-target losses


def loss_sup(batch: Batch, f: Estimator, with_grad: bool = False):
    if batch.xs is None:
        raise CapabilityError("loss_sup: batch has no clean signals")
    bundle = f.eval_bundle(batch.ys, ops=batch.ops)
    R = bundle.value - batch.xs
    n = R.shape[1]
    per_item = np.mean(R * R, axis=-1)
    grad = None
    if with_grad:
        grad = bundle.vjp_params(2.0 * R / (n * len(batch)))
    return _finish(per_item, 0, grad, with_grad)


def loss_n2n(y1s, y2s, f: Estimator, with_grad: bool = False, ops=None):
    Y1 = np.atleast_2d(np.asarray(y1s, dtype=np.float64))
    Y2 = np.atleast_2d(np.asarray(y2s, dtype=np.float64))
    if Y1.shape != Y2.shape:
        raise ValueError("y1s/y2s: shape mismatch")
    bundle = f.eval_bundle(Y1, ops=ops)
    R = bundle.value - Y2
    n = R.shape[1]
    per_item = np.mean(R * R, axis=-1)
    grad = None
    if with_grad:
        grad = bundle.vjp_params(2.0 * R / (n * Y1.shape[0]))
    return _finish(per_item, 0, grad, with_grad)


def pair_target_model(noise: NoiseModel, alpha: float) -> NoiseModel:
    """Noise model of the held-out half y2 given the clean signal."""
    if isinstance(noise, GaussianNoise):
        if noise._sigma is not None:
            if noise._sigma == 0.0:
                raise ValueError("sigma: zero-noise model has no pair target")
            return GaussianNoise(sigma=noise._sigma / np.sqrt(alpha))
        n = noise.n if noise.n is not None else noise.cov_dense().shape[0]
        return GaussianNoise(cov=noise.cov_dense(n) / alpha)
    if isinstance(noise, PoissonNoise):
        return PoissonNoise(gain=noise.gain / alpha)
    if isinstance(noise, GammaNoise):
        return GammaNoise(shape_l=noise.shape_l * alpha)
    raise CapabilityError(f"{noise.kind}: no pair target model")


def pair_variance_plugin(noise: NoiseModel, Y: np.ndarray, alpha: float, mask=None):
    """Unbiased per-item estimate of sum_i Var(y2_i | x) from y alone."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    n = Y.shape[1]
    if isinstance(noise, GaussianNoise):
        if noise._sigma is not None:
            k = float(n) if mask is None else float(np.sum(mask))
            tot = noise._sigma**2 * k
            return np.full(Y.shape[0], tot / alpha)
        diag = np.diag(noise.cov_dense(n))
        if mask is not None:
            diag = diag * mask
        return np.full(Y.shape[0], float(np.sum(diag)) / alpha)
    if isinstance(noise, PoissonNoise):
        return noise.gain * np.sum(Y, axis=-1) / alpha
    if isinstance(noise, GammaNoise):
        return np.sum(Y * Y, axis=-1) / ((noise.shape_l + 1.0) * alpha)
    raise CapabilityError(f"{noise.kind}: no pair variance plugin")


def _nll_cotangent(model: NoiseModel, xhat: np.ndarray, y2: np.ndarray) -> np.ndarray:
    n = xhat.shape[-1]
    if isinstance(model, GaussianNoise):
        r = xhat - y2
        if model._sigma is not None:
            return 2.0 * r / (model._sigma**2 * n)
        _, _, inv = model._factors(n)
        return 2.0 * (r @ inv) / n
    if isinstance(model, PoissonNoise):
        return (1.0 - y2 / xhat) / n
    if isinstance(model, GammaNoise):
        return (1.0 / xhat - y2 / (xhat * xhat)) / n
    raise CapabilityError(f"{model.kind}: no NLL cotangent")


def loss_r2r(
    batch: Batch,
    f: Estimator,
    noise: NoiseModel,
    alpha: float,
    resamples: int = 1,
    metric: str = "l2",
    rng: RngStream = None,
    with_grad: bool = False,
):
    """Pair-resampling loss: corrupt y into an independent (y1, y2) pair.

    The l2 metric subtracts the plug-in estimate of the y2 noise variance,
    making the value an unbiased estimate of the supervised l2 loss at
    input y1, and recovering the divergence-based gaussian loss as
    alpha -> 0. The nll metric scores y2 under its own noise model.
    """
    _require_denoising(batch, "loss_r2r")
    if resamples < 1:
        raise ValueError("resamples: must be >= 1")
    if metric not in ("l2", "nll"):
        raise ValueError("metric: one of l2, nll")
    if rng is None:
        raise ValueError("rng: required")
    Y = batch.ys
    N, n = Y.shape
    per_item = np.zeros(N)
    grad = np.zeros(f.param_count) if with_grad else None
    model2 = pair_target_model(noise, alpha) if metric == "nll" else None
    for _ in range(resamples):
        pair = noise.gr2r_pair(Y, alpha, rng)
        bundle = f.eval_bundle(pair.y1)
        if metric == "l2":
            R = bundle.value - pair.y2
            vals = np.mean(R * R, axis=-1)
            vals -= pair_variance_plugin(noise, Y, alpha) / n
            if with_grad:
                grad += bundle.vjp_params(2.0 * R / (n * N * resamples))
        else:
            vals = model2.nll(bundle.value, pair.y2)
            if with_grad:
                cot = _nll_cotangent(model2, bundle.value, pair.y2)
                grad += bundle.vjp_params(cot / (N * resamples))
        per_item += vals / resamples
    return _finish(per_item, N * resamples, grad, with_grad)


# ---------------------------------------------------------------------------
# divergence-based losses


def loss_sure(
    batch: Batch,
    f: Estimator,
    noise_cov,
    backend: str = "analytic",
    rng: RngStream = None,
    probes: int = 1,
    tau: float = None,
    with_grad: bool = False,
):
    _require_denoising(batch, "loss_sure")
    Y = batch.ys
    N, n = Y.shape
    S = _cov_dense(noise_cov, n)
    bundle = f.eval_bundle(Y)
    R = bundle.value - Y
    per_item = np.mean(R * R, axis=-1) - np.trace(S) / n
    grad = np.zeros(f.param_count) if with_grad else None
    if with_grad:
        grad += bundle.vjp_params(2.0 * R / (n * N))
    resamples = 0
    if backend == "analytic":
        per_item += (2.0 / n) * input_jacobian_trace(f, Y, S, backend="analytic")
        if with_grad:
            grad += (2.0 / n) * _affine_div_grad(f, S)
    elif backend == "hutchinson":
        if with_grad:
            raise CapabilityError(
                "hutchinson divergence has no parameter gradient; use analytic or ramani"
            )
        per_item += (2.0 / n) * input_jacobian_trace(
            f, Y, S, backend="hutchinson", rng=rng, probes=probes
        )
        resamples = N * probes
    elif backend == "ramani":
        if rng is None:
            raise ValueError("rng: required for ramani")
        if tau is None or tau <= 0:
            raise ValueError("tau: must be > 0 for ramani")
        base = bundle.value
        for _ in range(probes):
            w = rng.generator.standard_normal((N, n))
            shifted = f.eval_bundle(Y + tau * w)
            c = (w @ S.T) / tau
            per_item += (2.0 / n) * np.sum(c * (shifted.value - base), axis=-1) / probes
            if with_grad:
                scale = 2.0 / (n * N * probes)
                grad += shifted.vjp_params(scale * c)
                grad -= bundle.vjp_params(scale * c)
        resamples = N * probes
    else:
        raise ValueError("backend: one of analytic, hutchinson, ramani")
    return _finish(per_item, resamples, grad, with_grad)


def loss_pure(
    batch: Batch,
    f: Estimator,
    gain: float,
    backend: str = "exact_shift",
    shift: str = "backward",
    tau: float = None,
    probes: int = 1,
    rng: RngStream = None,
    with_grad: bool = False,
):
    """Poisson counterpart of the divergence loss.

    exact_shift evaluates the per-coordinate finite shift y -> y -/+ gain*e_i
    (backward shift is the unbiased form; the forward variant is exposed
    for comparison). fd_approx replaces the shift sum by a randomized
    trace with covariance gain*diag(y).
    """
    _require_denoising(batch, "loss_pure")
    if gain <= 0:
        raise ValueError("gain: must be > 0")
    Y = batch.ys
    if np.any(Y < 0):
        raise ValueError("y: must be >= 0 for poisson data")
    z = Y / gain
    if np.max(np.abs(z - np.rint(z)), initial=0.0) > 1e-9:
        raise ValueError("y: must be gain * integer counts")
    N, n = Y.shape
    bundle = f.eval_bundle(Y)
    R = bundle.value - Y
    per_item = np.mean(R * R, axis=-1)
    grad = np.zeros(f.param_count) if with_grad else None
    if with_grad:
        grad += bundle.vjp_params(2.0 * R / (n * N))
    resamples = 0
    if backend == "exact_shift":
        if shift not in ("backward", "forward"):
            raise ValueError("shift: one of backward, forward")
        sgn = -1.0 if shift == "backward" else 1.0
        ii, jj = np.nonzero(Y)
        if ii.size:
            Yshift = Y[ii].copy()
            Yshift[np.arange(ii.size), jj] += sgn * gain
            shifted = f.eval_bundle(Yshift)
            fshift = shifted.value[np.arange(ii.size), jj]
            fbase = bundle.value[ii, jj]
            w = Y[ii, jj]
            contrib = np.zeros(N)
            np.add.at(contrib, ii, w * (fbase - fshift))
            per_item += (2.0 / n) * contrib
            if with_grad:
                grad += bundle.vjp_params(2.0 * Y / (n * N))
                Csh = np.zeros((ii.size, n))
                Csh[np.arange(ii.size), jj] = w
                grad -= shifted.vjp_params(2.0 * Csh / (n * N))
    elif backend == "fd_approx":
        if rng is None:
            raise ValueError("rng: required for fd_approx")
        if tau is None or tau <= 0:
            raise ValueError("tau: must be > 0 for fd_approx")
        for _ in range(probes):
            w = rng.generator.standard_normal((N, n))
            shifted = f.eval_bundle(Y + tau * w)
            c = gain * Y * w / tau
            per_item += (2.0 / n) * np.sum(c * (shifted.value - bundle.value), axis=-1) / probes
            if with_grad:
                scale = 2.0 / (n * N * probes)
                grad += shifted.vjp_params(scale * c)
                grad -= bundle.vjp_params(scale * c)
        resamples = N * probes
    else:
        raise ValueError("backend: one of exact_shift, fd_approx")
    return _finish(per_item, resamples, grad, with_grad)


def loss_gsure(
    batch: Batch,
    f: Estimator,
    noise: NoiseModel,
    backend: str = "analytic",
    rng: RngStream = None,
    probes: int = 1,
    tau: float = None,
    with_grad: bool = False,
):
    """Divergence loss targeting the natural parameter of the noise family.

    The minimizer estimates the conditional mean of the natural parameter,
    not of the signal itself.
    """
    _require_denoising(batch, "loss_gsure")
    Y = batch.ys
    N, n = Y.shape
    glh = noise.grad_log_h(Y)
    bundle = f.eval_bundle(Y)
    R = bundle.value + glh
    per_item = np.mean(R * R, axis=-1)
    grad = np.zeros(f.param_count) if with_grad else None
    if with_grad:
        grad += bundle.vjp_params(2.0 * R / (n * N))
    resamples = 0
    eye = np.eye(n)
    if backend == "analytic":
        per_item += (2.0 / n) * input_jacobian_trace(f, Y, eye, backend="analytic")
        if with_grad:
            grad += (2.0 / n) * _affine_div_grad(f, eye)
    elif backend == "hutchinson":
        if with_grad:
            raise CapabilityError(
                "hutchinson divergence has no parameter gradient; use analytic or ramani"
            )
        per_item += (2.0 / n) * input_jacobian_trace(
            f, Y, eye, backend="hutchinson", rng=rng, probes=probes
        )
        resamples = N * probes
    elif backend == "ramani":
        if rng is None or tau is None or tau <= 0:
            raise ValueError("ramani: rng and tau > 0 required")
        for _ in range(probes):
            w = rng.generator.standard_normal((N, n))
            shifted = f.eval_bundle(Y + tau * w)
            c = w / tau
            per_item += (2.0 / n) * np.sum(c * (shifted.value - bundle.value), axis=-1) / probes
            if with_grad:
                scale = 2.0 / (n * N * probes)
                grad += shifted.vjp_params(scale * c)
                grad -= bundle.vjp_params(scale * c)
        resamples = N * probes
    else:
        raise ValueError("backend: one of analytic, hutchinson, ramani")
    return _finish(per_item, resamples, grad, with_grad)


def _psi_trace_items(f, Y, psi, backend, rng, probes, bundle=None):
    """Per-item tr(psi df/dy); probe form works for indefinite psi."""
    N, n = Y.shape
    if backend == "analytic":
        return input_jacobian_trace(f, Y, psi, backend="analytic") * np.ones(N)
    if backend == "hutchinson":
        if rng is None:
            raise ValueError("rng: required for hutchinson")
        if bundle is None:
            bundle = f.eval_bundle(Y)
        out = np.zeros(N)
        for _ in range(probes):
            w = rng.generator.standard_normal((N, n))
            out += np.sum((w @ psi.T) * bundle.jvp_input(w), axis=-1) / probes
        return out
    raise ValueError("backend: one of analytic, hutchinson")


def loss_unsure(
    batch: Batch,
    f: Estimator,
    basis,
    eta,
    backend: str = "analytic",
    rng: RngStream = None,
    probes: int = 1,
    tau: float = None,
    with_grad: bool = False,
):
    """Divergence loss with unknown noise covariance: multipliers eta_j
    weight the divergence along each basis matrix."""
    _require_denoising(batch, "loss_unsure")
    basis = [np.asarray(P, dtype=np.float64) for P in basis]
    if not check_basis_independent(basis):
        raise ValueError("basis: linearly dependent (singular Gram matrix)")
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != (len(basis),):
        raise ValueError("eta: one multiplier per basis matrix")
    Y = batch.ys
    N, n = Y.shape
    bundle = f.eval_bundle(Y)
    R = bundle.value - Y
    per_item = np.mean(R * R, axis=-1)
    grad = np.zeros(f.param_count) if with_grad else None
    if with_grad:
        grad += bundle.vjp_params(2.0 * R / (n * N))
    resamples = 0
    for ej, psi in zip(eta, basis):
        if backend == "analytic":
            per_item += (2.0 * ej / n) * _psi_trace_items(f, Y, psi, "analytic", None, 0)
            if with_grad:
                grad += (2.0 * ej / n) * _affine_div_grad(f, psi)
        elif backend == "hutchinson":
            if with_grad:
                raise CapabilityError(
                    "hutchinson divergence has no parameter gradient; use analytic or ramani"
                )
            per_item += (2.0 * ej / n) * _psi_trace_items(
                f, Y, psi, "hutchinson", rng, probes, bundle
            )
            resamples += N * probes
        elif backend == "ramani":
            if rng is None or tau is None or tau <= 0:
                raise ValueError("ramani: rng and tau > 0 required")
            for _ in range(probes):
                w = rng.generator.standard_normal((N, n))
                shifted = f.eval_bundle(Y + tau * w)
                c = (w @ psi.T) / tau
                per_item += (
                    (2.0 * ej / n) * np.sum(c * (shifted.value - bundle.value), axis=-1) / probes
                )
                if with_grad:
                    scale = 2.0 * ej / (n * N * probes)
                    grad += shifted.vjp_params(scale * c)
                    grad -= bundle.vjp_params(scale * c)
            resamples += N * probes
        else:
            raise ValueError("backend: one of analytic, hutchinson, ramani")
    return _finish(per_item, resamples, grad, with_grad)


def unsure_inner_max(
    batch: Batch,
    f: Estimator,
    basis,
    steps: int = 1,
    lr: float = 1.0,
    eta0=None,
    backend: str = "analytic",
    rng: RngStream = None,
    probes: int = 1,
):
    """Gradient ascent on the multipliers; the objective is linear in eta,
    so the ascent direction is the measured divergence itself."""
    basis = [np.asarray(P, dtype=np.float64) for P in basis]
    if not check_basis_independent(basis):
        raise ValueError("basis: linearly dependent (singular Gram matrix)")
    Y = batch.ys
    n = Y.shape[1]
    eta = np.zeros(len(basis)) if eta0 is None else np.asarray(eta0, np.float64).copy()
    bundle = f.eval_bundle(Y) if backend == "hutchinson" else None
    direction = np.array(
        [
            np.mean(_psi_trace_items(f, Y, psi, backend, rng, probes, bundle))
            for psi in basis
        ]
    )
    eta += steps * lr * (2.0 / n) * direction
    return eta


# ---------------------------------------------------------------------------
# masking and measurement-splitting losses


def loss_split_cv(
    batch: Batch,
    f: Estimator,
    maskgen: MaskGenerator,
    rng: RngStream = None,
    with_grad: bool = False,
):
    """Hide part of each measurement, score the estimate on the hidden part."""
    _require_denoising(batch, "loss_split_cv")
    if rng is None:
        raise ValueError("rng: required")
    Y = batch.ys
    N, n = Y.shape
    X_in = np.empty_like(Y)
    Wt = np.empty_like(Y)
    for i in range(N):
        ms = maskgen.generate(Y[i], rng)
        X_in[i] = ms.x_in
        Wt[i] = ms.target_w
    bundle = f.eval_bundle(X_in)
    R = bundle.value - Y
    per_item = np.sum((Wt * R) ** 2, axis=-1) / n
    grad = None
    if with_grad:
        grad = bundle.vjp_params(2.0 * Wt * Wt * R / (n * N))
    return _finish(per_item, N, grad, with_grad)


def loss_mc(batch: Batch, f: Estimator, with_grad: bool = False):
    """Measurement consistency: residual of the re-applied operator."""
    if batch.ops is None:
        raise ValueError("ops: measurement consistency requires operators")
    ops = batch.op_list()
    Y = batch.ys
    N = Y.shape[0]
    bundle = f.eval_bundle(Y, ops=batch.ops)
    per_item = np.zeros(N)
    C = np.zeros_like(bundle.value)
    for i in range(N):
        op = ops[i]
        r = op.apply(bundle.value[i]) - Y[i]
        per_item[i] = np.sum(r * r) / op.m
        if with_grad:
            C[i] = op.adjoint(2.0 * r / (op.m * N))
    grad = bundle.vjp_params(C) if with_grad else None
    return _finish(per_item, 0, grad, with_grad)


def _split_batch(batch: Batch, split_dist: SplitDistribution, rng: RngStream):
    ops = batch.op_list()
    if ops is None:
        ops = [Identity(batch.ys.shape[1])] * len(batch)
    return [split_dist.split(batch.ys[i], ops[i], rng) for i in range(len(batch))]


def loss_msplit(
    batch: Batch,
    f: Estimator,
    split_dist: SplitDistribution,
    weighted: bool = False,
    mode: str = "msplit",
    noise: NoiseModel = None,
    alpha: float = 0.1,
    rng: RngStream = None,
    with_grad: bool = False,
):
    """Measurement-splitting losses.

    msplit predicts the full measurement from the input split; ssdu scores
    only the held-out split; gr2r_msplit additionally resamples the input
    split to decouple its noise, keeping the held-out term unchanged.
    weighted rescales the msplit residual by Q_{A1}^{-1/2}.
    """
    if rng is None:
        raise ValueError("rng: required")
    if mode not in ("msplit", "ssdu", "gr2r_msplit"):
        raise ValueError("mode: one of msplit, ssdu, gr2r_msplit")
    if weighted and mode != "msplit":
        raise ValueError("weighted: only the msplit mode is weighted")
    if weighted and not split_dist.supports_weighting:
        raise CapabilityError("weighted: split distribution has no Q matrix")
    if mode == "gr2r_msplit" and noise is None:
        raise ValueError("noise: required for gr2r_msplit")
    ops = batch.op_list()
    if ops is None:
        ops = [Identity(batch.ys.shape[1])] * len(batch)
    samples = _split_batch(batch, split_dist, rng)
    Y = batch.ys
    N = Y.shape[0]
    Y1 = np.stack([s.y1 for s in samples])
    ops1 = [s.op1 for s in samples]
    per_item = np.zeros(N)
    resamples = N

    if mode == "gr2r_msplit":
        pairs = []
        Y11 = np.empty_like(Y1)
        for i, s in enumerate(samples):
            mask = embedded_support(s.op1)
            pair = noise.gr2r_pair(Y1[i], alpha, rng, mask=mask)
            pairs.append(pair)
            Y11[i] = pair.y1
        bundle_a = f.eval_bundle(Y11, ops=ops1)
        bundle_b = f.eval_bundle(Y1, ops=ops1)
        Ca = np.zeros_like(bundle_a.value)
        Cb = np.zeros_like(bundle_b.value)
        for i, s in enumerate(samples):
            m = ops[i].m
            r1 = s.op1.apply(bundle_a.value[i]) - pairs[i].y2
            plug = pair_variance_plugin(noise, Y1[i], alpha, mask=embedded_support(s.op1))
            per_item[i] += (np.sum(r1 * r1) - float(plug[0])) / m
            r2 = s.op2.apply(bundle_b.value[i]) - s.y2
            per_item[i] += np.sum(r2 * r2) / m
            if with_grad:
                Ca[i] = s.op1.adjoint(2.0 * r1 / (m * N))
                Cb[i] = s.op2.adjoint(2.0 * r2 / (m * N))
        grad = None
        if with_grad:
            grad = bundle_a.vjp_params(Ca) + bundle_b.vjp_params(Cb)
        return _finish(per_item, 2 * N, grad, with_grad)

    bundle = f.eval_bundle(Y1, ops=ops1)
    C = np.zeros_like(bundle.value)
    for i, s in enumerate(samples):
        m = ops[i].m
        if mode == "msplit":
            r = ops[i].apply(bundle.value[i]) - Y[i]
            if weighted:
                qv = split_dist.q_matrix(ops[i], s.b1)
                r = r / np.sqrt(qv)
            per_item[i] = np.sum(r * r) / m
            if with_grad:
                back = r / np.sqrt(split_dist.q_matrix(ops[i], s.b1)) if weighted else r
                C[i] = ops[i].adjoint(2.0 * back / (m * N))
        else:  # ssdu
            r = s.op2.apply(bundle.value[i]) - s.y2
            per_item[i] = np.sum(r * r) / m
            if with_grad:
                C[i] = s.op2.adjoint(2.0 * r / (m * N))
    grad = bundle.vjp_params(C) if with_grad else None
    return _finish(per_item, resamples, grad, with_grad)


# ---------------------------------------------------------------------------
# multi-operator and equivariance losses


def _consistency_term(batch, f, noise, alpha, rng, with_grad, probes, tau):
    """Noise-aware measurement-consistency values and gradient.

    Noiseless data keeps the plain residual; known gaussian noise gets the
    divergence correction in measurement space; other noise models use the
    pair-resampling form on the measured support.
    """
    N = len(batch)
    ops = batch.op_list()
    if noise is None:
        return loss_mc(batch, f, with_grad=with_grad), 0
    Y = batch.ys
    if isinstance(noise, GaussianNoise):
        bundle = f.eval_bundle(Y, ops=batch.ops)
        per_item = np.zeros(N)
        grad = np.zeros(f.param_count) if with_grad else None
        Cbase = np.zeros_like(bundle.value)
        cots = []
        shifted_bundles = []
        for i in range(N):
            op = ops[i]
            m = op.m
            Sm = op.to_dense() @ _cov_dense(
                noise._sigma**2 if noise._sigma is not None else noise.cov_dense(op.n),
                op.n,
            ) @ op.to_dense().T
            g = op.apply(bundle.value[i])
            r = g - Y[i]
            per_item[i] = np.sum(r * r) / m - np.trace(Sm) / m
            if with_grad:
                Cbase[i] = op.adjoint(2.0 * r / (m * N))
            if isinstance(f, AffineEstimator):
                J = op.to_dense() @ f.effective_weight()
                per_item[i] += (2.0 / m) * np.trace(Sm @ J)
                if with_grad:
                    grad += (2.0 / m) * _affine_div_grad(f, Sm @ op.to_dense()) / N
            else:
                if rng is None or tau is None or tau <= 0:
                    raise ValueError("gaussian consistency on non-affine f: rng and tau required")
                for _ in range(probes):
                    w = rng.generator.standard_normal(op.m)
                    shifted = f.eval_bundle(Y[i] + tau * w, ops=op)
                    diff = op.apply(shifted.value) - g
                    c = Sm @ w / tau
                    per_item[i] += (2.0 / m) * float(np.dot(c, diff)) / probes
                    if with_grad:
                        cot = op.adjoint(2.0 * c / (m * N * probes))
                        shifted_bundles.append((shifted, cot))
                        Cbase[i] -= cot
        if with_grad:
            grad += bundle.vjp_params(Cbase)
            for shifted, cot in shifted_bundles:
                grad += shifted.vjp_params(cot)
        lv = LossValue(per_item, 0)
        return (lv, grad) if with_grad else lv, 0
    # pair-resampling consistency on the measured support
    per_item = np.zeros(N)
    Y1 = np.empty_like(Y)
    pairs = []
    for i in range(N):
        op = ops[i]
        mask = embedded_support(op)
        if mask is None:
            raise CapabilityError("pair-resampling consistency: diagonal-support operators only")
        pair = noise.gr2r_pair(Y[i], alpha, rng, mask=mask)
        pairs.append(pair)
        Y1[i] = pair.y1
    bundle = f.eval_bundle(Y1, ops=batch.ops)
    C = np.zeros_like(bundle.value)
    for i in range(N):
        op = ops[i]
        m = op.m
        r = op.apply(bundle.value[i]) - pairs[i].y2
        plug = pair_variance_plugin(noise, Y[i], alpha, mask=embedded_support(op))
        per_item[i] = (np.sum(r * r) - float(plug[0])) / m
        if with_grad:
            C[i] = op.adjoint(2.0 * r / (m * N))
    grad = bundle.vjp_params(C) if with_grad else None
    lv = LossValue(per_item, N)
    return (lv, grad) if with_grad else lv, N


def _trivial_not_excluded(data_ops: list, dist_ops: list) -> bool:
    # the pseudo-inverse map minimizes the cross-operator term when every
    # realized pair satisfies A'^+ A' A^+ = A^+ (equal range projectors)
    seen = []
    for a in data_ops:
        if any(a is s for s in seen):
            continue
        seen.append(a)
        pa = np.linalg.pinv(a.to_dense())
        for b in dist_ops:
            pb_proj = np.linalg.pinv(b.to_dense()) @ b.to_dense()
            if not np.allclose(pb_proj @ pa, pa, atol=1e-10):
                return False
    return True


def loss_moi(
    batch: Batch,
    f: Estimator,
    op_dist: OperatorDistribution,
    lam: float = 1.0,
    noise: NoiseModel = None,
    alpha: float = 0.1,
    rng: RngStream = None,
    probes: int = 1,
    tau: float = None,
    with_grad: bool = False,
    include_consistency: bool = True,
):
    """Cross-operator estimator consistency plus measurement consistency."""
    if lam <= 0:
        raise ValueError("lam: must be > 0")
    if rng is None:
        raise ValueError("rng: required")
    N = len(batch)
    data_ops = batch.op_list() or [Identity(batch.ys.shape[1])]
    if _trivial_not_excluded(data_ops, op_dist.operators):
        warnings.warn(
            "operator distribution does not exclude the pseudo-inverse solution",
            stacklevel=2,
        )
    bundle1 = f.eval_bundle(batch.ys, ops=batch.ops)
    xhat = bundle1.value
    n = xhat.shape[1]
    ops2 = [op_dist.sample(rng) for _ in range(N)]
    Z = np.stack([ops2[i].apply(xhat[i]) for i in range(N)])
    bundle2 = f.eval_bundle(Z, ops=ops2)
    Rm = bundle2.value - xhat
    moi_items = np.mean(Rm * Rm, axis=-1)
    grad = np.zeros(f.param_count) if with_grad else None
    if with_grad:
        cot2 = 2.0 * Rm / (n * N)
        grad += lam * bundle2.vjp_params(cot2)
        back = bundle2.vjp_input(cot2)
        C1 = np.stack([ops2[i].adjoint(back[i]) for i in range(N)]) - cot2
        grad += lam * bundle1.vjp_params(C1)
    per_item = lam * moi_items
    resamples = N
    if include_consistency:
        res = _consistency_term(batch, f, noise, alpha, rng, with_grad, probes, tau)
        (cons, cgrad), extra = (res[0], res[1]) if with_grad else ((res[0], None), res[1])
        per_item = per_item + cons.per_item
        resamples += extra
        if with_grad:
            grad += cgrad
    return _finish(per_item, resamples, grad, with_grad)


def loss_ei(
    batch: Batch,
    f: Estimator,
    group: GroupAction,
    lam: float = 1.0,
    noise: NoiseModel = None,
    alpha: float = 0.1,
    rng: RngStream = None,
    probes: int = 1,
    tau: float = None,
    with_grad: bool = False,
    include_consistency: bool = True,
):
    """Transform consistency: re-measure a transformed estimate and demand
    the estimator reproduce the transform."""
    if lam <= 0:
        raise ValueError("lam: must be > 0")
    if rng is None:
        raise ValueError("rng: required")
    ops = batch.op_list()
    if ops is None:
        raise ValueError("ops: operators required")
    if is_equivariant(ops[0], group):
        warnings.warn(
            "operator commutes with the group; the transform term cannot "
            "constrain the nullspace",
            stacklevel=2,
        )
    N = len(batch)
    bundle1 = f.eval_bundle(batch.ys, ops=batch.ops)
    xhat = bundle1.value
    n = xhat.shape[1]
    gs = [group.elements[int(rng.generator.integers(0, len(group)))] for _ in range(N)]
    T = np.stack([gs[i].apply(xhat[i]) for i in range(N)])
    Z = np.stack([ops[i].apply(T[i]) for i in range(N)])
    bundle2 = f.eval_bundle(Z, ops=batch.ops)
    Rm = bundle2.value - T
    ei_items = np.mean(Rm * Rm, axis=-1)
    grad = np.zeros(f.param_count) if with_grad else None
    if with_grad:
        cot2 = 2.0 * Rm / (n * N)
        grad += lam * bundle2.vjp_params(cot2)
        back = bundle2.vjp_input(cot2)
        C1 = np.empty_like(xhat)
        for i in range(N):
            cot_t = ops[i].adjoint(back[i]) - cot2[i]
            C1[i] = gs[i].adjoint_apply(cot_t)
        grad += lam * bundle1.vjp_params(C1)
    per_item = lam * ei_items
    resamples = N
    if include_consistency:
        res = _consistency_term(batch, f, noise, alpha, rng, with_grad, probes, tau)
        (cons, cgrad), extra = (res[0], res[1]) if with_grad else ((res[0], None), res[1])
        per_item = per_item + cons.per_item
        resamples += extra
        if with_grad:
            grad += cgrad
    return _finish(per_item, resamples, grad, with_grad)


def loss_esplit(
    batch: Batch,
    f: Estimator,
    group: GroupAction,
    split_dist: SplitDistribution,
    rng: RngStream = None,
    sample_transforms: int = None,
    with_grad: bool = False,
):
    """Splitting loss averaged over the group: one split per item, every
    transform composed with both the full and the split operator."""
    if rng is None:
        raise ValueError("rng: required")
    ops = batch.op_list()
    if ops is None:
        raise ValueError("ops: operators required")
    N = len(batch)
    Y = batch.ys
    samples = _split_batch(batch, split_dist, rng)
    Y1 = np.stack([s.y1 for s in samples])
    if sample_transforms is None:
        idxs = list(range(len(group)))
    else:
        idxs = [
            int(rng.generator.integers(0, len(group)))
            for _ in range(sample_transforms)
        ]
    per_item = np.zeros(N)
    grad = np.zeros(f.param_count) if with_grad else None
    G = len(idxs)
    for gi in idxs:
        g = group.elements[gi]
        ops1g = [compose_with_transform(samples[i].op1, g) for i in range(N)]
        opsg = [compose_with_transform(ops[i], g) for i in range(N)]
        bundle = f.eval_bundle(Y1, ops=ops1g)
        C = np.zeros_like(bundle.value)
        for i in range(N):
            m = ops[i].m
            r = opsg[i].apply(bundle.value[i]) - Y[i]
            per_item[i] += np.sum(r * r) / (m * G)
            if with_grad:
                C[i] = opsg[i].adjoint(2.0 * r / (m * N * G))
        if with_grad:
            grad += bundle.vjp_params(C)
    return _finish(per_item, N * G, grad, with_grad)


# ---------------------------------------------------------------------------
# test-time averaging


def testtime_average(
    f: Estimator,
    y,
    A: LinearOperator = None,
    mode: str = "r2r",
    J: int = 1,
    noise: NoiseModel = None,
    alpha: float = 0.1,
    maskgen: MaskGenerator = None,
    split_dist: SplitDistribution = None,
    rng: RngStream = None,
    enumerate_all: bool = False,
):
    """Average estimator outputs over resampled inputs at test time."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError("y: single measurement expected")
    if J < 1:
        raise ValueError("J: must be >= 1")
    if mode == "r2r":
        if noise is None or rng is None:
            raise ValueError("r2r averaging: noise and rng required")
        out = np.zeros(f.forward(y[None, :], ops=A).shape[-1])
        for _ in range(J):
            pair = noise.gr2r_pair(y, alpha, rng)
            out += f.forward(pair.y1[None, :], ops=A)[0] / J
        return out
    if mode == "split":
        if maskgen is None or rng is None:
            raise ValueError("split averaging: maskgen and rng required")
        preds = []
        hidden = []
        for _ in range(J):
            ms = maskgen.generate(y, rng)
            preds.append(f.forward(ms.x_in[None, :], ops=A)[0])
            hidden.append(ms.target_w)
        P = np.stack(preds)
        H = np.stack(hidden)
        tot = H.sum(axis=0)
        plain = P.mean(axis=0)
        weighted = np.where(tot > 0, np.sum(H * P, axis=0) / np.where(tot > 0, tot, 1.0), plain)
        return weighted
    if mode == "q_weighted":
        if split_dist is None:
            raise ValueError("q_weighted averaging: split_dist required")
        if not split_dist.supports_weighting:
            raise CapabilityError("q_weighted: split distribution has no Q matrix")
        op = A if A is not None else Identity(y.size)
        if enumerate_all:
            entries = split_dist.enumerate_splits(y, op)
        else:
            if rng is None:
                raise ValueError("q_weighted sampling: rng required")
            entries = [(1.0 / J, split_dist.split(y, op, rng)) for _ in range(J)]
        qs = [split_dist.q_matrix(op, s.b1) for _, s in entries]
        qbar = np.zeros_like(qs[0])
        for (w, _), qv in zip(entries, qs):
            qbar += w * qv
        out = np.zeros(op.n)
        for (w, s), qv in zip(entries, qs):
            pred = f.forward(s.y1[None, :], ops=s.op1)[0]
            out += w * (qv / qbar) * pred
        return out
    raise ValueError("mode: one of r2r, split, q_weighted")
