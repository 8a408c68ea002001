"""Dense float64 linear algebra helpers shared by the other modules."""

from __future__ import annotations

import numpy as np

DEFAULT_PINV_TOL = 1e-12


def as_f64(a, name: str = "array") -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name}: entries must be finite")
    return out


def svd_pinv_apply(M, v, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Apply the Moore-Penrose pseudo-inverse of M to v.

    Singular values below tol * sigma_max are treated as zero.
    """
    M = as_f64(M, "M")
    v = as_f64(v, "v")
    if tol <= 0:
        raise ValueError("tol: must be > 0")
    if M.ndim != 2 or v.shape[-1] != M.shape[0]:
        raise ValueError(f"shape mismatch: M is {M.shape}, v has last dim {v.shape[-1]}")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(v.shape[:-1] + (M.shape[1],))
    inv = np.where(s > tol * s[0], 1.0 / np.where(s == 0, 1.0, s), 0.0)
    return (v @ U) * inv @ Vt


def pinv_factors(M, tol: float = DEFAULT_PINV_TOL):
    """SVD factors (U, s_inv, Vt) for repeated pseudo-inverse application."""
    M = as_f64(M, "M")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size and s[0] > 0:
        s_inv = np.where(s > tol * s[0], 1.0 / np.where(s == 0, 1.0, s), 0.0)
    else:
        s_inv = np.zeros_like(s)
    return U, s_inv, Vt


def psd_inv_sqrt(S) -> np.ndarray:
    """Inverse symmetric square root of a positive-definite matrix."""
    S = as_f64(S, "S")
    w, V = np.linalg.eigh(S)
    if np.min(w) <= 0:
        raise ValueError("S: must be positive definite")
    return (V * (1.0 / np.sqrt(w))) @ V.T


def psd_sqrt(S) -> np.ndarray:
    S = as_f64(S, "S")
    w, V = np.linalg.eigh(S)
    if np.min(w) < 0 and np.min(w) > -1e-12 * max(np.max(w), 1.0):
        w = np.clip(w, 0.0, None)
    if np.min(w) < 0:
        raise ValueError("S: must be positive semidefinite")
    return (V * np.sqrt(w)) @ V.T


def unitary_dft_matrix(n: int) -> np.ndarray:
    """Unitary DFT matrix (1/sqrt(n) normalization), complex128."""
    j = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(j, j) / n) / np.sqrt(n)
