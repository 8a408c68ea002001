import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfsup.linalg import (
    as_f64,
    pinv_factors,
    psd_inv_sqrt,
    psd_sqrt,
    svd_pinv_apply,
    unitary_dft_matrix,
)


def test_identity_pinv():
    v = np.array([1.0, 2.0, 3.0])
    assert np.allclose(svd_pinv_apply(np.eye(3), v), v)


def test_rank_deficient_diagonal():
    M = np.diag([2.0, 0.0])
    out = svd_pinv_apply(M, np.array([4.0, 5.0]))
    assert np.allclose(out, [2.0, 0.0])


def test_full_rank_rectangular_axiom():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((5, 3))
    U, s_inv, Vt = pinv_factors(M)
    pinv = Vt.T @ np.diag(s_inv) @ U.T
    assert np.linalg.norm(M @ pinv @ M - M) <= 1e-10 * np.linalg.norm(M)


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 64),
    cols=st.integers(1, 64),
    seed=st.integers(0, 2**31 - 1),
    rank_cap=st.integers(1, 64),
)
def test_pinv_axioms_random(rows, cols, seed, rank_cap):
    rng = np.random.default_rng(seed)
    r = min(rows, cols, rank_cap)
    M = rng.standard_normal((rows, r)) @ rng.standard_normal((r, cols))
    U, s_inv, Vt = pinv_factors(M)
    pinv = Vt.T @ np.diag(s_inv) @ U.T
    scale = max(np.linalg.norm(M), 1e-30)
    assert np.linalg.norm(M @ pinv @ M - M) <= 1e-10 * scale
    assert np.linalg.norm(pinv @ M @ pinv - pinv) <= 1e-10 * max(np.linalg.norm(pinv), 1e-30)


def test_pinv_apply_batched_rows():
    rng = np.random.default_rng(1)
    M = rng.standard_normal((4, 6))
    V = rng.standard_normal((10, 4))
    batched = svd_pinv_apply(M, V)
    direct = np.stack([np.linalg.pinv(M) @ v for v in V])
    assert np.allclose(batched, direct, atol=1e-12)


def test_tolerance_cutoff_scales_with_sigma_max():
    M = np.diag([1e6, 1.0])
    # relative cutoff 1e-3: the unit singular value is below 1e-3 * 1e6
    out = svd_pinv_apply(M, np.array([1e6, 1.0]), tol=1e-3)
    assert np.allclose(out, [1.0, 0.0])


def test_psd_sqrt_roundtrip():
    rng = np.random.default_rng(2)
    B = rng.standard_normal((6, 6))
    S = B @ B.T + 0.5 * np.eye(6)
    R = psd_sqrt(S)
    assert np.allclose(R @ R, S, atol=1e-10)
    Ri = psd_inv_sqrt(S)
    assert np.allclose(Ri @ S @ Ri, np.eye(6), atol=1e-10)


def test_psd_inv_sqrt_requires_pd():
    with pytest.raises(ValueError):
        psd_inv_sqrt(np.diag([1.0, 0.0]))


def test_unitary_dft():
    F = unitary_dft_matrix(8)
    assert np.allclose(F @ F.conj().T, np.eye(8), atol=1e-12)


def test_as_f64_rejects_nonfinite():
    with pytest.raises(ValueError, match="x"):
        as_f64(np.array([1.0, np.nan]), "x")
