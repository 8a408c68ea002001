import numpy as np
import pytest

from selfsup.operators import (
    ComposedOperator,
    Dense,
    DiagonalMask,
    GroupAction,
    Identity,
    MaskedDft,
    OperatorDistribution,
    SubsampledConv,
    amplitude_scalings,
    check_group,
    circular_shifts,
    compose_with_transform,
    flips,
    is_equivariant,
    rotations90,
    stacked_rank_condition,
)
from selfsup.rng import RngStream


def _dot_test(op, rng, probes=100, tol=1e-10):
    worst = 0.0
    for _ in range(probes):
        x = rng.standard_normal(op.n)
        u = rng.standard_normal(op.m)
        lhs = float(op.apply(x) @ u)
        rhs = float(x @ op.adjoint(u))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1.0))
    return worst


def _all_ops():
    rng = np.random.default_rng(0)
    mask = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 1.0])
    dft_mask = np.array([1.0, 1.0, 0.0, 0.0, 1.0, 0.0])
    return [
        Identity(6),
        DiagonalMask(mask),
        MaskedDft(dft_mask),
        SubsampledConv(np.array([0.5, 0.3, 0.2]), stride=2, n=6),
        Dense(rng.standard_normal((4, 6))),
    ]


def test_diagonal_mask_embedded_form():
    op = DiagonalMask(np.array([1.0, 0.0, 1.0]))
    assert np.allclose(op.apply(np.array([5.0, 6.0, 7.0])), [5.0, 0.0, 7.0])


def test_diagonal_mask_pinv_projection():
    op = DiagonalMask(np.array([1.0, 0.0, 1.0]))
    assert np.allclose(op.pinv_apply(np.array([5.0, 0.0, 7.0])), [5.0, 0.0, 7.0])
    rng = np.random.default_rng(1)
    A = op.to_dense()
    pinv = np.linalg.pinv(A)
    for _ in range(5):
        x = rng.standard_normal(3)
        assert np.allclose(A @ pinv @ A @ x, A @ x, atol=1e-12)


def test_masked_dft_full_mask_roundtrip():
    op = MaskedDft(np.ones(8))
    rng = np.random.default_rng(2)
    x = rng.standard_normal(8)
    assert np.allclose(op.pinv_apply(op.apply(x)), x, atol=1e-10)


def test_masked_dft_shapes_stacked_real():
    op = MaskedDft(np.array([1.0, 0.0, 1.0, 0.0]))
    assert op.n == 4 and op.m == 8
    y = op.apply(np.arange(4.0))
    assert y.shape == (8,)


@pytest.mark.parametrize("op_idx", range(5))
def test_dot_test_all_kinds(op_idx):
    op = _all_ops()[op_idx]
    assert _dot_test(op, np.random.default_rng(3)) <= 1e-10


def test_dot_test_composed():
    rng = np.random.default_rng(4)
    shifts = circular_shifts(6)
    for base in _all_ops():
        comp = compose_with_transform(base, shifts.elements[2])
        assert _dot_test(comp, rng, probes=20) <= 1e-10


@pytest.mark.parametrize(
    "op",
    [
        DiagonalMask(np.array([1.0, 0.0, 1.0, 1.0])),
        MaskedDft(np.array([1.0, 1.0, 0.0, 1.0])),  # conjugate-asymmetric mask
        MaskedDft(np.array([1.0, 0.0, 1.0, 0.0])),
    ],
)
def test_projector_invariant(op):
    A = op.to_dense()
    P = np.stack([op.apply(op.pinv_apply(e)) for e in np.eye(op.m)]).T
    assert np.allclose(P @ P, P, atol=1e-10)
    assert np.allclose(P, P.T, atol=1e-10)
    assert np.allclose(P @ A, A, atol=1e-10)


def test_stacked_rank_complementary_masks():
    ops = [DiagonalMask(np.array([1.0, 0.0])), DiagonalMask(np.array([0.0, 1.0]))]
    res = stacked_rank_condition(OperatorDistribution(ops, [0.5, 0.5]))
    assert res["holds"] is True
    assert abs(res["min_eigenvalue"] - 0.5) <= 1e-12


def test_stacked_rank_single_mask_fails():
    res = stacked_rank_condition(OperatorDistribution([DiagonalMask(np.array([1.0, 0.0]))], [1.0]))
    assert res["holds"] is False


def test_stacked_rank_matches_direct_rank():
    rng = np.random.default_rng(5)
    for trial in range(10):
        mats = [rng.standard_normal((2, 4)) for _ in range(3)]
        ops = [Dense(M) for M in mats]
        res = stacked_rank_condition(OperatorDistribution(ops, [1 / 3] * 3))
        stacked = np.vstack(mats)
        assert res["holds"] == (np.linalg.matrix_rank(stacked, tol=1e-8) == 4)


def test_equivariance_circulant_with_shifts():
    kernel = np.array([0.6, 0.3, 0.1])
    op = SubsampledConv(kernel, stride=1, n=6)
    assert is_equivariant(op, circular_shifts(6)) is True


def test_equivariance_mask_with_shifts_false():
    op = DiagonalMask(np.array([1.0, 0.0, 1.0, 1.0]))
    assert is_equivariant(op, circular_shifts(4)) is False


def test_equivariance_scalings_always():
    rng = np.random.default_rng(6)
    op = Dense(rng.standard_normal((3, 5)))
    assert is_equivariant(op, amplitude_scalings(5, [1.0, 2.0, 0.5])) is True


def test_shift_convention():
    shifts = circular_shifts(3)
    x = np.array([1.0, 2.0, 3.0])
    # shift by 1 moves entry i to position (i+1) mod n
    assert np.allclose(shifts.elements[1].apply(x), [3.0, 1.0, 2.0])


def test_compose_identity_with_shift():
    shifts = circular_shifts(3)
    comp = compose_with_transform(Identity(3), shifts.elements[1])
    assert np.allclose(comp.apply(np.array([1.0, 2.0, 3.0])), [3.0, 1.0, 2.0])


def test_compose_mask_with_shift():
    shifts = circular_shifts(3)
    comp = compose_with_transform(
        DiagonalMask(np.array([1.0, 0.0, 1.0])), shifts.elements[1]
    )
    assert np.allclose(comp.apply(np.array([1.0, 2.0, 3.0])), [3.0, 0.0, 2.0])


@pytest.mark.parametrize(
    "group",
    [circular_shifts(6), flips(5), rotations90(4)],
)
def test_finite_groups_closed(group):
    res = check_group(group)
    assert res["ok"], res


def test_rotations90_order():
    g = rotations90(3)
    assert len(g.elements) == 4
    x = np.arange(9.0)
    r1 = g.elements[1].apply(x)
    assert np.allclose(g.elements[1].inverse_apply(r1), x)
    # four quarter turns compose to the identity
    out = x
    for _ in range(4):
        out = g.elements[1].apply(out)
    assert np.allclose(out, x)


def test_amplitude_scalings_identity_first_not_finite():
    g = amplitude_scalings(4, [2.0, 0.5])
    assert g.elements[0].label.endswith("1.0") or np.allclose(
        g.elements[0].apply(np.ones(4)), np.ones(4)
    )
    assert g.finite_group is False


def test_group_inverse_probes():
    rng = np.random.default_rng(7)
    for g in [circular_shifts(5), flips(6), rotations90(3), amplitude_scalings(4, [3.0])]:
        for el in g.elements:
            x = rng.standard_normal(g.elements[0].n)
            assert np.allclose(el.inverse_apply(el.apply(x)), x, atol=1e-12)


def test_operator_distribution_validates_weights():
    ops = [Identity(3), Identity(3)]
    with pytest.raises(ValueError):
        OperatorDistribution(ops, [0.7, 0.7])


def test_operator_distribution_sample_deterministic():
    ops = [Identity(3), DiagonalMask(np.array([1.0, 0.0, 1.0]))]
    dist = OperatorDistribution(ops, [0.5, 0.5])
    a = [dist.sample(RngStream(5, i)).kind for i in range(8)]
    b = [dist.sample(RngStream(5, i)).kind for i in range(8)]
    assert a == b


def test_subsampled_conv_stride_must_divide():
    with pytest.raises(ValueError):
        SubsampledConv(np.array([1.0]), stride=4, n=6)


def test_composed_operator_dense_consistency():
    rng = np.random.default_rng(8)
    base = Dense(rng.standard_normal((4, 6)))
    comp = ComposedOperator(base, circular_shifts(6).elements[2])
    x = rng.standard_normal(6)
    assert np.allclose(comp.apply(x), comp.to_dense() @ x, atol=1e-12)


def test_compose_accepts_dense_matrix():
    rng = np.random.default_rng(9)
    base = Dense(rng.standard_normal((4, 6)))
    M = rng.standard_normal((6, 6))
    comp = compose_with_transform(base, M)
    x = rng.standard_normal(6)
    assert np.allclose(comp.apply(x), base.to_dense() @ M @ x, atol=1e-12)
    assert _dot_test(comp, rng, probes=20) <= 1e-10
