"""Linear forward operators, group actions, and operator distributions.

All operators act on the last axis of float64 arrays, so a batch of
measurements is just a (N, n) array. Problem sizes stay small (n <= 64),
so every operator also exposes a cached dense matrix; pseudo-inverses go
through an SVD of that matrix, which keeps A A^+ an exact orthogonal
projector for every kind (including masked DFTs whose mask breaks
conjugate symmetry).

Complex measurements (masked_dft) are exposed as stacked real vectors,
real parts then imaginary parts, doubling m.
"""

from __future__ import annotations

import numpy as np

from .linalg import DEFAULT_PINV_TOL, as_f64, pinv_factors, unitary_dft_matrix


class LinearOperator:
    """Dense-backed linear map R^n -> R^m with adjoint and pseudo-inverse."""

    def __init__(self, kind: str, m: int, n: int):
        self.kind = kind
        self.m = int(m)
        self.n = int(n)
        self._dense = None
        self._pinv = None

    # subclasses may override apply/adjoint with fast paths
    def to_dense(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self._build_dense()
        return self._dense

    def _build_dense(self) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def apply(self, x) -> np.ndarray:
        x = as_f64(x, "x")
        if x.shape[-1] != self.n:
            raise ValueError(f"x: last dim {x.shape[-1]} != n={self.n}")
        return x @ self.to_dense().T

    def adjoint(self, u) -> np.ndarray:
        u = as_f64(u, "u")
        if u.shape[-1] != self.m:
            raise ValueError(f"u: last dim {u.shape[-1]} != m={self.m}")
        return u @ self.to_dense()

    def pinv_apply(self, u, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
        u = as_f64(u, "u")
        if u.shape[-1] != self.m:
            raise ValueError(f"u: last dim {u.shape[-1]} != m={self.m}")
        if self._pinv is None or self._pinv[0] != tol:
            self._pinv = (tol, pinv_factors(self.to_dense(), tol))
        U, s_inv, Vt = self._pinv[1]
        return (u @ U) * s_inv @ Vt

    def pinv_adjoint_apply(self, x, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
        """(A^+)^T x, the adjoint of the pseudo-inverse (for input cotangents)."""
        x = as_f64(x, "x")
        if x.shape[-1] != self.n:
            raise ValueError(f"x: last dim {x.shape[-1]} != n={self.n}")
        if self._pinv is None or self._pinv[0] != tol:
            self._pinv = (tol, pinv_factors(self.to_dense(), tol))
        U, s_inv, Vt = self._pinv[1]
        return (x @ Vt.T) * s_inv @ U.T

    def gram_dense(self) -> np.ndarray:
        M = self.to_dense()
        return M.T @ M

    def __repr__(self):  # pragma: no cover
        return f"LinearOperator(kind={self.kind!r}, m={self.m}, n={self.n})"


class Identity(LinearOperator):
    def __init__(self, n: int):
        super().__init__("identity", n, n)

    def _build_dense(self):
        return np.eye(self.n)

    def apply(self, x):
        return as_f64(x, "x").copy()

    def adjoint(self, u):
        return as_f64(u, "u").copy()

    def pinv_apply(self, u, tol: float = DEFAULT_PINV_TOL):
        return as_f64(u, "u").copy()

    def pinv_adjoint_apply(self, x, tol: float = DEFAULT_PINV_TOL):
        return as_f64(x, "x").copy()


class DiagonalMask(LinearOperator):
    """Embedded inpainting mask: y = b * x with m = n (unobserved entries zero)."""

    def __init__(self, mask):
        mask = as_f64(mask, "mask")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask: entries must be 0 or 1")
        super().__init__("diagonal_mask", mask.size, mask.size)
        self.mask = mask

    def _build_dense(self):
        return np.diag(self.mask)

    def apply(self, x):
        x = as_f64(x, "x")
        return x * self.mask

    def adjoint(self, u):
        u = as_f64(u, "u")
        return u * self.mask

    def pinv_apply(self, u, tol: float = DEFAULT_PINV_TOL):
        u = as_f64(u, "u")
        return u * self.mask

    def pinv_adjoint_apply(self, x, tol: float = DEFAULT_PINV_TOL):
        x = as_f64(x, "x")
        return x * self.mask


class MaskedDft(LinearOperator):
    """y = stack_real(diag(b) F x) with unitary F; m = 2n."""

    def __init__(self, mask):
        mask = as_f64(mask, "mask")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask: entries must be 0 or 1")
        n = mask.size
        super().__init__("masked_dft", 2 * n, n)
        self.mask = mask
        self._F = unitary_dft_matrix(n)

    def _build_dense(self):
        MF = self.mask[:, None] * self._F
        return np.concatenate([MF.real, MF.imag], axis=0)

    def apply(self, x):
        x = as_f64(x, "x")
        z = (x @ self._F.T) * self.mask
        return np.concatenate([z.real, z.imag], axis=-1)

    def adjoint(self, u):
        u = as_f64(u, "u")
        n = self.n
        z = (u[..., :n] + 1j * u[..., n:]) * self.mask
        return (z @ np.conj(self._F)).real


class SubsampledConv(LinearOperator):
    """Circular convolution with a kernel followed by stride subsampling."""

    def __init__(self, kernel, stride: int, n: int):
        kernel = as_f64(kernel, "kernel")
        if stride < 1 or n % stride != 0:
            raise ValueError("stride: must be >= 1 and divide n")
        if kernel.size > n:
            raise ValueError("kernel: longer than signal")
        super().__init__("subsampled_conv", n // stride, n)
        self.kernel = kernel
        self.stride = int(stride)

    def _build_dense(self):
        n = self.n
        k = np.zeros(n)
        k[: self.kernel.size] = self.kernel
        idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
        circ = k[idx]
        return circ[:: self.stride]


class Dense(LinearOperator):
    def __init__(self, M):
        M = as_f64(M, "M")
        if M.ndim != 2:
            raise ValueError("M: must be 2-d")
        super().__init__("dense", M.shape[0], M.shape[1])
        self._dense = M


class ComposedOperator(LinearOperator):
    """A acting after an invertible n x n transform T: x -> A(T x)."""

    def __init__(self, op: LinearOperator, transform: "GroupElement"):
        super().__init__("composed", op.m, op.n)
        self.base = op
        self.transform = transform

    def _build_dense(self):
        return self.base.to_dense() @ self.transform.to_dense()

    def apply(self, x):
        return self.base.apply(self.transform.apply(x))

    def adjoint(self, u):
        return self.transform.adjoint_apply(self.base.adjoint(u))


def compose_with_transform(op: LinearOperator, transform) -> LinearOperator:
    """Operator computing A(T x); transform is a GroupElement or dense matrix."""
    if not isinstance(transform, GroupElement):
        M = as_f64(transform, "transform")
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("transform: must be square")
        transform = GroupElement(
            M.shape[0],
            fwd=lambda x, M=M: x @ M.T,
            inv=lambda x, M=M: np.linalg.solve(M, x.T).T if x.ndim > 1 else np.linalg.solve(M, x),
            label="dense",
        )
    if transform.n != op.n:
        raise ValueError("transform: dimension mismatch with operator")
    return ComposedOperator(op, transform)


class GroupElement:
    """Invertible transform on R^n with an explicit inverse map."""

    def __init__(self, n: int, fwd, inv, label: str):
        self.n = int(n)
        self._fwd = fwd
        self._inv = inv
        self.label = label
        self._dense = None
        self._dense_T = None

    def apply(self, x):
        return self._fwd(as_f64(x, "x"))

    def inverse_apply(self, x):
        return self._inv(as_f64(x, "x"))

    def to_dense(self):
        # apply acts on rows of the identity, so column i of dense is T e_i
        if self._dense is None:
            self._dense = self.apply(np.eye(self.n)).T
        return self._dense

    def adjoint_apply(self, x):
        x = as_f64(x, "x")
        return x @ self.to_dense()

    def __repr__(self):  # pragma: no cover
        return f"GroupElement({self.label})"


def _shift_element(n, g):
    return GroupElement(
        n,
        lambda x, g=g: np.roll(x, g, axis=-1),
        lambda x, g=g: np.roll(x, -g, axis=-1),
        f"shift{g}",
    )


def _rot90_maps(side, k):
    def fwd(x, k=k, side=side):
        img = x.reshape(x.shape[:-1] + (side, side))
        return np.rot90(img, k=k, axes=(-2, -1)).reshape(x.shape)

    def inv(x, k=k, side=side):
        img = x.reshape(x.shape[:-1] + (side, side))
        return np.rot90(img, k=-k, axes=(-2, -1)).reshape(x.shape)

    return fwd, inv


class GroupAction:
    """Finite list of invertible transforms, identity first."""

    def __init__(self, kind: str, elements: list, finite_group: bool = True):
        self.kind = kind
        self.elements = elements
        self.finite_group = finite_group
        self.n = elements[0].n

    def __len__(self):
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)


def circular_shifts(n: int) -> GroupAction:
    return GroupAction("circular_shifts", [_shift_element(n, g) for g in range(n)])


def flips(n: int) -> GroupAction:
    ident = GroupElement(n, lambda x: x.copy(), lambda x: x.copy(), "id")
    rev = GroupElement(
        n,
        lambda x: np.flip(x, axis=-1).copy(),
        lambda x: np.flip(x, axis=-1).copy(),
        "reverse",
    )
    return GroupAction("flips", [ident, rev])


def rotations90(side: int) -> GroupAction:
    n = side * side
    elems = []
    for k in range(4):
        fwd, inv = _rot90_maps(side, k)
        elems.append(GroupElement(n, fwd, inv, f"rot{90 * k}"))
    return GroupAction("rotations90", elems)


def amplitude_scalings(n: int, scales) -> GroupAction:
    """Sampled continuous scaling family; 1.0 listed first.

    Finite positive-scalar sets other than {1} are not closed under
    composition, so the exhaustive closure check does not apply here.
    """
    scales = [float(s) for s in scales]
    if any(s <= 0 for s in scales):
        raise ValueError("scales: must be positive")
    if 1.0 not in scales:
        scales = [1.0] + scales
    else:
        scales = [1.0] + [s for s in scales if s != 1.0]
    elems = [
        GroupElement(n, lambda x, s=s: s * x, lambda x, s=s: x / s, f"scale{s}")
        for s in scales
    ]
    return GroupAction("amplitude_scalings", elems, finite_group=False)


def check_group(G: GroupAction, tol: float = 1e-12, rng=None) -> dict:
    """Verify identity-first, listed inverses, and (finite groups) closure.

    Closure is checked exhaustively against the listed dense matrices for
    finite groups with <= 64 elements; sampled continuous families
    (amplitude_scalings) skip it.
    """
    n = G.n
    probe = np.linspace(-1.0, 1.0, n) if rng is None else rng.generator.standard_normal(n)
    ident_ok = bool(np.allclose(G.elements[0].apply(probe), probe, atol=tol))

    inv_ok = all(
        np.allclose(e.inverse_apply(e.apply(probe)), probe, atol=tol) for e in G.elements
    )

    closure_ok = True
    if G.finite_group and len(G) <= 64:
        mats = [e.to_dense() for e in G.elements]
        for a in mats:
            for b in mats:
                prod = a @ b
                if not any(np.allclose(prod, c, atol=tol) for c in mats):
                    closure_ok = False
                    break
            if not closure_ok:
                break
    return {
        "identity_first": ident_ok,
        "inverses": inv_ok,
        "closure": closure_ok,
        "ok": ident_ok and inv_ok and closure_ok,
    }


class OperatorDistribution:
    """Finite distribution over operators sharing the signal dimension n."""

    def __init__(self, operators: list, weights=None):
        if not operators:
            raise ValueError("operators: must be nonempty")
        n = operators[0].n
        if any(op.n != n for op in operators):
            raise ValueError("operators: all must share n")
        if weights is None:
            weights = np.full(len(operators), 1.0 / len(operators))
        weights = as_f64(weights, "weights")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights: must be nonnegative and sum to 1")
        if weights.size != len(operators):
            raise ValueError("weights: length mismatch")
        self.operators = list(operators)
        self.weights = weights
        self.n = n

    def sample(self, rng) -> LinearOperator:
        i = rng.generator.choice(len(self.operators), p=self.weights)
        return self.operators[int(i)]


def stacked_rank_condition(ops: OperatorDistribution, tol: float = 1e-10) -> dict:
    """Check invertibility of E_A[A^T A] = sum_g w_g A_g^T A_g."""
    S = np.zeros((ops.n, ops.n))
    for w, op in zip(ops.weights, ops.operators):
        S += w * op.gram_dense()
    eigs = np.linalg.eigvalsh(S)
    return {"holds": bool(eigs[0] > tol), "min_eigenvalue": float(eigs[0])}


def is_equivariant(A: LinearOperator, G: GroupAction, tol: float = 1e-10) -> bool:
    """True iff A^T A commutes with every T_g (relative Frobenius tolerance)."""
    gram = A.gram_dense()
    scale = np.linalg.norm(gram)
    if scale == 0:
        return True
    worst = max(
        np.linalg.norm(gram @ e.to_dense() - e.to_dense() @ gram) for e in G.elements
    )
    return bool(worst <= tol * scale)
