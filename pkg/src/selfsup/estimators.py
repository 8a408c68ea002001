"""Small differentiable reconstruction maps with exact gradients.

Two families: AffineEstimator (W y + b, optional structural zero diagonal
for blind-spot losses) and BackprojectionMlp (an MLP applied to the
pseudo-inverse back-projection of the measurement).  Both expose batched
forward, exact reverse-mode parameter gradients (vjp_params) and exact
forward-mode input Jacobian products (jvp_input); all derivatives are
hand-rolled and validated against central finite differences.

ReynoldsWrapper averages a base estimator over a transform group, which
makes the wrapped map exactly equivariant when the group is closed.

The activation is a shifted softplus, act(u) = log(1+e^u) - log 2, so it
is C^inf and act(0) = 0.
"""

from __future__ import annotations

import numpy as np

from .linalg import as_f64
from .operators import GroupAction, LinearOperator, compose_with_transform
from .rng import RngStream


def _act(u):
    return np.logaddexp(0.0, u) - np.log(2.0)


def _act_d(u):
    # derivative of shifted softplus = sigmoid
    return 0.5 * (1.0 + np.tanh(0.5 * u))


class EvalBundle:
    """forward value plus closures for parameter/input derivatives.

    vjp_params: output-cotangent (N, n) -> flat parameter gradient.
    jvp_input:  input-tangent (N, m) -> (df/dy) tangent, (N, n).
    vjp_input:  output-cotangent (N, n) -> (df/dy)^T cotangent, (N, m);
                needed when f feeds its own output back as an input
                (operator-consistency losses).
    """

    def __init__(self, value, vjp_params, jvp_input, vjp_input=None):
        self.value = value
        self.vjp_params = vjp_params
        self.jvp_input = jvp_input
        self.vjp_input = vjp_input


def _rows(Y):
    Y = as_f64(Y, "Y")
    if Y.ndim == 1:
        return Y[None, :], True
    if Y.ndim != 2:
        raise ValueError("Y: must be 1-D or 2-D")
    return Y, False


class Estimator:
    n: int
    m: int

    def get_params(self) -> np.ndarray:
        raise NotImplementedError

    def set_params(self, theta) -> None:
        raise NotImplementedError

    @property
    def param_count(self) -> int:
        return self.get_params().size

    def forward(self, Y, ops=None) -> np.ndarray:
        return self.eval_bundle(Y, ops=ops).value

    def eval_bundle(self, Y, ops=None) -> EvalBundle:
        raise NotImplementedError

    def param_jacobian_fro2(self, Y, ops=None) -> np.ndarray:
        """Per-item ||df/dtheta||_F^2 via one vjp per output coordinate."""
        Y2, single = _rows(Y)
        out = np.zeros(Y2.shape[0])
        for i in range(Y2.shape[0]):
            bundle = self.eval_bundle(Y2[i], ops=_pick_op(ops, i))
            for j in range(self.n):
                e = np.zeros(self.n)
                e[j] = 1.0
                g = bundle.vjp_params(e)
                out[i] += float(g @ g)
        return out[0] if single else out


def _pick_op(ops, i):
    if ops is None or isinstance(ops, LinearOperator):
        return ops
    return ops[i]


def _op_list(ops, N):
    if ops is None:
        return None
    if isinstance(ops, LinearOperator):
        return [ops] * N
    if len(ops) != N:
        raise ValueError("ops: one operator per row required")
    return list(ops)


class AffineEstimator(Estimator):
    """f(y) = W y + b with W (n, m); ignores the operator argument.

    constraint "zero_diagonal" pins diag(W) to zero (requires m == n),
    realizing the blind-spot property df_i/dy_i = 0 exactly.
    """

    kind = "affine"

    def __init__(self, n: int, m: int = None, constraint: str = "none", rng: RngStream = None):
        self.n = int(n)
        self.m = int(m) if m is not None else self.n
        if constraint not in ("none", "zero_diagonal"):
            raise ValueError("constraint: one of none, zero_diagonal")
        if constraint == "zero_diagonal" and self.m != self.n:
            raise ValueError("zero_diagonal requires m == n")
        self.constraint = constraint
        if rng is None:
            self.W = np.zeros((self.n, self.m))
        else:
            self.W = rng.generator.normal(0.0, np.sqrt(1.0 / self.m), (self.n, self.m))
        self.b = np.zeros(self.n)
        self._apply_constraint()

    def _apply_constraint(self):
        if self.constraint == "zero_diagonal":
            np.fill_diagonal(self.W, 0.0)

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b])

    def set_params(self, theta) -> None:
        theta = as_f64(theta, "theta")
        k = self.n * self.m
        if theta.size != k + self.n:
            raise ValueError("theta: wrong length")
        self.W = theta[:k].reshape(self.n, self.m).copy()
        self.b = theta[k:].copy()
        self._apply_constraint()

    def effective_weight(self) -> np.ndarray:
        return self.W.copy()

    def eval_bundle(self, Y, ops=None) -> EvalBundle:
        Y2, single = _rows(Y)
        if Y2.shape[1] != self.m:
            raise ValueError("Y: last dimension must equal m")
        out = Y2 @ self.W.T + self.b
        W = self.W
        zero_diag = self.constraint == "zero_diagonal"

        def vjp_params(G):
            G2, _ = _rows(G)
            dW = G2.T @ Y2
            if zero_diag:
                np.fill_diagonal(dW, 0.0)
            return np.concatenate([dW.ravel(), G2.sum(axis=0)])

        def jvp_input(V):
            V2, vs = _rows(V)
            r = V2 @ W.T
            return r[0] if vs else r

        def vjp_input(C):
            C2, cs = _rows(C)
            r = C2 @ W
            return r[0] if cs else r

        val = out[0] if single else out
        return EvalBundle(val, vjp_params, jvp_input, vjp_input)

    def input_jacobian_dense(self) -> np.ndarray:
        return self.W.copy()

    def param_jacobian_fro2(self, Y, ops=None) -> np.ndarray:
        # exact: n (||y||^2 + 1) for the (W, b) parameterization; the
        # zero-diagonal constraint removes the y_i^2 term per output row
        Y2, single = _rows(Y)
        if self.constraint == "zero_diagonal":
            out = self.n * np.sum(Y2 * Y2, axis=-1) - np.sum(Y2 * Y2, axis=-1) + self.n
        else:
            out = self.n * np.sum(Y2 * Y2, axis=-1) + self.n
        return float(out[0]) if single else out


class BackprojectionMlp(Estimator):
    """f(y, A) = mlp(A^+ y); plain mlp(y) when no operator is given.

    widths are the hidden layer sizes; weights init N(0, 1/fan_in),
    biases 0, drawn from the supplied stream.
    """

    kind = "backprojection_mlp"

    def __init__(self, n: int, widths, rng: RngStream, m: int = None):
        self.n = int(n)
        self.m = int(m) if m is not None else self.n
        self.widths = [int(w) for w in widths]
        if any(w <= 0 for w in self.widths):
            raise ValueError("widths: must be positive")
        dims = [self.n] + self.widths + [self.n]
        gen = rng.generator
        self.weights = []
        self.biases = []
        for din, dout in zip(dims[:-1], dims[1:]):
            self.weights.append(gen.normal(0.0, np.sqrt(1.0 / din), (dout, din)))
            self.biases.append(np.zeros(dout))

    def get_params(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_params(self, theta) -> None:
        theta = as_f64(theta, "theta")
        pos = 0
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            k = W.size
            self.weights[i] = theta[pos : pos + k].reshape(W.shape).copy()
            pos += k
            self.biases[i] = theta[pos : pos + b.size].copy()
            pos += b.size
        if pos != theta.size:
            raise ValueError("theta: wrong length")

    def _backproject(self, Y2, ops):
        if ops is None:
            if Y2.shape[1] != self.n:
                raise ValueError("Y: expected n columns without an operator")
            return Y2.copy(), None
        op_list = _op_list(ops, Y2.shape[0])
        U = np.stack([op.pinv_apply(y) for op, y in zip(op_list, Y2)])
        return U, op_list

    def eval_bundle(self, Y, ops=None) -> EvalBundle:
        Y2, single = _rows(Y)
        U, op_list = self._backproject(Y2, ops)
        # forward pass, caching pre-activations
        h = U
        pre = []
        acts = [h]
        L = len(self.weights)
        for i in range(L):
            z = h @ self.weights[i].T + self.biases[i]
            pre.append(z)
            h = _act(z) if i < L - 1 else z
            acts.append(h)
        out = h

        weights = [W.copy() for W in self.weights]

        def vjp_params(G):
            G2, _ = _rows(G)
            grads_W = [None] * L
            grads_b = [None] * L
            delta = G2
            for i in range(L - 1, -1, -1):
                grads_W[i] = delta.T @ acts[i]
                grads_b[i] = delta.sum(axis=0)
                if i > 0:
                    delta = (delta @ weights[i]) * _act_d(pre[i - 1])
            parts = []
            for gW, gb in zip(grads_W, grads_b):
                parts.append(gW.ravel())
                parts.append(gb)
            return np.concatenate(parts)

        def jvp_input(V):
            V2, vs = _rows(V)
            if op_list is None:
                t = V2.copy()
            else:
                t = np.stack([op.pinv_apply(v) for op, v in zip(op_list, V2)])
            for i in range(L):
                t = t @ weights[i].T
                if i < L - 1:
                    t = t * _act_d(pre[i])
            return t[0] if vs else t

        def vjp_input(C):
            C2, cs = _rows(C)
            delta = C2
            for i in range(L - 1, 0, -1):
                delta = (delta @ weights[i]) * _act_d(pre[i - 1])
            du = delta @ weights[0]
            if op_list is not None:
                du = np.stack([op.pinv_adjoint_apply(d) for op, d in zip(op_list, du)])
            return du[0] if cs else du

        val = out[0] if single else out
        return EvalBundle(val, vjp_params, jvp_input, vjp_input)


class ReynoldsWrapper(Estimator):
    """Group-averaged estimator (1/|G|) sum_g T_g base(y, A T_g).

    For a closed transform group and an operator-consuming base this map
    satisfies f(y, A T_h) = T_h^{-1} f(y, A) exactly.
    """

    kind = "reynolds"

    def __init__(self, base: Estimator, group: GroupAction):
        self.base = base
        self.group = group
        self.n = base.n
        self.m = base.m
        self._composed = {}

    def get_params(self) -> np.ndarray:
        return self.base.get_params()

    def set_params(self, theta) -> None:
        self.base.set_params(theta)

    def _compose(self, op: LinearOperator, gi: int) -> LinearOperator:
        key = (id(op), gi)
        if key not in self._composed:
            g = self.group.elements[gi]
            self._composed[key] = compose_with_transform(op, g)
        return self._composed[key]

    def eval_bundle(self, Y, ops=None) -> EvalBundle:
        if ops is None:
            raise ValueError("ops: ReynoldsWrapper requires an operator argument")
        Y2, single = _rows(Y)
        N = Y2.shape[0]
        op_list = _op_list(ops, N)
        G = len(self.group.elements)
        bundles = []
        vals = np.zeros((N, self.n))
        for gi, g in enumerate(self.group.elements):
            comp = [self._compose(op, gi) for op in op_list]
            b = self.base.eval_bundle(Y2, ops=comp)
            bundles.append((g, b))
            vals += g.apply(b.value) / G

        def vjp_params(Gc):
            G2, _ = _rows(Gc)
            total = None
            for g, b in bundles:
                pull = b.vjp_params(g.adjoint_apply(G2) / G)
                total = pull if total is None else total + pull
            return total

        def jvp_input(V):
            V2, vs = _rows(V)
            acc = np.zeros((V2.shape[0], self.n))
            for g, b in bundles:
                acc += g.apply(b.jvp_input(V2)) / G
            return acc[0] if vs else acc

        def vjp_input(C):
            C2, cs = _rows(C)
            acc = np.zeros((C2.shape[0], self.m))
            for g, b in bundles:
                acc += b.vjp_input(g.adjoint_apply(C2)) / G
            return acc[0] if cs else acc

        val = vals[0] if single else vals
        return EvalBundle(val, vjp_params, jvp_input, vjp_input)


class NullspaceWrapper(Estimator):
    """Hard measurement consistency: f(y, A) = A^+ y + (I - A^+ A) base(y, A).

    The range component of the output is pinned to the pseudo-inverse
    solution, so training moves only the component in null(A); losses that
    compare A f(y, A) against y see a constant.
    """

    kind = "nullspace"

    def __init__(self, base: Estimator):
        self.base = base
        self.n = base.n
        self.m = base.m

    def get_params(self) -> np.ndarray:
        return self.base.get_params()

    def set_params(self, theta) -> None:
        self.base.set_params(theta)

    def eval_bundle(self, Y, ops=None) -> EvalBundle:
        if ops is None:
            raise ValueError("ops: NullspaceWrapper requires an operator argument")
        Y2, single = _rows(Y)
        op_list = _op_list(ops, Y2.shape[0])
        b = self.base.eval_bundle(Y2, ops=op_list)

        def pnull(X):
            # I - A^+ A is symmetric, so the same map serves both directions
            return np.stack(
                [x - op.pinv_apply(op.apply(x)) for op, x in zip(op_list, X)]
            )

        anchor = np.stack([op.pinv_apply(y) for op, y in zip(op_list, Y2)])
        vals = anchor + pnull(np.asarray(b.value))

        def vjp_params(G):
            G2, _ = _rows(G)
            return b.vjp_params(pnull(G2))

        def jvp_input(V):
            V2, vs = _rows(V)
            direct = np.stack([op.pinv_apply(v) for op, v in zip(op_list, V2)])
            out = direct + pnull(b.jvp_input(V2))
            return out[0] if vs else out

        def vjp_input(C):
            C2, cs = _rows(C)
            direct = np.stack(
                [op.pinv_adjoint_apply(c) for op, c in zip(op_list, C2)]
            )
            out = direct + b.vjp_input(pnull(C2))
            return out[0] if cs else out

        val = vals[0] if single else vals
        return EvalBundle(val, vjp_params, jvp_input, vjp_input)


# divergence estimation backends


def input_jacobian_trace(
    f: Estimator,
    Y,
    noise_cov,
    backend: str = "analytic",
    rng: RngStream = None,
    probes: int = 1,
    tau: float = None,
    ops=None,
):
    """Per-item estimate of tr(Sigma df/dy).

    analytic: exact trace(Sigma W), affine only.
    hutchinson: mean of w^T (df/dy) w over probes, w ~ N(0, Sigma).
    ramani: mean of (Sigma w / tau)^T (f(y + tau w) - f(y)), w ~ N(0, I).
    """
    Y2, single = _rows(Y)
    N, m = Y2.shape
    S = np.asarray(noise_cov, dtype=np.float64)
    if S.ndim == 0:
        S = float(S) * np.eye(m)
    elif S.ndim == 1:
        S = np.diag(S)
    if backend == "analytic":
        if not isinstance(f, AffineEstimator):
            raise ValueError("backend analytic: affine estimators only")
        val = float(np.trace(S @ f.effective_weight()))
        out = np.full(N, val)
    elif backend == "hutchinson":
        if rng is None:
            raise ValueError("rng required for hutchinson")
        from .linalg import psd_sqrt

        sqrt = psd_sqrt(S)
        bundle = f.eval_bundle(Y2, ops=ops)
        out = np.zeros(N)
        for _ in range(probes):
            w = rng.generator.standard_normal((N, m)) @ sqrt.T
            out += np.sum(w * bundle.jvp_input(w), axis=-1) / probes
    elif backend == "ramani":
        if rng is None:
            raise ValueError("rng required for ramani")
        if tau is None or tau <= 0:
            raise ValueError("tau: must be > 0 for ramani")
        base = f.forward(Y2, ops=ops)
        out = np.zeros(N)
        for _ in range(probes):
            w = rng.generator.standard_normal((N, m))
            diff = f.forward(Y2 + tau * w, ops=ops) - base
            out += np.sum((w @ S.T) * diff, axis=-1) / (tau * probes)
    else:
        raise ValueError("backend: one of analytic, hutchinson, ramani")
    return float(out[0]) if single else out


def grad_check(f: Estimator, Y, probes: int = 5, rng: RngStream = None, ops=None) -> float:
    """Max relative error of vjp_params and jvp_input vs central differences."""
    if rng is None:
        raise ValueError("rng required")
    Y2, _ = _rows(Y)
    gen = rng.generator
    theta0 = f.get_params()
    worst = 0.0

    def rel(a, b):
        denom = max(abs(a), abs(b), 1e-12)
        return abs(a - b) / denom

    for _ in range(probes):
        G = gen.standard_normal((Y2.shape[0], f.n))
        # parameter direction
        d = gen.standard_normal(theta0.size)
        d /= np.linalg.norm(d)
        bundle = f.eval_bundle(Y2, ops=ops)
        analytic = float(bundle.vjp_params(G) @ d)
        h = 1e-6 * (1.0 + np.linalg.norm(theta0))
        f.set_params(theta0 + h * d)
        plus = float(np.sum(G * f.forward(Y2, ops=ops)))
        f.set_params(theta0 - h * d)
        minus = float(np.sum(G * f.forward(Y2, ops=ops)))
        f.set_params(theta0)
        worst = max(worst, rel(analytic, (plus - minus) / (2 * h)))
        # input direction, contracted against a random cotangent
        V = gen.standard_normal(Y2.shape)
        V /= np.linalg.norm(V)
        analytic = float(np.sum(G * bundle.jvp_input(V)))
        hy = 1e-6 * (1.0 + np.linalg.norm(Y2))
        plus = float(np.sum(G * f.forward(Y2 + hy * V, ops=ops)))
        minus = float(np.sum(G * f.forward(Y2 - hy * V, ops=ops)))
        worst = max(worst, rel(analytic, (plus - minus) / (2 * hy)))
    return worst
