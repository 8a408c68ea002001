"""End-to-end acceptance checks: one runner per numbered criterion, each
printing a single pass/fail line at its stated tolerance.

Criterion 9's first clause checks the stated closed form for the loss
variance penalty; the exact second-moment computation gives a different
constant, so that clause fails by design and the line carries the analysis.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .estimators import (
    AffineEstimator,
    BackprojectionMlp,
    NullspaceWrapper,
    ReynoldsWrapper,
)
from .harness import (
    ArraySource,
    TrainConfig,
    gap_experiment,
    gradient_variance_probe,
    noisier2noise_equivalence,
    train,
    variance_probe,
)
from .losses import (
    Batch,
    loss_ei,
    loss_esplit,
    loss_mc,
    loss_msplit,
    loss_n2n,
    loss_pure,
    loss_r2r,
    loss_sup,
    loss_sure,
    loss_unsure,
    unsure_inner_max,
)
from .masks import identity_basis
from .noise import GammaNoise, GaussianNoise, PoissonNoise, snr_split_check
from .operators import Dense, DiagonalMask, circular_shifts
from .priors import AtomPrior, GmmPrior
from .rng import RngStream
from .splits import BernoulliSplit

__all__ = ["CriterionOutcome", "run_criterion", "run_all", "CRITERIA"]


@dataclass
class CriterionOutcome:
    number: int
    title: str
    passed: bool
    details: list = field(default_factory=list)
    note: str = ""
    clause_flags: list = field(default_factory=list)  # (name, bool) pairs

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        out = f"[{status}] criterion {self.number:2d}: {self.title}"
        if self.note:
            out += f" ({self.note})"
        return out


def _positive_gmm(n):
    return GmmPrior([[5.0] * n, [9.0] * n], [0.25, 0.25], [0.5, 0.5])


def _fixed_affine(n, seed=11, scale=0.3):
    f = AffineEstimator(n, rng=RngStream(seed))
    f.set_params(f.get_params() * scale)
    return f


def _gap_ok(diff_items, const):
    se = diff_items.std(ddof=1) / np.sqrt(diff_items.size)
    gap = abs(diff_items.mean() - const)
    return gap <= 3 * max(se, 1e-300), gap, se


def criterion_01() -> CriterionOutcome:
    """Each self-supervised loss matches the supervised loss up to its
    known constant, per pixel count n in {1, 4, 16}."""
    out = CriterionOutcome(1, "unbiasedness of every loss vs supervised", True)
    N = 100000
    for n in (1, 4, 16):
        rng = RngStream(1000 + n)
        X = np.maximum(_positive_gmm(n).sample(N, rng), 1e-6)
        f = _fixed_affine(n)
        sigma = 1.0
        gauss = GaussianNoise(sigma=sigma)
        Y = gauss.corrupt(X, rng)
        sup_y = loss_sup(Batch(Y, xs=X), f).per_item

        checks = []

        t0 = time.time()
        Y2 = gauss.corrupt(X, rng)
        lv = loss_n2n(Y, Y2, f)
        checks.append(("n2n", lv.per_item - sup_y, sigma**2, time.time() - t0))

        for label, noise, alpha in (
            ("r2r_gaussian", gauss, 0.5),
            ("gr2r_poisson", PoissonNoise(gain=0.5), 0.3),
            ("gr2r_gamma", GammaNoise(shape_l=20.0), 0.3),
        ):
            t0 = time.time()
            Yf = noise.corrupt(X, rng)
            pair_rng = RngStream(77 + n)
            lv = loss_r2r(Batch(Yf), f, noise, alpha, rng=pair_rng)
            # supervised loss at the same recycled input draw
            pair = noise.gr2r_pair(Yf, alpha, RngStream(77 + n))
            sup_in = loss_sup(Batch(pair.y1, xs=X), f).per_item
            checks.append((label, lv.per_item - sup_in, 0.0, time.time() - t0))

        cov = gauss.cov_dense(n)
        for backend in ("analytic", "hutchinson", "ramani"):
            t0 = time.time()
            lv = loss_sure(Batch(Y), f, cov, backend=backend,
                           rng=RngStream(5 + n), tau=1e-4)
            checks.append((f"sure_{backend}", lv.per_item - sup_y, 0.0,
                           time.time() - t0))

        t0 = time.time()
        gain = 0.5
        pois = PoissonNoise(gain=gain)
        Yp = pois.corrupt(X, rng)
        lv = loss_pure(Batch(Yp), f, gain=gain)
        sup_p = loss_sup(Batch(Yp, xs=X), f).per_item
        const = gain * float(np.mean(X))
        checks.append(("pure", lv.per_item - sup_p, const, time.time() - t0))

        for label, diff, const, dt in checks:
            ok, gap, se = _gap_ok(diff, const)
            out.details.append(
                f"n={n:2d} {label:14s} |gap|={gap:.3e} 3se={3 * se:.3e} "
                f"{'ok' if ok else 'VIOLATION'} ({dt:.1f}s)"
            )
            if not ok or dt > 60.0:
                out.passed = False
    return out


_SURE_TRAIN = dict(s0=1.0, sigma=1.0, N=32768, lr=5e-3, epochs=300,
                   batch=64, patience=40)


def _train_sure_scalar(seed_data=42, seed_est=9, sig2=None):
    p = _SURE_TRAIN
    rng = RngStream(seed_data)
    prior = GmmPrior([[0.0]], [p["s0"]], [1.0])
    X = prior.sample(p["N"], rng)
    Y = GaussianNoise(sigma=p["sigma"]).corrupt(X, rng)
    src = ArraySource(Y, xs=X)
    f = AffineEstimator(1, rng=RngStream(seed_est))
    cov = np.array([[p["sigma"] ** 2 if sig2 is None else sig2]])

    def fn(batch, f, with_grad, rng):
        return loss_sure(batch, f, cov, with_grad=with_grad)

    cfg = TrainConfig(lr=p["lr"], epochs=p["epochs"], batch_size=p["batch"],
                      early_stop_patience=p["patience"], seed=seed_data)
    f, rep = train(cfg, src, fn, f)
    return f, rep


def criterion_02() -> CriterionOutcome:
    """Divergence-trained affine map reaches the conjugate posterior mean."""
    out = CriterionOutcome(2, "divergence-trained map matches posterior mean", True)
    p = _SURE_TRAIN
    f, _ = _train_sure_scalar()
    w, b = f.get_params()
    w_star = p["s0"] / (p["s0"] + p["sigma"] ** 2)
    err = max(abs(w - w_star), abs(b))
    mse = w * w * (p["s0"] + p["sigma"] ** 2) - 2 * w * p["s0"] + p["s0"] + b * b
    mmse = p["sigma"] ** 2 * p["s0"] / (p["s0"] + p["sigma"] ** 2)
    ok1 = err <= 1e-2
    ok2 = abs(mse - mmse) <= 0.02 * mmse
    out.details.append(f"param error {err:.2e} (tol 1e-2)")
    out.details.append(f"mse {mse:.6f} vs mmse {mmse:.6f} (tol 2%)")
    out.passed = ok1 and ok2
    return out


_UNSURE_TRAIN = dict(s0=0.2, sigma=1.0, N=8192, lr=5e-3, inner_lr=5e-3,
                     epochs=200, batch=64)


def _train_unsure_scalar(seed):
    p = _UNSURE_TRAIN
    rng = RngStream(seed)
    X = GmmPrior([[0.0]], [p["s0"]], [1.0]).sample(p["N"], rng)
    Y = GaussianNoise(sigma=p["sigma"]).corrupt(X, rng)
    src = ArraySource(Y, xs=X)
    f = AffineEstimator(1, rng=RngStream(seed + 1))
    basis = identity_basis(1)
    state = {"eta": np.array([1.0])}

    def fn(batch, f, with_grad, rng):
        state["eta"] = unsure_inner_max(batch, f, basis, steps=1,
                                        lr=p["inner_lr"], eta0=state["eta"])
        return loss_unsure(batch, f, basis, state["eta"], with_grad=with_grad)

    cfg = TrainConfig(lr=p["lr"], epochs=p["epochs"], batch_size=p["batch"],
                      early_stop_patience=10**6, seed=seed, select="final")
    f, _ = train(cfg, src, fn, f)
    return f


def _train_sure_scalar_fast(seed, sig2):
    p = _UNSURE_TRAIN
    rng = RngStream(seed)
    X = GmmPrior([[0.0]], [p["s0"]], [1.0]).sample(p["N"], rng)
    Y = GaussianNoise(sigma=p["sigma"]).corrupt(X, rng)
    src = ArraySource(Y, xs=X)
    f = AffineEstimator(1, rng=RngStream(seed + 1))
    cov = np.array([[sig2]])

    def fn(batch, f, with_grad, rng):
        return loss_sure(batch, f, cov, with_grad=with_grad)

    cfg = TrainConfig(lr=p["lr"], epochs=p["epochs"], batch_size=p["batch"],
                      early_stop_patience=10**6, seed=seed, select="final")
    f, _ = train(cfg, src, fn, f)
    return f


def _scalar_mse(f, s0, sigma):
    w, b = f.get_params()
    return float(w * w * (s0 + sigma**2) - 2 * w * s0 + s0 + b * b)


def criterion_03() -> CriterionOutcome:
    """Adaptive-multiplier training reaches the zero-map error; pinned
    wrong levels lose to it."""
    out = CriterionOutcome(3, "adaptive noise-level training beats misspecified", True)
    p = _UNSURE_TRAIN
    mmse = p["sigma"] ** 2 * p["s0"] / (p["s0"] + p["sigma"] ** 2)
    target = mmse / (1.0 - mmse / p["sigma"] ** 2)
    seeds = list(range(15))
    un_mses, wins_low, wins_high = [], 0, 0
    for s in seeds:
        f_un = _train_unsure_scalar(300 + 7 * s)
        m_un = _scalar_mse(f_un, p["s0"], p["sigma"])
        un_mses.append(m_un)
        m_low = _scalar_mse(_train_sure_scalar_fast(300 + 7 * s, 0.25),
                            p["s0"], p["sigma"])
        m_high = _scalar_mse(_train_sure_scalar_fast(300 + 7 * s, 2.25),
                             p["s0"], p["sigma"])
        wins_low += int(m_low > m_un)
        wins_high += int(m_high > m_un)
    med = float(np.median(un_mses))
    ok1 = abs(med - target) <= 0.05 * target
    ok2 = wins_low > len(seeds) // 2 and wins_high > len(seeds) // 2
    out.details.append(
        f"adaptive mse median {med:.4f} vs target {target:.4f} (tol 5%)"
    )
    out.details.append(
        f"misspecified-level losses to adaptive: sigma 0.5x {wins_low}/15, "
        f"sigma 1.5x {wins_high}/15 (majority needed)"
    )
    out.passed = ok1 and ok2
    return out


def criterion_04() -> CriterionOutcome:
    """Measurement-pair second moments: independence, variance inflation,
    and SNR split, for all three noise families."""
    out = CriterionOutcome(4, "pair cross-covariance, variances, SNR split", True)
    n, draws = 8, 200000
    x = np.maximum(_positive_gmm(n).sample(1, RngStream(3))[0], 1e-6)
    X = np.broadcast_to(x, (draws, n))
    for label, noise in (
        ("gaussian", GaussianNoise(sigma=1.0)),
        ("poisson", PoissonNoise(gain=0.5)),
        ("gamma", GammaNoise(shape_l=20.0)),
    ):
        vbar = float(np.mean(noise.var_y(x)))
        for alpha in (0.1, 0.5):
            rng = RngStream(40)
            Y = noise.corrupt(X, rng)
            pair = noise.gr2r_pair(Y, alpha, rng)
            d1 = pair.y1 - X
            d2 = pair.y2 - X
            cross = np.mean(d1 * d2, axis=-1)
            ok_c, gap_c, se_c = _gap_ok(cross, 0.0)
            v1 = np.mean(d1 * d1, axis=-1)
            ok_v1, gap_v1, se_v1 = _gap_ok(v1, vbar / (1.0 - alpha))
            v2 = np.mean(d2 * d2, axis=-1)
            ok_v2, gap_v2, se_v2 = _gap_ok(v2, vbar / alpha)
            snr = snr_split_check(noise, x, alpha, draws, RngStream(41))
            ok_s = abs(snr["ratio_y1"] - (1.0 - alpha)) <= 0.02
            out.details.append(
                f"{label} alpha={alpha}: cross|{gap_c:.2e}|<=3se {ok_c}, "
                f"var1 gap {gap_v1:.2e} {ok_v1}, var2 gap {gap_v2:.2e} {ok_v2}, "
                f"snr ratio {snr['ratio_y1']:.4f} vs {1 - alpha} {ok_s}"
            )
            if not (ok_c and ok_v1 and ok_v2 and ok_s):
                out.passed = False
    return out


def criterion_05() -> CriterionOutcome:
    """Small-split recycling agrees with the divergence loss in expectation."""
    out = CriterionOutcome(5, "recycled pair at alpha 1e-3 matches divergence loss", True)
    n, N = 4, 100000
    rng = RngStream(50)
    X = _positive_gmm(n).sample(N, rng)
    gauss = GaussianNoise(sigma=1.0)
    Y = gauss.corrupt(X, rng)
    f = _fixed_affine(n)
    batch = Batch(Y)
    lv_r2r = loss_r2r(batch, f, gauss, 1e-3, rng=rng)
    lv_sure = loss_sure(batch, f, gauss.cov_dense(n))
    diff = lv_r2r.per_item - lv_sure.per_item
    ok, gap, se = _gap_ok(diff, 0.0)
    out.details.append(f"|mean diff| {gap:.3e} vs 3se {3 * se:.3e}")
    out.passed = ok
    return out


_C6 = dict(p=0.8, q=0.5, n=3)
_C6_ATOMS = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
])


def _c6_enumerate():
    """All (atom, acquisition mask, split mask) outcomes with probabilities."""
    p, q, n = _C6["p"], _C6["q"], _C6["n"]
    prior = AtomPrior(_C6_ATOMS)
    rows = []
    for k in range(prior.K):
        for bbits in range(2**n):
            b = np.array([(bbits >> i) & 1 for i in range(n)], dtype=np.float64)
            pb = float(np.prod(np.where(b == 1, p, 1 - p)))
            for wbits in range(2**n):
                w = np.array([(wbits >> i) & 1 for i in range(n)], dtype=np.float64)
                pw = float(np.prod(np.where(w == 1, q, 1 - q)))
                prob = prior.weights[k] * pb * pw
                x = prior.atoms[k]
                y = b * x
                b1 = w * b
                y1 = b1 * y
                rows.append((prob, x, b, b1, y1))
    return rows


def criterion_06() -> CriterionOutcome:
    """Split-loss conditional moments against brute-force enumeration, and
    split-trained parameters against the exact population optimum."""
    out = CriterionOutcome(6, "splitting: Q matrices and trained map vs Bayes", True)
    p, q, n = _C6["p"], _C6["q"], _C6["n"]
    split = BernoulliSplit(q=q, acquisition_p=p)
    rows = _c6_enumerate()

    # Q matrix vs enumeration for a few observed split patterns
    q_err = 0.0
    for b1_bits in range(2**n):
        b1 = np.array([(b1_bits >> i) & 1 for i in range(n)], dtype=np.float64)
        num = np.zeros(n)
        den = 0.0
        for prob, x, b, b1_o, y1 in rows:
            if np.array_equal(b1_o, b1):
                num += prob * b
                den += prob
        if den == 0.0:
            continue
        Q = split.q_matrix(DiagonalMask(np.ones(n)), b1)
        q_err = max(q_err, float(np.max(np.abs(np.diag(Q) - num / den))))
    ok_q = q_err <= 1e-12
    out.details.append(f"Q diagonal vs enumeration: max err {q_err:.2e} (tol 1e-12)")

    # unrestricted weighted minimizer equals the Bayes mean per outcome class
    groups = {}
    for prob, x, b, b1, y1 in rows:
        key = (tuple(b1), tuple(np.round(y1, 12)))
        groups.setdefault(key, []).append((prob, x, b))
    bayes_gap = 0.0
    for key, members in groups.items():
        b1 = np.array(key[0])
        tot = sum(m[0] for m in members)
        bayes = sum(m[0] * m[1] for m in members) / tot
        for i in range(n):
            den = sum(m[0] * m[2][i] for m in members)
            if den == 0.0:
                continue
            num = sum(m[0] * m[2][i] * m[1][i] for m in members)
            bayes_gap = max(bayes_gap, abs(num / den - bayes[i]))
    ok_b = bayes_gap <= 1e-12
    out.details.append(
        f"weighted minimizer vs posterior mean: max gap {bayes_gap:.2e} (tol 1e-12)"
    )

    # exact affine population optimum: regression of x on y1 (supervised route)
    D = np.array([np.concatenate([y1, [1.0]]) for _, x, b, b1, y1 in rows])
    Xs = np.array([x for _, x, b, b1, y1 in rows])
    P = np.array([prob for prob, *_ in rows])
    sw = np.sqrt(P)[:, None]
    W_star = np.zeros((n, n))
    b_star = np.zeros(n)
    for i in range(n):
        sol, *_ = np.linalg.lstsq(D * sw, Xs[:, i] * sw[:, 0], rcond=None)
        W_star[i] = sol[:n]
        b_star[i] = sol[n]

    # train the weighted split loss on sampled data (self-supervised route)
    N = 32768
    rng = RngStream(60)
    prior = AtomPrior(_C6_ATOMS)
    X = prior.sample(N, rng)
    B = (rng.generator.random((N, n)) < p).astype(np.float64)
    Y = B * X
    ops = [DiagonalMask(B[i]) for i in range(N)]
    src = ArraySource(Y, ops=ops, xs=X)
    f = AffineEstimator(n, rng=RngStream(61))

    def fn(batch, f, with_grad, rng):
        return loss_msplit(batch, f, split, weighted=True, rng=rng,
                           with_grad=with_grad)

    cfg = TrainConfig(lr=1e-2, epochs=150, batch_size=256,
                      early_stop_patience=10**6, seed=60, select="final")
    f, _ = train(cfg, src, fn, f)
    theta_star = np.concatenate([W_star.ravel(), b_star])
    perr = float(np.max(np.abs(f.get_params() - theta_star)))
    ok_t = perr <= 1e-2
    out.details.append(f"trained vs population-optimal params: max err {perr:.2e} (tol 1e-2)")

    out.passed = ok_q and ok_b and ok_t
    return out


def _c7_atoms():
    base_a = np.array([1.0, 1.0, 0.0, 0.0])
    base_b = np.array([1.0, 1.0, 0.0, 2.0])
    rows = [np.roll(base_a, k) for k in range(4)]
    rows += [np.roll(base_b, k) for k in range(4)]
    return np.stack(rows)


def _c7_nullspace_oracle(atoms, w, vis):
    total = 0.0
    for k, a in enumerate(atoms):
        match = np.all(np.isclose(atoms[:, vis], a[vis]), axis=1)
        pw = w * match
        pw = pw / pw.sum()
        pm = pw @ atoms[:, ~vis]
        total += w[k] * float(np.sum((pm - a[~vis]) ** 2))
    return total


def criterion_07() -> CriterionOutcome:
    """Split-plus-transform training on a shift-closed prior recovers the
    unobserved coordinate; a consistency-only baseline cannot; a commuting
    operator removes the advantage.

    Trained maps use the hard data-consistency wrapper, so learning acts
    only on the operator's nullspace.  The pure transform-consistency
    objective is reported alongside but cannot carry the recovery clause:
    on a shift group it has exact zero-loss recurrence solutions (here
    x3_hat = y0 - y1 + y2 satisfies every shift-consistency equation
    identically) whose error on this prior is far above the bound, and
    training reliably converges to them."""
    out = CriterionOutcome(7, "nullspace recovery via transforms", True)
    n = 4
    atoms = _c7_atoms()
    prior = AtomPrior(atoms)
    mask = np.array([1.0, 1.0, 1.0, 0.0])
    vis = mask.astype(bool)
    A = DiagonalMask(mask)
    group = circular_shifts(n)
    rng = RngStream(70)
    N = 1024
    X = prior.sample(N, rng)
    Y = A.apply(X)
    src = ArraySource(Y, ops=A, xs=X)
    oracle = _c7_nullspace_oracle(atoms, prior.weights, vis)
    var_null = float(np.var(atoms[:, 3]))

    def null_mse(f, Yv=Y, Xv=X, op=A):
        Xh = f.eval_bundle(Yv, ops=op).value
        return float(np.mean((Xh[:, 3] - Xv[:, 3]) ** 2))

    def mc_fn(b, f, wg, r):
        return loss_mc(b, f, with_grad=wg)

    def ei_fn(b, f, wg, r):
        return loss_ei(b, f, group, rng=r, with_grad=wg)

    split = BernoulliSplit(q=0.7)

    def esplit_fn(b, f, wg, r):
        return loss_esplit(b, f, group, split, rng=r, with_grad=wg)

    cfg = TrainConfig(lr=5e-3, epochs=300, batch_size=256,
                      early_stop_patience=10**6, seed=71, select="final")

    f_es = NullspaceWrapper(BackprojectionMlp(n, [32, 32], RngStream(73)))
    f_es, _ = train(cfg, src, esplit_fn, f_es)
    m_es = null_mse(f_es)
    ok_es = m_es <= 2.0 * oracle
    out.details.append(
        f"split+transform-trained nullspace mse {m_es:.4f} vs 2x oracle "
        f"{2 * oracle:.4f}"
    )

    f_ei = NullspaceWrapper(BackprojectionMlp(n, [32, 32], RngStream(72)))
    f_ei, _ = train(cfg, src, ei_fn, f_ei)
    m_ei = null_mse(f_ei)
    out.details.append(
        f"pure transform-trained nullspace mse {m_ei:.4f} (recurrence "
        f"collusion, expected above the bound; the exact colluding map "
        f"scores {_c7_collusion_mse(atoms, prior.weights):.4f})"
    )

    # consistency-only baseline: pseudo-inverse visible part, hidden filled
    # with the grand mean of observed entries (legal under shift invariance)
    warm = TrainConfig(lr=1e-2, epochs=100, batch_size=256,
                       early_stop_patience=10**6, seed=70, select="final")
    f_mc = AffineEstimator(n)
    c = float(np.mean(Y[:, vis]))
    f_mc.set_params(np.concatenate([np.diag(mask).ravel(),
                                    np.where(vis, 0.0, c)]))
    f_mc, _ = train(warm, src, mc_fn, f_mc)
    m_mc = null_mse(f_mc)
    ok_mc = abs(m_mc - var_null) <= 0.10 * var_null
    out.details.append(
        f"consistency-only nullspace mse {m_mc:.4f} vs prior variance "
        f"{var_null:.4f} (tol 10%)"
    )

    # negative control: circulant operator commutes with every shift
    import warnings as _w

    kernel = np.array([1.0, 1.0, 0.0, 0.0])
    C = np.stack([np.roll(kernel, k) for k in range(n)])
    A_eq = Dense(C)
    Y_eq = A_eq.apply(X)
    v = np.array([1.0, -1.0, 1.0, -1.0]) / 2.0
    var_v = float(np.mean((X @ v) ** 2))
    f_eq = NullspaceWrapper(BackprojectionMlp(n, [32, 32], RngStream(74)))
    src_eq = ArraySource(Y_eq, ops=A_eq, xs=X)
    with _w.catch_warnings():
        _w.simplefilter("ignore")
        f_eq, _ = train(cfg, src_eq, ei_fn, f_eq)
    Xh = f_eq.eval_bundle(Y_eq, ops=A_eq).value
    m_eq = float(np.mean(((Xh - X) @ v) ** 2))
    ok_eq = abs(m_eq - var_v) <= 0.25 * var_v
    out.details.append(
        f"commuting-operator control: invariant-direction mse {m_eq:.4f} vs "
        f"prior second moment {var_v:.4f} (no improvement expected)"
    )

    out.clause_flags = [
        ("esplit_recovery", ok_es),
        ("mc_baseline", ok_mc),
        ("commuting_op_control", ok_eq),
    ]
    out.passed = ok_es and ok_mc and ok_eq
    return out


def _c7_collusion_mse(atoms, weights):
    """Exact prior risk of the zero-loss recurrence x3_hat = y0 - y1 + y2."""
    pred = atoms[:, 0] - atoms[:, 1] + atoms[:, 2]
    return float(np.sum(weights * (pred - atoms[:, 3]) ** 2))


def criterion_08() -> CriterionOutcome:
    """Group-averaged reconstructor makes the transform-augmented split
    loss coincide with the plain split loss."""
    out = CriterionOutcome(8, "split loss equivalence under group averaging", True)
    n = 4
    rng = RngStream(80)
    X = np.maximum(_positive_gmm(n).sample(64, rng), 1e-6)
    A = DiagonalMask(np.array([1.0, 1.0, 1.0, 1.0]))
    Y = A.apply(X)
    group = circular_shifts(n)
    base = BackprojectionMlp(n, [8], RngStream(81))
    f_avg = ReynoldsWrapper(base, group)
    split = BernoulliSplit(q=0.5)
    batch = Batch(Y, ops=A)
    lv_es = loss_esplit(batch, f_avg, group, split, rng=RngStream(82))
    lv_ms = loss_msplit(batch, f_avg, split, rng=RngStream(82))
    gap = abs(lv_es.value - lv_ms.value)
    ok = gap <= 1e-10
    out.details.append(f"|esplit - msplit| = {gap:.2e} (tol 1e-10)")
    out.passed = ok
    return out


def criterion_09() -> CriterionOutcome:
    """Loss-variance penalty of the paired loss (stated closed form), and
    the gradient-variance penalty formula."""
    out = CriterionOutcome(9, "variance penalties of the paired loss", True)
    rng = RngStream(90)
    prior = GmmPrior([[0.0], [2.0]], [0.5, 0.25], [0.6, 0.4])
    noise = GaussianNoise(sigma=1.0)
    f = AffineEstimator(1)
    f.set_params(np.array([0.5, 0.1]))
    probe = variance_probe(f, prior, noise, 200000, 1, rng)
    gap_printed = abs(probe["delta_measured"] - probe["delta_printed"])
    ok_printed = gap_printed <= 3 * probe["se_delta"]
    out.details.append(
        f"loss-variance excess measured {probe['delta_measured']:.4f}, stated "
        f"form {probe['delta_printed']:.4f}, gap {gap_printed:.4f} vs 3se "
        f"{3 * probe['se_delta']:.4f} -> {'ok' if ok_printed else 'VIOLATION'}"
    )
    gap_derived = abs(probe["delta_measured"] - probe["delta_derived"])
    ok_derived = gap_derived <= 3 * probe["se_delta"]
    out.details.append(
        f"exact second-moment form {probe['delta_derived']:.4f}, gap "
        f"{gap_derived:.4f} -> {'ok' if ok_derived else 'VIOLATION'}"
    )
    gprobe = gradient_variance_probe(f, prior, noise, 200000, rng)
    gap_g = abs(gprobe["gap_measured"] - gprobe["formula_term"])
    ok_g = gap_g <= 3 * gprobe["se_gap"]
    out.details.append(
        f"gradient-variance excess {gprobe['gap_measured']:.5f} vs formula "
        f"{gprobe['formula_term']:.5f}, gap {gap_g:.5f} vs 3se "
        f"{3 * gprobe['se_gap']:.5f}"
    )
    out.clause_flags = [
        ("variance_gap_as_stated", ok_printed),
        ("variance_gap_derived", ok_derived),
        ("gradient_variance_gap", ok_g),
    ]
    out.passed = ok_printed and ok_g
    if not ok_printed:
        out.note = (
            "stated closed form overstates the excess by sigma^4/n; the exact "
            "second-moment computation (which passes above) carries the "
            "correction; gradient clause "
            + ("passes" if ok_g else "fails")
        )
    return out


def criterion_10() -> CriterionOutcome:
    """Hold-out selection lands within 5% of the oracle-best epoch."""
    out = CriterionOutcome(10, "validation-chosen epoch near oracle best", True)
    worst = 0.0
    for s in range(15):
        rng = RngStream(1100 + s)
        X = GmmPrior([[0.0]], [1.0], [1.0]).sample(8192, rng)
        Y = GaussianNoise(sigma=1.0).corrupt(X, rng)
        src = ArraySource(Y, xs=X)
        f = AffineEstimator(1, rng=RngStream(1200 + s))
        cov = np.array([[1.0]])

        def fn(batch, f, with_grad, rng):
            return loss_sure(batch, f, cov, with_grad=with_grad)

        cfg = TrainConfig(lr=5e-3, epochs=150, batch_size=64,
                          early_stop_patience=30, seed=1100 + s)
        _, rep = train(cfg, src, fn, f)
        chosen = rep.curves[rep.best_epoch]["oracle_mse"]
        best = min(c["oracle_mse"] for c in rep.curves)
        ratio = chosen / best
        worst = max(worst, ratio)
        if ratio > 1.05:
            out.passed = False
    out.details.append(f"worst chosen/best oracle-mse ratio over 15 seeds: {worst:.4f} (tol 1.05)")
    return out


def criterion_11() -> CriterionOutcome:
    """Trained-map oracle gap decays with sample count at a parametric rate."""
    out = CriterionOutcome(11, "sample-complexity slopes in [-0.8, -0.2]", True)
    t0 = time.time()
    rng = RngStream(1110)
    prior = GmmPrior([[0.0], [2.0]], [0.5, 0.25], [0.6, 0.4])
    noise = GaussianNoise(sigma=1.0)
    Ns = (32, 64, 128, 256, 512, 1024, 2048)
    for kind in ("sure", "n2n"):
        res = gap_experiment(Ns, 15, prior, noise, kind, rng, test_size=200000)
        ok = -0.8 <= res["slope"] <= -0.2
        out.details.append(
            f"{kind}: slope {res['slope']:.3f} ci95 +/-{res['slope_ci95']:.3f} "
            f"dropped {res['dropped']}"
        )
        if not ok:
            out.passed = False
    dt = time.time() - t0
    out.details.append(f"runtime {dt:.0f}s (budget 900s)")
    if dt > 900:
        out.passed = False
    return out


def criterion_12() -> CriterionOutcome:
    """Corrected two-noise training matches recycled-pair training and the
    posterior mean at the noisier input."""
    out = CriterionOutcome(12, "corrected noisier-input map matches recycled pair", True)
    prior = GmmPrior([[0.0]], [1.0], [1.0])
    res = noisier2noise_equivalence(prior, 1.0, 1.0, 200000, RngStream(1210))
    ok_r = res["max_param_gap_r2r"] <= 2e-2
    ok_o = res["max_param_gap_oracle"] <= 1e-2
    out.details.append(
        f"corrected vs recycled-pair params: {res['max_param_gap_r2r']:.2e} (tol 2e-2)"
    )
    out.details.append(
        f"corrected vs posterior-mean params: {res['max_param_gap_oracle']:.2e} (tol 1e-2)"
    )
    out.passed = ok_r and ok_o
    return out


def _fd_param_grad(f, y, c, eps=1e-6):
    theta0 = f.get_params().copy()
    g = np.zeros_like(theta0)
    for j in range(theta0.size):
        for s, bucket in ((+1, 0), (-1, 1)):
            th = theta0.copy()
            th[j] += s * eps
            f.set_params(th)
            val = float(np.dot(c, f.eval_bundle(y[None, :]).value[0]))
            g[j] += s * val
    f.set_params(theta0)
    return g / (2 * eps)


def criterion_13() -> CriterionOutcome:
    """Estimator derivative routines agree with central differences; the
    masked-diagonal class has exactly zero self-derivatives."""
    out = CriterionOutcome(13, "derivative fidelity and exact blind-spot zeros", True)
    rng = RngStream(1300)
    n = 4
    y = rng.generator.standard_normal(n)
    c = rng.generator.standard_normal(n)
    v = rng.generator.standard_normal(n)
    ests = [
        ("affine", AffineEstimator(n, rng=RngStream(1))),
        ("zero_diag", AffineEstimator(n, constraint="zero_diagonal",
                                      rng=RngStream(2))),
        ("mlp", BackprojectionMlp(n, [8, 8], RngStream(3))),
        ("reynolds", ReynoldsWrapper(BackprojectionMlp(n, [8], RngStream(4)),
                                     circular_shifts(n))),
    ]
    eps = 1e-6
    for label, f in ests:
        bundle = f.eval_bundle(y[None, :])
        g = bundle.vjp_params(c[None, :])
        g_fd = _fd_param_grad(f, y, c, eps)
        scale = max(1.0, float(np.max(np.abs(g_fd))))
        err_p = float(np.max(np.abs(g - g_fd))) / scale
        jv = f.eval_bundle(y[None, :]).jvp_input(v[None, :])[0]
        f_plus = f.eval_bundle((y + eps * v)[None, :]).value[0]
        f_minus = f.eval_bundle((y - eps * v)[None, :]).value[0]
        jv_fd = (f_plus - f_minus) / (2 * eps)
        err_j = float(np.max(np.abs(jv - jv_fd))) / max(1.0, float(np.max(np.abs(jv_fd))))
        vj = f.eval_bundle(y[None, :]).vjp_input(c[None, :])[0]
        err_adj = abs(float(np.dot(c, jv)) - float(np.dot(vj, v))) / max(
            1.0, abs(float(np.dot(c, jv)))
        )
        ok = err_p <= 1e-5 and err_j <= 1e-5 and err_adj <= 1e-5
        out.details.append(
            f"{label}: param-grad rel {err_p:.1e}, input-jvp rel {err_j:.1e}, "
            f"adjoint rel {err_adj:.1e} (tol 1e-5)"
        )
        if not ok:
            out.passed = False
    fz = AffineEstimator(n, constraint="zero_diagonal", rng=RngStream(5))
    bundle = fz.eval_bundle(y[None, :])
    diag = np.array([bundle.jvp_input(np.eye(n)[j][None, :])[0][j] for j in range(n)])
    ok_z = np.all(diag == 0.0)
    out.details.append(f"blind-spot diagonal derivatives: {diag.tolist()} (exact zeros)")
    if not ok_z:
        out.passed = False
    return out


CRITERIA = {
    1: criterion_01,
    2: criterion_02,
    3: criterion_03,
    4: criterion_04,
    5: criterion_05,
    6: criterion_06,
    7: criterion_07,
    8: criterion_08,
    9: criterion_09,
    10: criterion_10,
    11: criterion_11,
    12: criterion_12,
    13: criterion_13,
}


def run_criterion(number: int) -> CriterionOutcome:
    return CRITERIA[number]()


def run_all(verbose: bool = True) -> list:
    outcomes = []
    for k in sorted(CRITERIA):
        oc = run_criterion(k)
        outcomes.append(oc)
        if verbose:
            print(oc.line())
            for d in oc.details:
                print(f"    {d}")
    return outcomes


if __name__ == "__main__":
    import sys

    results = run_all()
    sys.exit(sum(1 for r in results if not r.passed))
