"""Bernoulli inpainting trained purely from split measurements.

Pixels are observed with probability p; a second Bernoulli split hides a
further fraction of the observed ones during training and scores the
reconstruction on the held-out part, with an inverse-probability weight
so the minimizer is the posterior mean given the kept pixels.  The
trained affine map is compared against the enumerated Bayes map.
"""

import numpy as np

from selfsup.estimators import AffineEstimator
from selfsup.harness import ArraySource, TrainConfig, train
from selfsup.losses import loss_msplit
from selfsup.operators import DiagonalMask
from selfsup.priors import AtomPrior
from selfsup.rng import RngStream
from selfsup.splits import BernoulliSplit

p, q, n = 0.8, 0.5, 3
atoms = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [1.0, 1.0, 1.0]])
prior = AtomPrior(atoms)
rng = RngStream(21)

N = 8192
X = prior.sample(N, rng)
B = (rng.generator.random((N, n)) < p).astype(float)
Y = B * X
ops = [DiagonalMask(B[i]) for i in range(N)]
src = ArraySource(Y, ops=ops, xs=X)

split = BernoulliSplit(q=q, acquisition_p=p)


def msplit_fn(batch, f, with_grad, r):
    return loss_msplit(batch, f, split, weighted=True, rng=r, with_grad=with_grad)


cfg = TrainConfig(lr=1e-2, epochs=40, batch_size=256, seed=2, select="final")
f, _ = train(cfg, src, msplit_fn, AffineEstimator(n))

# supervised reference: the population minimizer of the same weighted
# objective is the posterior mean given the kept measurement; fit it by
# weighted least squares on a fresh synthetic set
rng2 = RngStream(22)
M = 200000
Xs = prior.sample(M, rng2)
Bs = (rng2.generator.random((M, n)) < p).astype(float)
B1 = Bs * (rng2.generator.random((M, n)) < q)
Y1 = B1 * Xs
Z = np.hstack([Y1, np.ones((M, 1))])
ref = np.linalg.lstsq(Z, Xs, rcond=None)[0]
W_ref, b_ref = ref[:n].T, ref[n]

print("trained W:")
print(np.round(f.W, 3))
print("reference W (least squares on kept pixels):")
print(np.round(W_ref, 3))
print(f"max param gap: {max(np.abs(f.W - W_ref).max(), np.abs(f.b - b_ref).max()):.3f}")
