"""Train the same affine denoiser under different losses on one GMM task.

The self-supervised objectives differ from the supervised one only by a
constant, so the trained maps should coincide.  The printout shows each
trained map next to the exact MMSE of the task.
"""

import numpy as np

from selfsup.estimators import AffineEstimator
from selfsup.harness import ArraySource, TrainConfig, train
from selfsup.losses import loss_n2n, loss_sup, loss_sure
from selfsup.noise import GaussianNoise
from selfsup.optim import Adam
from selfsup.priors import GmmPrior
from selfsup.rng import RngStream

sigma = 1.0
prior = GmmPrior([[0.0], [2.0]], [0.5, 0.25], [0.6, 0.4])
noise = GaussianNoise(sigma=sigma)
rng = RngStream(7)

N = 16384
X = prior.sample(N, rng)
Y = noise.corrupt(X, rng)
Y2 = noise.corrupt(X, rng)  # second exposure of the same signals

mmse, _ = prior.mmse(sigma**2, method="score_formula", n_samples=200000,
                     rng=RngStream(3))
print(f"exact mmse                      {mmse:.4f}")


def report(f, tag):
    W = float(f.W[0, 0])
    b = float(f.b[0])
    Xp = prior.sample(200000, RngStream(99))
    Yp = noise.corrupt(Xp, RngStream(100))
    mse = float(np.mean((W * Yp + b - Xp) ** 2))
    print(f"{tag:<18}  W {W:+.4f}  b {b:+.4f}  oracle mse {mse:.4f}")


cfg = TrainConfig(lr=5e-3, epochs=120, batch_size=128, seed=1, select="final")
src = ArraySource(Y, xs=X)

f_sup, _ = train(cfg, src, lambda b, f, wg, r: loss_sup(b, f, with_grad=wg),
                 AffineEstimator(1))
report(f_sup, "supervised")

f_sure, _ = train(cfg, src,
                  lambda b, f, wg, r: loss_sure(b, f, sigma**2, with_grad=wg),
                  AffineEstimator(1))
report(f_sure, "sure (analytic)")

# noise2noise wants matched pairs, so run the minibatch loop directly
f_n2n = AffineEstimator(1)
opt = Adam(lr=5e-3)
order = RngStream(1)
for epoch in range(120):
    perm = order.generator.permutation(N)
    for lo in range(0, N, 128):
        idx = perm[lo : lo + 128]
        _, g = loss_n2n(Y[idx], Y2[idx], f_n2n, with_grad=True)
        f_n2n.set_params(opt.step(f_n2n.get_params(), g))
report(f_n2n, "noise2noise")
