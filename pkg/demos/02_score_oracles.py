"""Exact mixture oracles against brute force.

The GMM posterior mean has a closed form; it must agree with Tweedie's
identity applied to the exact marginal score, and with a Monte Carlo
posterior average.  The printed rows are max deviations over a grid.
"""

import numpy as np

from selfsup.priors import GmmPrior, tweedie_estimate
from selfsup.rng import RngStream

prior = GmmPrior(
    [[-1.0, 0.0], [2.0, 1.0]],
    [np.diag([0.5, 0.3]), np.diag([0.2, 0.4])],
    [0.3, 0.7],
)
sig2 = 0.7

grid = np.stack(
    np.meshgrid(np.linspace(-3, 4, 15), np.linspace(-3, 4, 15)), axis=-1
).reshape(-1, 2)

post = prior.posterior_mean(grid, sig2)
tweedie = tweedie_estimate(grid, sig2, prior.score_y(grid, sig2))
print(f"posterior mean vs tweedie       {np.abs(post - tweedie).max():.2e}")

# brute force: average x over p(x|y) by importance-weighting prior draws
rng = RngStream(5)
M = 400000
Xs = prior.sample(M, rng)
worst = 0.0
for y in grid[::17]:
    logw = -np.sum((y - Xs) ** 2, axis=-1) / (2 * sig2)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mc = w @ Xs
    worst = max(worst, float(np.abs(mc - prior.posterior_mean(y[None], sig2)).max()))
print(f"posterior mean vs Monte Carlo   {worst:.2e}  (sampling noise)")

# the score of the noisy marginal integrates to zero and has second moment
# tied to the Fisher information of the smoothed density
s = prior.score_y(prior.sample(M, rng) + np.sqrt(sig2) * rng.generator.standard_normal((M, 2)), sig2)
print(f"mean score (should be ~0)       {np.abs(s.mean(axis=0)).max():.2e}")
