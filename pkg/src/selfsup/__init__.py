"""Numerical laboratory for self-supervised reconstruction losses.

Submodules:
  rng         counter-based seeded random streams
  linalg      pseudo-inverse and PSD helpers
  operators   forward operators, transform groups, operator distributions
  noise       noise models, pair resampling, NLL metrics
  priors      GMM and finite-atom priors with exact Bayesian oracles
  estimators  differentiable affine / MLP reconstruction maps
  masks       mask generators and covariance bases
  splits      measurement splitting schemes
  losses      self-supervised loss evaluators and test-time averaging
  optim       flat-parameter optimizers
  harness     training loop, probes, experiment reports
  configio    JSON config validation and report/CSV writers
  suites      named verification suites
  acceptance  full acceptance run
"""

__version__ = "0.1.0"
