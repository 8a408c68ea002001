"""Mask generators for cross-validation losses and covariance bases.

A MaskGenerator turns a measurement y into (x_in, keep, target_w):
x_in is the estimator input, keep the binary mask of pixels left intact
in that input, target_w the weights of the pixels the loss is scored on.

Kinds:
  noise2void         masked pixels replaced by a random circular neighbor
  noise2self         J disjoint parts covering all pixels; part j is
                     hidden (zeroed) and scored
  neighbor2neighbor  2D 2x2 blocks; one input pixel and one distinct
                     target pixel per block
  bernoulli_split    keep each pixel independently with probability q_i
"""

from __future__ import annotations

import numpy as np

from .linalg import as_f64
from .rng import RngStream


class MaskSample:
    __slots__ = ("x_in", "keep", "target_w")

    def __init__(self, x_in, keep, target_w):
        self.x_in = x_in
        self.keep = keep
        self.target_w = target_w


class MaskGenerator:
    kind = "abstract"

    def generate(self, y, rng: RngStream) -> MaskSample:
        raise NotImplementedError


class Noise2VoidMask(MaskGenerator):
    """Mask a fraction of pixels; substitute each with a circular neighbor."""

    kind = "noise2void"

    def __init__(self, fraction: float, shape=None):
        if not (0.0 < fraction < 1.0):
            raise ValueError("fraction: out of (0,1)")
        self.fraction = float(fraction)
        self.shape = tuple(shape) if shape is not None else None

    def generate(self, y, rng: RngStream) -> MaskSample:
        y = as_f64(y, "y")
        n = y.shape[-1]
        gen = rng.generator
        hide = gen.random(n) < self.fraction
        if not hide.any():
            hide[gen.integers(0, n)] = True
        x_in = y.copy()
        idx = np.where(hide)[0]
        if self.shape is None:
            offs = np.where(gen.random(idx.size) < 0.5, 1, -1)
            src = (idx + offs) % n
        else:
            h, w = self.shape
            if h * w != n:
                raise ValueError("shape: inconsistent with y length")
            r, c = idx // w, idx % w
            pick = gen.integers(0, 4, idx.size)
            dr = np.choose(pick, [1, -1, 0, 0])
            dc = np.choose(pick, [0, 0, 1, -1])
            src = ((r + dr) % h) * w + (c + dc) % w
        x_in[idx] = y[src]
        keep = (~hide).astype(np.float64)
        return MaskSample(x_in, keep, 1.0 - keep)


class Noise2SelfMask(MaskGenerator):
    """J disjoint parts covering every pixel; hides one part per draw."""

    kind = "noise2self"

    def __init__(self, n: int, J: int, rng: RngStream = None):
        if J < 2 or J > n:
            raise ValueError("J: need 2 <= J <= n")
        self.n = int(n)
        self.J = int(J)
        perm = np.arange(n) if rng is None else rng.generator.permutation(n)
        self.parts = [np.sort(perm[j::J]) for j in range(J)]

    def part_indicator(self, j: int) -> np.ndarray:
        out = np.zeros(self.n)
        out[self.parts[j]] = 1.0
        return out

    def generate(self, y, rng: RngStream, part: int = None) -> MaskSample:
        y = as_f64(y, "y")
        j = int(rng.generator.integers(0, self.J)) if part is None else part
        hidden = self.part_indicator(j)
        keep = 1.0 - hidden
        return MaskSample(y * keep, keep, hidden)


class Neighbor2NeighborMask(MaskGenerator):
    """2x2 blocks on an (h, w) grid: one input and one distinct target pixel."""

    kind = "neighbor2neighbor"

    def __init__(self, shape):
        h, w = shape
        if h % 2 or w % 2:
            raise ValueError("shape: sides must be even")
        self.shape = (int(h), int(w))

    def generate(self, y, rng: RngStream) -> MaskSample:
        h, w = self.shape
        y = as_f64(y, "y")
        if y.shape[-1] != h * w:
            raise ValueError("y: length inconsistent with shape")
        gen = rng.generator
        keep = np.zeros(h * w)
        target = np.zeros(h * w)
        for bi in range(h // 2):
            for bj in range(w // 2):
                cells = [
                    (2 * bi + di) * w + (2 * bj + dj) for di in (0, 1) for dj in (0, 1)
                ]
                pick = gen.permutation(4)[:2]
                keep[cells[pick[0]]] = 1.0
                target[cells[pick[1]]] = 1.0
        return MaskSample(y * keep, keep, target)


class BernoulliSplitMask(MaskGenerator):
    """Keep pixel i with probability q_i, score on the complement."""

    kind = "bernoulli_split"

    def __init__(self, q):
        q = np.asarray(q, dtype=np.float64)
        if np.any((q <= 0) | (q >= 1)):
            raise ValueError("q: entries out of (0,1)")
        self.q = q

    def generate(self, y, rng: RngStream) -> MaskSample:
        y = as_f64(y, "y")
        keep = (rng.generator.random(y.shape[-1]) < self.q).astype(np.float64)
        return MaskSample(y * keep, keep, 1.0 - keep)


# covariance bases for the unknown-noise-level loss


def identity_basis(n: int):
    return [np.eye(n)]


def diagonal_indicator_basis(n: int, groups=None):
    """One diagonal indicator matrix per group of coordinates."""
    if groups is None:
        groups = [[i] for i in range(n)]
    out = []
    for g in groups:
        d = np.zeros(n)
        d[list(g)] = 1.0
        out.append(np.diag(d))
    return out


def circulant_lag_basis(n: int, max_lag: int):
    """Identity plus symmetric circulant lag matrices up to max_lag."""
    if not (0 <= max_lag < n):
        raise ValueError("max_lag: out of [0, n)")
    mats = [np.eye(n)]
    idx = np.arange(n)
    for lag in range(1, max_lag + 1):
        M = np.zeros((n, n))
        M[idx, (idx + lag) % n] = 1.0
        M[(idx + lag) % n, idx] = 1.0
        mats.append(M)
    return mats


def check_basis_independent(mats, tol: float = 1e-10) -> bool:
    V = np.stack([M.ravel() for M in mats])
    gram = V @ V.T
    return bool(np.linalg.eigvalsh(gram)[0] > tol * np.linalg.eigvalsh(gram)[-1])
