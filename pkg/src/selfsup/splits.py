"""Measurement-splitting distributions for inpainting-style operators.

A split distribution turns one measurement (y, A) into an input half
(y1, A1) and a held-out half (y2, A2). The Q matrices quantify how much
each pixel is constrained given the split: Q_{A1} is the conditional
second moment of the acquisition operator given the input split, and
Qbar averages Q_{A1} over splits of a fixed acquisition.
"""

from __future__ import annotations

import itertools

import numpy as np

from .linalg import as_f64
from .noise import CapabilityError
from .operators import DiagonalMask, Identity, LinearOperator, MaskedDft
from .rng import RngStream


class SplitSample:
    __slots__ = ("y1", "op1", "y2", "op2", "b1", "b2")

    def __init__(self, y1, op1, y2, op2, b1, b2):
        self.y1 = y1
        self.op1 = op1
        self.y2 = y2
        self.op2 = op2
        self.b1 = b1
        self.b2 = b2


def embedded_support(op: LinearOperator):
    """Indicator of the operator's rows inside its embedded output space."""
    if isinstance(op, Identity):
        return np.ones(op.n)
    if isinstance(op, DiagonalMask):
        return op.mask.astype(np.float64).copy()
    if isinstance(op, MaskedDft):
        m = op.mask.astype(np.float64)
        return np.concatenate([m, m])
    return None


def _require_mask(op) -> np.ndarray:
    b = embedded_support(op)
    if b is None or not isinstance(op, (Identity, DiagonalMask)):
        raise CapabilityError("split: diagonal-mask operator family required")
    return b


class SplitDistribution:
    kind = "abstract"
    supports_weighting = False
    enumerable = False

    def split(self, y, A: LinearOperator, rng: RngStream) -> SplitSample:
        raise NotImplementedError

    def q_matrix(self, A: LinearOperator, b1) -> np.ndarray:
        raise CapabilityError(f"{self.kind} split: no Q matrix available")

    def qbar_matrix(self, A: LinearOperator) -> np.ndarray:
        raise CapabilityError(f"{self.kind} split: no Qbar matrix available")

    def enumerate_splits(self, y, A: LinearOperator):
        raise CapabilityError(f"{self.kind} split: not enumerable")


def _vec(value, n, name, lo=0.0, hi=1.0):
    v = np.asarray(value, dtype=np.float64)
    if v.ndim == 0:
        v = np.full(n, float(v))
    if v.shape != (n,):
        raise ValueError(f"{name}: scalar or length-{n} vector required")
    if np.any(v <= lo) or np.any(v >= hi):
        raise ValueError(f"{name}: entries must lie in ({lo}, {hi})")
    return v


class BernoulliSplit(SplitDistribution):
    """Keep each measured entry in the input split with probability q_i.

    acquisition_p is the per-pixel probability that the acquisition mask
    itself measured the pixel; it is only needed for the Q matrices.
    """

    kind = "bernoulli"
    supports_weighting = True
    enumerable = True

    def __init__(self, q, acquisition_p=None):
        self.q = q
        self.acquisition_p = acquisition_p

    def split(self, y, A, rng: RngStream) -> SplitSample:
        y = as_f64(y, "y")
        b = _require_mask(A)
        q = _vec(self.q, b.size, "q")
        w = (rng.generator.random(b.size) < q).astype(np.float64)
        b1 = b * w
        b2 = b - b1
        return SplitSample(b1 * y, DiagonalMask(b1), b2 * y, DiagonalMask(b2), b1, b2)

    def _pq(self, n):
        if self.acquisition_p is None:
            raise ValueError("acquisition_p: required for Q matrices")
        p = _vec(self.acquisition_p, n, "acquisition_p", lo=0.0, hi=1.0 + 1e-12)
        q = _vec(self.q, n, "q")
        return p, q

    def q_matrix(self, A, b1) -> np.ndarray:
        """Diagonal of E[A^T A | A1]: 1 where kept, else P(measured | dropped)."""
        b1 = as_f64(b1, "b1")
        p, q = self._pq(b1.size)
        off = p * (1.0 - q) / (1.0 - p * q)
        return np.where(b1 > 0, 1.0, off)

    def qbar_matrix(self, A) -> np.ndarray:
        b = _require_mask(A)
        p, q = self._pq(b.size)
        off = p * (1.0 - q) / (1.0 - p * q)
        on = q + p * (1.0 - q) ** 2 / (1.0 - p * q)
        return np.where(b > 0, on, off)

    def enumerate_splits(self, y, A, max_measured: int = 20):
        y = as_f64(y, "y")
        b = _require_mask(A)
        q = _vec(self.q, b.size, "q")
        idx = np.where(b > 0)[0]
        if idx.size > max_measured:
            raise ValueError("enumerate_splits: too many measured entries")
        out = []
        for keep in itertools.product([0, 1], repeat=idx.size):
            b1 = np.zeros(b.size)
            prob = 1.0
            for j, k in zip(idx, keep):
                b1[j] = float(k)
                prob *= q[j] if k else 1.0 - q[j]
            b2 = b - b1
            sample = SplitSample(
                b1 * y, DiagonalMask(b1), b2 * y, DiagonalMask(b2), b1, b2
            )
            out.append((prob, sample))
        return out


class FixedPatternSplit(SplitDistribution):
    """Finite list of input-split masks with fixed probabilities.

    The acquisition operator is treated as deterministic, so the Q matrix
    is the acquisition projector itself.
    """

    kind = "fixed"
    supports_weighting = True
    enumerable = True

    def __init__(self, patterns, probs=None):
        patterns = [as_f64(p, "pattern") for p in patterns]
        if not patterns:
            raise ValueError("patterns: must be nonempty")
        n = patterns[0].size
        if any(p.size != n for p in patterns):
            raise ValueError("patterns: inconsistent lengths")
        if probs is None:
            probs = np.full(len(patterns), 1.0 / len(patterns))
        probs = as_f64(probs, "probs")
        if probs.size != len(patterns) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("probs: must match patterns and sum to 1")
        self.patterns = patterns
        self.probs = probs

    def _make(self, y, b, b1):
        if np.any((b1 > 0) & (b == 0)):
            raise ValueError("pattern: not a subset of the acquisition mask")
        b2 = b - b1
        return SplitSample(b1 * y, DiagonalMask(b1), b2 * y, DiagonalMask(b2), b1, b2)

    def split(self, y, A, rng: RngStream) -> SplitSample:
        y = as_f64(y, "y")
        b = _require_mask(A)
        i = int(rng.generator.choice(len(self.patterns), p=self.probs))
        return self._make(y, b, self.patterns[i])

    def q_matrix(self, A, b1) -> np.ndarray:
        return _require_mask(A)

    def qbar_matrix(self, A) -> np.ndarray:
        return _require_mask(A)

    def enumerate_splits(self, y, A):
        y = as_f64(y, "y")
        b = _require_mask(A)
        return [(float(p), self._make(y, b, b1)) for p, b1 in zip(self.probs, self.patterns)]


class LowFrequencySplit(SplitDistribution):
    """Split a masked-DFT acquisition, always keeping the lowest frequencies.

    The keep_lowest measured frequencies with smallest |freq| go to the
    input split; the rest are kept independently with probability q.
    """

    kind = "lowfreq_dft"
    supports_weighting = False
    enumerable = False

    def __init__(self, keep_lowest: int, q: float):
        if keep_lowest < 0:
            raise ValueError("keep_lowest: must be >= 0")
        if not (0.0 < q < 1.0):
            raise ValueError("q: must lie in (0, 1)")
        self.keep_lowest = int(keep_lowest)
        self.q = float(q)

    def split(self, y, A, rng: RngStream) -> SplitSample:
        if not isinstance(A, MaskedDft):
            raise CapabilityError("lowfreq split: masked-DFT operators only")
        y = as_f64(y, "y")
        fm = A.mask.astype(np.float64)
        n = fm.size
        freqs = np.minimum(np.arange(n), n - np.arange(n))
        measured = np.where(fm > 0)[0]
        order = measured[np.argsort(freqs[measured], kind="stable")]
        always = order[: self.keep_lowest]
        rest = order[self.keep_lowest :]
        keep = rng.generator.random(rest.size) < self.q
        f1 = np.zeros(n)
        f1[always] = 1.0
        f1[rest[keep]] = 1.0
        f2 = fm - f1
        b1 = np.concatenate([f1, f1])
        b2 = np.concatenate([f2, f2])
        return SplitSample(b1 * y, MaskedDft(f1), b2 * y, MaskedDft(f2), b1, b2)
