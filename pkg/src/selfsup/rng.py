"""Seeded random streams and scalar distribution samplers.

Streams are counter-based (Philox): a stream is fully determined by
(seed, stream_id), so any (sample index, loss evaluation) pair can own an
independent stream and replays are bit-identical.
"""

from __future__ import annotations

import numpy as np

_U64 = np.uint64
_MASK64 = (1 << 64) - 1

# fixed mixing constant (splitmix64) so child ids spread over the key space
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z &= _MASK64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


class RngStream:
    """A deterministic random stream identified by (seed, stream_id).

    counter tracks how many sampling calls have been made; equal
    (seed, stream_id) and equal call sequences give bit-identical output.
    """

    __slots__ = ("seed", "stream_id", "counter", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= int(seed) <= _MASK64) or not (0 <= int(stream_id) <= _MASK64):
            raise ValueError("seed and stream_id must be 64-bit nonnegative integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.counter = 0
        key = np.array(
            [_mix64(self.seed ^ _GOLDEN), _mix64(self.stream_id + _GOLDEN)],
            dtype=_U64,
        )
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, k: int) -> "RngStream":
        """Derive an independent stream; deterministic in (seed, stream_id, k)."""
        return RngStream(self.seed, _mix64(self.stream_id * _GOLDEN + 2 * k + 1))

    @property
    def generator(self) -> np.random.Generator:
        self.counter += 1
        return self._gen

    def __repr__(self):  # pragma: no cover
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"


_DIST_PARAMS = {
    "gaussian": ("mu", "sigma"),
    "poisson": ("lam",),
    "binomial": ("k", "p"),
    "beta": ("a", "b"),
    "gamma": ("shape", "rate"),
    "bernoulli": ("p",),
    "uniform": ("a", "b"),
}


def sample(dist_kind: str, rng: RngStream, **params):
    """Draw one sample (or an array if size= is given) from a named distribution.

    Parameter domains are checked; violations raise ValueError naming the field.
    """
    size = params.pop("size", None)
    if dist_kind not in _DIST_PARAMS:
        raise ValueError(f"dist_kind: unknown distribution {dist_kind!r}")
    missing = [p for p in _DIST_PARAMS[dist_kind] if p not in params]
    if missing:
        raise ValueError(f"{dist_kind}: missing parameter {missing[0]!r}")
    extra = [p for p in params if p not in _DIST_PARAMS[dist_kind]]
    if extra:
        raise ValueError(f"{dist_kind}: unknown parameter {extra[0]!r}")
    g = rng.generator
    if dist_kind == "gaussian":
        mu, sigma = params["mu"], params["sigma"]
        if np.any(np.asarray(sigma) < 0):
            raise ValueError("sigma: must be >= 0")
        return mu + sigma * g.standard_normal(size=size)
    if dist_kind == "poisson":
        lam = params["lam"]
        if np.any(np.asarray(lam) < 0):
            raise ValueError("lam: must be >= 0")
        return g.poisson(lam, size=size)
    if dist_kind == "binomial":
        k, p = params["k"], params["p"]
        if np.any(np.asarray(k) < 0):
            raise ValueError("k: must be >= 0")
        if np.any((np.asarray(p) < 0) | (np.asarray(p) > 1)):
            raise ValueError("p: must be in [0, 1]")
        return g.binomial(np.asarray(k, dtype=np.int64), p, size=size)
    if dist_kind == "beta":
        a, b = params["a"], params["b"]
        if np.any(np.asarray(a) <= 0) or np.any(np.asarray(b) <= 0):
            raise ValueError("a, b: must be > 0")
        return g.beta(a, b, size=size)
    if dist_kind == "gamma":
        shape, rate = params["shape"], params["rate"]
        if np.any(np.asarray(shape) <= 0) or np.any(np.asarray(rate) <= 0):
            raise ValueError("shape, rate: must be > 0")
        return g.gamma(shape, 1.0 / np.asarray(rate, dtype=np.float64), size=size)
    if dist_kind == "bernoulli":
        p = params["p"]
        if np.any((np.asarray(p) < 0) | (np.asarray(p) > 1)):
            raise ValueError("p: must be in [0, 1]")
        return (g.random(size=size) < p).astype(np.int64) if size is not None else int(g.random() < p)
    # uniform
    a, b = params["a"], params["b"]
    if np.any(np.asarray(a) > np.asarray(b)):
        raise ValueError("a: must be <= b")
    return g.uniform(a, b, size=size)
