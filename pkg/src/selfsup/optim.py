"""First-order optimizers over flat parameter vectors."""

import numpy as np

__all__ = ["Sgd", "Adam", "make_optimizer"]


class Sgd:
    kind = "sgd"

    def __init__(self, lr: float = 1e-3):
        if lr <= 0:
            raise ValueError("lr: must be > 0")
        self.lr = float(lr)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return theta - self.lr * np.asarray(grad, dtype=np.float64)


class Adam:
    kind = "adam"

    def __init__(
        self,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError("lr: must be > 0")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("beta1/beta2: must be in [0, 1)")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = None
        self.v = None

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        g = np.asarray(grad, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(name: str, **kwargs):
    if name == "sgd":
        return Sgd(**kwargs)
    if name == "adam":
        return Adam(**kwargs)
    raise ValueError(f"optimizer: unknown kind {name!r}")
