"""Adam with bias correction and a multiplicative per-epoch learning-rate decay."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # lr multiplier applied once per completed training epoch.
    decay: float = 0.96

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("betas must lie in [0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")

    def lr_at(self, epochs_done: int) -> float:
        """Effective learning rate after ``epochs_done`` completed epochs."""
        return self.lr * self.decay**epochs_done


class Adam:
    """Stateful Adam. Moment estimates live in the parameter dtype and are
    allocated lazily on the first step."""

    def __init__(self, config: AdamConfig = AdamConfig()):
        self.config = config
        self.t = 0
        self.m: dict[str, np.ndarray] | None = None
        self.v: dict[str, np.ndarray] | None = None

    def reset(self):
        self.t = 0
        self.m = None
        self.v = None

    def step(self, weights, grads: dict[str, np.ndarray], lr: float):
        """One in-place update of every parameter present in ``grads``.

        Computes w -= lr * mhat / (sqrt(vhat) + eps) with the bias
        correction of mhat folded into the scalar factor, reusing a single
        scratch buffer per tensor so the largest layer does not triple its
        footprint mid-update.
        """
        if self.m is None:
            self.m = {k: np.zeros_like(g) for k, g in grads.items()}
            self.v = {k: np.zeros_like(g) for k, g in grads.items()}
        b1 = self.config.beta1
        b2 = self.config.beta2
        self.t += 1
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            buf = g * g
            buf *= 1.0 - b2
            v += buf
            np.divide(v, bc2, out=buf)  # vhat
            np.sqrt(buf, out=buf)
            buf += self.config.eps
            np.divide(m, buf, out=buf)
            buf *= lr / bc1
            weights[name] -= buf
