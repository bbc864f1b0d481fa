from __future__ import annotations

import numpy as np

from hvac_nmpc.errors import InvalidArgumentError, ShapeError


class Adam:
    """
    Adam over a dict of named arrays (bias-corrected moments).

        m = b1 m + (1 - b1) g
        v = b2 v + (1 - b2) g^2
        theta -= lr * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        *,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        if lr <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1) or eps <= 0:
            raise InvalidArgumentError("Adam: need lr > 0, 0 <= beta < 1 and eps > 0")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated copies of params; names missing from grads are left unchanged."""
        self.t += 1
        out: dict[str, np.ndarray] = {}
        for name, theta in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = theta
                continue
            if g.shape != theta.shape:
                raise ShapeError(f"Adam.step {name}", g.shape, theta.shape)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**self.t)
            v_hat = self.v[name] / (1 - self.beta2**self.t)
            out[name] = theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out
