"""AdamW with decoupled weight decay.

One optimizer instance owns one parameter group; callers that want decay on
some tensors and not others (e.g. conv weights yes, norm scales and rings no)
create two instances and step both.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, NumericError


class AdamW:
    """Decoupled-weight-decay Adam: p -= lr * (m̂ / (sqrt(v̂) + eps) + wd * p)."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        params = list(params)
        if not params:
            raise ContractError("AdamW needs at least one parameter")
        if not (lr > 0.0):
            raise ContractError(f"learning rate must be positive, got {lr}")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ContractError(f"betas must lie in [0, 1), got {betas}")
        if not (eps > 0.0):
            raise ContractError(f"eps must be positive, got {eps}")
        if weight_decay < 0.0:
            raise ContractError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(b1)
        self.beta2 = float(b2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        """Apply one update from the gradients currently stored on the params.

        Parameters whose grad is None are skipped (their moments stay put).
        """
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient at step {t} (shape {g.shape})")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update
