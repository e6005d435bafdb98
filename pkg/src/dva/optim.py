"""Adam optimiser with bias-corrected moment estimates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError

__all__ = ["AdamConfig", "Adam"]


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class _Slot:
    m: np.ndarray
    v: np.ndarray


class Adam:
    """Tracks first/second moments per parameter, keyed by tensor identity.

    Updates assign a fresh array to ``param.data`` rather than writing in
    place, so values captured earlier (detached copies, tape closures) are
    never disturbed.
    """

    def __init__(self, params: list[Tensor], config: AdamConfig = AdamConfig()):
        self.config = config
        self.params = list(params)
        self.step_count = 0
        self._slots: dict[Tensor, _Slot] = {
            p: _Slot(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params
        }

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        c = self.config
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1**t
        bc2 = 1.0 - c.beta2**t
        for p in self.params:
            g = grads.get(p)
            if g is None:
                raise ContractError(f"missing gradient for parameter {p!r}")
            slot = self._slots[p]
            slot.m = c.beta1 * slot.m + (1.0 - c.beta1) * g
            slot.v = c.beta2 * slot.v + (1.0 - c.beta2) * (g * g)
            m_hat = slot.m / bc1
            v_hat = slot.v / bc2
            p.data = p.data - c.lr * m_hat / (np.sqrt(v_hat) + c.eps)
