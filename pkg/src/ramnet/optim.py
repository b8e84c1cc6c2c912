"""Adam with bias-corrected moment estimates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
              state: AdamState) -> dict[str, np.ndarray]:
    """Apply one Adam update in place and return ``params``.

    Every parameter needs a gradient; a missing one raises ``KeyError``
    rather than silently skipping the update.
    """
    if state.lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {state.lr}")
    for name in params:
        if grads.get(name) is None:
            raise KeyError(f"no gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.lr == 0.0:
            continue
        p -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params


class Adam:
    """Thin wrapper driving :func:`adam_step` from tensor gradients."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        adam_step({k: p.data for k, p in self.params.items()},
                  {k: p.grad for k, p in self.params.items()}, self.state)
