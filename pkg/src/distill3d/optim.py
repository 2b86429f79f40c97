"""Adam and Adan over float64 tensors, with non-finite gradients skipped."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import torch

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class OptimState:
    step: int = 0
    slots: Dict[str, Dict[str, torch.Tensor]] = field(default_factory=dict)

    def slot(self, name: str, key: str, like: torch.Tensor) -> torch.Tensor:
        per = self.slots.setdefault(name, {})
        if key not in per:
            per[key] = torch.zeros_like(like, memory_format=torch.contiguous_format).detach()
        if per[key].shape != like.shape:
            raise ConfigError(f"optimizer state {name}.{key} has shape {tuple(per[key].shape)}, "
                              f"parameter has {tuple(like.shape)}")
        return per[key]


def _finite(grads: Mapping[str, torch.Tensor]) -> bool:
    return all(bool(torch.isfinite(g).all()) for g in grads.values())


def adam_step(state: OptimState, params: Mapping[str, torch.Tensor],
              grads: Mapping[str, torch.Tensor], lr: float,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> bool:
    """One bias-corrected Adam update in place. Returns False (and skips) on non-finite grads."""
    if not _finite(grads):
        log.warning("non-finite gradient at optimizer step %d; update skipped", state.step + 1)
        return False
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.slot(name, "m", p)
            v = state.slot(name, "v", p)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    return True


def adan_step(state: OptimState, params: Mapping[str, torch.Tensor],
              grads: Mapping[str, torch.Tensor], lr: float,
              betas: Tuple[float, float, float] = (0.98, 0.92, 0.99), eps: float = 1e-8) -> bool:
    """One Adan update (gradient-difference momentum, no weight decay) in place.

    The first step treats the previous gradient as equal to the current one, so the
    difference term starts at zero.
    """
    if not _finite(grads):
        log.warning("non-finite gradient at optimizer step %d; update skipped", state.step + 1)
        return False
    b1, b2, b3 = betas
    state.step += 1
    k = state.step
    bc1, bc2, bc3 = 1.0 - b1 ** k, 1.0 - b2 ** k, 1.0 - b3 ** k
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.slot(name, "m", p)
            v = state.slot(name, "v", p)
            n = state.slot(name, "n", p)
            prev = state.slot(name, "prev", p)
            diff = g - prev if k > 1 else torch.zeros_like(g)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).add_(diff, alpha=1.0 - b2)
            u = g + b2 * diff
            n.mul_(b3).addcmul_(u, u, value=1.0 - b3)
            denom = (n / bc3).sqrt() + eps
            p.sub_(lr * (m / bc1 + b2 * v / bc2) / denom)
            prev.copy_(g)
    return True


class Optimizer:
    """Named-parameter wrapper binding a step rule, learning rate and state."""

    rules = {"adam": adam_step, "adan": adan_step}

    def __init__(self, kind: str, params: Mapping[str, torch.Tensor], lr: float, **kw):
        if kind not in self.rules:
            raise ConfigError(f"unknown optimizer {kind!r}")
        if not (lr > 0 and math.isfinite(lr)):
            raise ConfigError("learning rate must be positive")
        self.kind = kind
        self.params = dict(params)
        self.lr = float(lr)
        self.kw = kw
        self.state = OptimState()

    def step(self, grads: Mapping[str, torch.Tensor]) -> bool:
        return self.rules[self.kind](self.state, self.params, grads, self.lr, **self.kw)

    def step_from_autograd(self) -> bool:
        grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p))
                 for k, p in self.params.items()}
        return self.step(grads)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
