"""Geometric noise schedule and timestep sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ..errors import ConfigError, DomainError


@dataclass(frozen=True)
class NoiseSchedule:
    """sigma(t) = sigma_min * (sigma_max / sigma_min) ** t on t in [0, 1]."""

    sigma_min: float = 0.05
    sigma_max: float = 5.0
    n_steps: int = 50

    def __post_init__(self):
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ConfigError("noise schedule needs 0 < sigma_min < sigma_max")
        if self.n_steps < 2:
            raise ConfigError("noise schedule needs at least 2 grid steps")

    def sigma(self, t: float) -> float:
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"timestep {t} outside [0, 1]")
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** t

    def grid(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) / self.n_steps

    def sample_t(self, rng: np.random.Generator, t_range: Tuple[float, float] = (0.02, 0.98)) -> float:
        return float(rng.uniform(*t_range))

    def sample_adjacent(self, rng: np.random.Generator,
                        t_range: Tuple[float, float] = (0.02, 0.98)) -> Tuple[float, float]:
        """(t1, t2) on the step grid with t2 = t1 - 1/N, both inside ``t_range``."""
        N = self.n_steps
        lo = max(1, math.ceil(t_range[0] * N - 1e-9))
        hi = math.floor(t_range[1] * N + 1e-9)
        if hi < lo + 1:
            raise ConfigError(f"timestep range {t_range} holds no adjacent grid pair")
        k1 = int(rng.integers(lo + 1, hi + 1))
        return k1 / N, (k1 - 1) / N


def sigma(schedule: NoiseSchedule, t: float) -> float:
    return schedule.sigma(t)
