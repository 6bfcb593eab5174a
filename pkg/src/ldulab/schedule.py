"""Diffusion noise schedules and few-step timestep grids.

Timesteps are 1-based: ``t = 1..T`` index ``beta``/``alpha``/``alpha_bar`` and
``t = 0`` denotes clean data with ``alpha_bar(0) == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.T,):
            raise ConfigError(f"beta must have length T={self.T}, got shape {beta.shape}")
        if not np.all((beta > 0) & (beta < 1)):
            raise ConfigError("every beta_t must lie in (0, 1)")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        alpha = 1.0 - beta
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        alpha_bar = np.cumprod(alpha)
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    def ab(self, t) -> np.ndarray | float:
        """``alpha_bar`` at (possibly array-valued) timestep ``t``, with ``ab(0) == 1``."""
        t_arr = np.asarray(t)
        if np.any(t_arr < 0) or np.any(t_arr > self.T):
            raise ConfigError(f"timestep out of range [0, {self.T}]: {t}")
        padded = np.concatenate([[1.0], self.alpha_bar])
        out = padded[t_arr]
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(int(d["T"]), np.asarray(d["beta"], dtype=np.float64), d.get("kind", "custom"))


def make_schedule(T: int, kind: str = "linear", beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Build a linear or squared-cosine schedule with ``T`` steps.

    ``linear`` interpolates ``beta_min -> beta_max``. ``cosine`` follows the
    squared-cosine ``alpha_bar`` profile with ``beta`` clipped to
    ``[beta_min, 0.999]``.
    """
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0 < beta_min <= beta_max < 1):
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        beta = np.clip(1.0 - ab[1:] / ab[:-1], beta_min, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(T, beta, kind)


def step_grid(schedule: NoiseSchedule | int, k: int) -> list[int]:
    """``k`` strictly decreasing timesteps ``T, T-d, ..., ~d`` with ``d ~= T/k``.

    The caller pairs the last entry with ``t = 0`` for the final update.
    """
    T = schedule if isinstance(schedule, int) else schedule.T
    if k < 1 or k > T:
        raise ConfigError(f"need 1 <= k <= T={T}, got k={k}")
    if T % k == 0:
        d = T // k
        return [T - i * d for i in range(k)]
    grid = [int(round(T - i * T / k)) for i in range(k)]
    # rounding can't collide when k <= T, but keep the contract explicit
    if any(a <= b for a, b in zip(grid, grid[1:])) or grid[-1] < 1:
        raise ConfigError(f"degenerate grid for T={T}, k={k}")
    return grid


def grid_pairs(schedule: NoiseSchedule | int, k: int) -> list[tuple[int, int]]:
    """Consecutive ``(t_from, t_to)`` pairs of the grid, ending at ``t_to == 0``."""
    g = step_grid(schedule, k)
    return list(zip(g, g[1:] + [0]))
