"""Attacks applied to protected samples before personalization.

``diffpure`` noises a sample part-way up the forward process and denoises it
back with the lab's own model; ``gaussian_filter`` and ``quantize`` are the
image-mode smoothing and rounding channels.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensorcore as tc
from .diffusion import denoise_from, forward_noise
from .errors import ConfigError, ModeError
from .schedule import NoiseSchedule


def diffpure(x: np.ndarray, t_star: int, model, schedule: NoiseSchedule, seed: int = 0) -> np.ndarray:
    """Noise ``x`` to ``t_star`` with a fresh draw, then denoise step by step to 0, unconditionally."""
    if not 0 <= t_star <= schedule.T:
        raise ConfigError(f"t_star must lie in [0, {schedule.T}], got {t_star}")
    x = np.asarray(x, dtype=np.float64)
    if t_star == 0:
        return x.copy()
    rng = tc.make_rng(seed, 808)
    eps = rng.standard_normal(x.shape)
    x_t = forward_noise(x, np.full(len(x), t_star), eps, schedule)
    return denoise_from(model, x_t, t_star, None, schedule)


def gaussian_kernel1d(kernel_size: int, sigma: float) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    r = kernel_size // 2
    if sigma <= 0:
        k = np.zeros(kernel_size)
        k[r] = 1.0
        return k
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_filter(image: np.ndarray, kernel_size: int = 7, sigma: float = 1.0) -> np.ndarray:
    """Separable Gaussian blur over the last two axes with reflect padding.

    Accepts ``(H, W)``, ``(C, H, W)`` or ``(N, C, H, W)``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim < 2 or (img.ndim == 2 and 1 in img.shape):
        raise ModeError("gaussian_filter needs image input")
    k = gaussian_kernel1d(kernel_size, sigma)
    r = kernel_size // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)]
    p = np.pad(img, pad, mode="reflect" if min(img.shape[-2:]) > r else "symmetric")
    rows = np.lib.stride_tricks.sliding_window_view(p, kernel_size, axis=-2) @ k
    out = np.lib.stride_tricks.sliding_window_view(rows, kernel_size, axis=-1) @ k
    return out


def quantize(image: np.ndarray, levels: int) -> np.ndarray:
    """Round to the nearest of ``levels`` uniform levels in ``[0, 1]``."""
    if levels < 2:
        raise ConfigError(f"quantize needs levels >= 2, got {levels}")
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    n = levels - 1
    # floor(v + 0.5) rounds halves up, unlike numpy's banker's rounding
    return np.floor(img * n + 0.5) / n


def max_quantize_error(levels: int) -> float:
    return 1.0 / (2.0 * (levels - 1))


def purify_fraction(T: int, fraction: float) -> int:
    """Timestep closest to ``fraction * T`` (how sweeps are expressed)."""
    return int(min(T, max(0, math.floor(fraction * T + 0.5))))
