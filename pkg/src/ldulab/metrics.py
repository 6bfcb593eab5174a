"""Evaluation metrics: reconstruction and curve-fit errors, PSNR/SSIM, kernel
two-sample distance, protection score and perturbation carry-through.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BaselineMissing, ConfigError, InsufficientData, NumericalError, ShapeError

PSNR_RECORD_CAP = 999.0


def e_R(reconstructions: np.ndarray, originals: np.ndarray) -> float:
    """Mean per-sample Euclidean distance between paired sets."""
    a = np.asarray(reconstructions, dtype=np.float64)
    b = np.asarray(originals, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"e_R: paired sets differ in shape {a.shape} vs {b.shape}")
    if len(a) == 0:
        return 0.0
    return float(np.mean(np.linalg.norm((a - b).reshape(len(a), -1), axis=1)))


def unwrap_spiral_angle(points: np.ndarray, a: float, b: float) -> np.ndarray:
    """Unwrapped angle of each point on the nearest turn of ``r = a + b*phi``."""
    p = np.asarray(points, dtype=np.float64)
    theta = np.mod(np.arctan2(p[:, 1], p[:, 0]), 2 * math.pi)
    r = np.hypot(p[:, 0], p[:, 1])
    n = np.round((r - a - b * theta) / (2 * math.pi * b))
    n = np.maximum(n, 0)
    return theta + 2 * math.pi * n


def e_L(points: np.ndarray, a: float, b: float, degree: int = 3) -> float:
    """Curve-fit error of a reconstructed spiral point set.

    Radius is regressed on unwrapped angle with a degree-3 polynomial (least
    squares); the result is the mean squared gap between that fitted curve and
    the true generating curve ``a + b*phi``, evaluated at the samples' angles.
    """
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ShapeError(f"e_L expects (n, 2) points, got {p.shape}")
    if len(p) < 10:
        raise InsufficientData(f"e_L needs at least 10 points, got {len(p)}")
    phi = unwrap_spiral_angle(p, a, b)
    r = np.hypot(p[:, 0], p[:, 1])
    lo, hi = phi.min(), phi.max()
    u = (phi - lo) / (hi - lo) if hi > lo else np.zeros_like(phi)
    basis = np.vander(u, degree + 1)
    coef, *_ = np.linalg.lstsq(basis, r, rcond=None)
    fit = basis @ coef
    return float(np.mean((fit - (a + b * phi)) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ConfigError("psnr peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _window_means(x: np.ndarray, w: int) -> np.ndarray:
    v = np.lib.stride_tricks.sliding_window_view(x, (w, w), axis=(-2, -1))
    return v.mean(axis=(-2, -1))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, peak: float = 1.0) -> float:
    """Mean SSIM over all ``window x window`` positions (uniform weights, stride 1).

    Accepts ``(H, W)`` or ``(C, H, W)``; channels are averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2 or a.shape[-1] < window or a.shape[-2] < window:
        raise ConfigError(f"image {a.shape} smaller than the {window}x{window} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _window_means(a, window)
    mu_b = _window_means(b, window)
    var_a = _window_means(a * a, window) - mu_a**2
    var_b = _window_means(b * b, window) - mu_b**2
    cov = _window_means(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def gaussian_kernel(x: np.ndarray, y: np.ndarray, bandwidth: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    d2 = np.sum(x * x, 1)[:, None] + np.sum(y * y, 1)[None, :] - 2.0 * x @ y.T
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * bandwidth * bandwidth))


def mmd(x: np.ndarray, y: np.ndarray, bandwidth: float = 0.1, unbiased: bool = True) -> float:
    """Squared maximum mean discrepancy with a Gaussian kernel.

    The unbiased estimate drops the diagonal of the within-set kernel matrices
    (needs at least two samples per set) and can be slightly negative; the
    biased one keeps it and is always ``>= 0``.
    """
    if len(x) == 0 or len(y) == 0:
        raise InsufficientData("mmd needs non-empty sets")
    kxx = gaussian_kernel(x, x, bandwidth)
    kyy = gaussian_kernel(y, y, bandwidth)
    kxy = gaussian_kernel(x, y, bandwidth)
    m, n = len(x), len(y)
    if unbiased:
        if m < 2 or n < 2:
            raise InsufficientData("unbiased mmd needs at least two samples per set")
        sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    else:
        sxx = kxx.mean()
        syy = kyy.mean()
    return float(sxx + syy - 2.0 * kxy.mean())


def protection_score(
    generated: np.ndarray, identity_samples: np.ndarray, baseline: float | None, bandwidth: float = 0.1, unbiased: bool = False
) -> float:
    """``mmd(generated, identity) / baseline``; the baseline is the same distance
    for clean personalization of that identity (same seed). Higher is better
    protection; clean personalization scores 1.0.

    The biased estimate is the default: it is non-negative, so the ratio never
    flips sign when the clean baseline is close to zero. The baseline must be
    computed with the same estimator.
    """
    if baseline is None:
        raise BaselineMissing("protection_score needs the clean-personalization baseline")
    if not baseline > 0:
        raise NumericalError(f"baseline mmd must be positive, got {baseline}")
    return mmd(generated, identity_samples, bandwidth, unbiased=unbiased) / baseline


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)


def carry(model, z_T: np.ndarray, delta: np.ndarray, ks: Sequence[int], schedule, cond=None) -> dict[int, float]:
    """``k -> mean ||Phi_k(z_T + delta) - Phi_k(z_T)||_2`` over the rows of ``z_T``."""
    from .diffusion import SamplerConfig, few_step_denoise

    z_T = np.asarray(z_T, dtype=np.float64)
    out = {}
    for k in ks:
        s = SamplerConfig(k=k)
        moved = few_step_denoise(model, z_T + delta, cond, s, schedule)
        base = few_step_denoise(model, z_T, cond, s, schedule)
        out[k] = float(np.mean(np.linalg.norm((moved - base).reshape(len(z_T), -1), axis=1)))
    return out


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class MetricsRecord:
    experiment: str
    seed: int
    sweep_key: str = ""
    sweep_value: float | str = ""
    scalars: dict[str, float] = field(default_factory=dict)
    attack: str = "none"
    config_hash: str = ""

    def __post_init__(self):
        for k, v in self.scalars.items():
            if not math.isfinite(v):
                raise NumericalError(f"metric {k!r} is not finite: {v}")

    def row(self, columns: Sequence[str]) -> list[str]:
        vals = [self.experiment, str(self.seed), self.sweep_key, _fmt(self.sweep_value)]
        for c in columns:
            if c == "attack":
                vals.append(self.attack)
            elif c == "config_hash":
                vals.append(self.config_hash)
            else:
                vals.append(_fmt(self.scalars.get(c, "")))
        return vals


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
