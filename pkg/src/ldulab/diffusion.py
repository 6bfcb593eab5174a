"""Forward noising, deterministic (DDIM) denoising and inversion, DM training.

The update between two grid points uses cumulative ``alpha_bar`` values:

    x_to = sqrt(ab_to) * (x - sqrt(1 - ab_from) * eps) / sqrt(ab_from)
           + sqrt(1 - ab_to) * eps

Inversion applies the same map in the other direction with ``eps`` predicted
at the lower-noise state, which makes invert/denoise exact inverses whenever
the noise prediction doesn't depend on its input.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, ShapeError, TrainingDiverged
from .nets import DenoiserSpec, TokenTable, denoiser_forward, guided_noise
from .schedule import NoiseSchedule, grid_pairs, step_grid
from .tensorcore import Node, ParamStore, Tape

log = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    k: int = 4
    guidance: float = 1.0
    seed: int = 0
    deterministic: bool = True

    def step_size(self, schedule: NoiseSchedule) -> float:
        return schedule.T / self.k

    def grid(self, schedule: NoiseSchedule) -> list[int]:
        return step_grid(schedule, self.k)


@dataclass
class Denoiser:
    """A denoiser's parameters together with its architecture and token table."""

    params: ParamStore
    spec: DenoiserSpec
    tokens: TokenTable = None
    schedule: NoiseSchedule | None = None

    def __post_init__(self):
        if self.tokens is None:
            self.tokens = TokenTable(self.spec.n_class, self.spec.cond_dim)

    def eps(self, tape: Tape, x_t, t, cond=None, guidance: float = 1.0) -> Node:
        return guided_noise(tape, self.params, self.spec, self.tokens, x_t, t, cond, guidance)

    def forward(self, tape: Tape, x_t, t, cond=None) -> Node:
        return denoiser_forward(tape, self.params, self.spec, self.tokens, x_t, t, cond)


class ConstantEps:
    """Noise predictor that ignores its input and returns a fixed array ``c``.

    Used to check the exact-inverse property of the sampler.
    """

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)

    def eps(self, tape: Tape, x_t, t, cond=None, guidance: float = 1.0) -> Node:
        shape = x_t.shape if isinstance(x_t, Node) else np.shape(x_t)
        return tape.constant(np.broadcast_to(self.c, shape).copy())

    forward = eps


def _coef(t, schedule: NoiseSchedule, shape) -> tuple[np.ndarray, np.ndarray]:
    ab = np.atleast_1d(schedule.ab(t)).astype(np.float64)
    n = shape[0]
    if ab.size == 1:
        ab = np.full(n, ab[0])
    bshape = (n,) + (1,) * (len(shape) - 1)
    a = np.broadcast_to(np.sqrt(ab).reshape(bshape), shape)
    s = np.broadcast_to(np.sqrt(1.0 - ab).reshape(bshape), shape)
    return a, s


def forward_noise(x0, t, eps, schedule: NoiseSchedule):
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` may be per-row. Works on arrays or nodes."""
    shape = x0.shape if isinstance(x0, Node) else np.shape(x0)
    eshape = eps.shape if isinstance(eps, Node) else np.shape(eps)
    if tuple(shape) != tuple(eshape):
        raise ShapeError(f"forward_noise: shape mismatch {tuple(shape)} vs {tuple(eshape)}")
    a, s = _coef(t, schedule, shape)
    if isinstance(x0, Node) or isinstance(eps, Node):
        tape = x0.tape if isinstance(x0, Node) else eps.tape
        x0 = x0 if isinstance(x0, Node) else tape.constant(x0)
        eps = eps if isinstance(eps, Node) else tape.constant(eps)
        return tc.mul(x0, a) + tc.mul(eps, s)
    return a * np.asarray(x0) + s * np.asarray(eps)


def step_coefficients(t_from: int, t_to: int, schedule: NoiseSchedule) -> tuple[float, float]:
    """``(c_x, c_eps)`` with ``x_to = c_x * x + c_eps * eps`` for a DDIM move ``t_from -> t_to``."""
    a_f = schedule.ab(t_from)
    a_t = schedule.ab(t_to)
    c_x = math.sqrt(a_t / a_f)
    c_eps = math.sqrt(1.0 - a_t) - math.sqrt(a_t) * math.sqrt(1.0 - a_f) / math.sqrt(a_f)
    return c_x, c_eps


def _combine(tape: Tape, x, eps: Node, c_x: float, c_eps: float):
    if isinstance(x, Node):
        return tc.scale(x, c_x) + tc.scale(eps, c_eps)
    return c_x * np.asarray(x) + c_eps * eps.value


def denoise_step(model, x, t_from: int, t_to: int, cond, guidance: float, schedule: NoiseSchedule, tape: Tape | None = None):
    """One deterministic move ``t_from -> t_to`` (``t_from > t_to >= 0``).

    With a node ``x`` (and its tape) the result is a differentiable node;
    with an array it is an array.
    """
    if t_from <= t_to:
        raise ConfigError(f"denoise_step needs t_from > t_to, got {t_from} -> {t_to}")
    tape = tape or (x.tape if isinstance(x, Node) else Tape())
    eps = model.eps(tape, x, t_from, cond, guidance)
    c_x, c_eps = step_coefficients(t_from, t_to, schedule)
    return _combine(tape, x, eps, c_x, c_eps)


def invert_step(model, z, t_from: int, t_to: int, schedule: NoiseSchedule, tape: Tape | None = None):
    """Inverse of :func:`denoise_step` (``t_to > t_from >= 0``), unconditional.

    The noise is predicted at the current lower-noise state using the target
    timestep's network.
    """
    if t_to <= t_from:
        raise ConfigError(f"invert_step needs t_to > t_from, got {t_from} -> {t_to}")
    tape = tape or (z.tape if isinstance(z, Node) else Tape())
    eps = model.eps(tape, z, t_to, None, 1.0)
    c_x, c_eps = step_coefficients(t_from, t_to, schedule)
    return _combine(tape, z, eps, c_x, c_eps)


def invert(model, z0: np.ndarray, schedule: NoiseSchedule, k: int | None = None) -> np.ndarray:
    """Map clean data to the terminal latent ``z_T`` (full grid unless ``k`` given)."""
    grid = step_grid(schedule, k or schedule.T)[::-1]
    z = np.asarray(z0, dtype=np.float64)
    t_prev = 0
    for t in grid:
        z = invert_step(model, z, t_prev, t, schedule, Tape(check_finite=False))
        t_prev = t
    return z


def few_step_denoise(model, z_T, cond, sampler: SamplerConfig, schedule: NoiseSchedule, tape: Tape | None = None):
    """Compose :func:`denoise_step` over ``step_grid(k)`` down to ``t = 0``.

    Differentiable end to end when ``z_T`` is a node.
    """
    x = z_T
    for t_from, t_to in grid_pairs(schedule, sampler.k):
        step_tape = tape if isinstance(x, Node) else Tape(check_finite=False)
        x = denoise_step(model, x, t_from, t_to, cond, sampler.guidance, schedule, step_tape)
    return x


def denoise_from(model, x_t, t_start: int, cond, schedule: NoiseSchedule, guidance: float = 1.0) -> np.ndarray:
    """Per-step deterministic denoising from ``t_start`` down to 0 (arrays only)."""
    x = np.asarray(x_t, dtype=np.float64)
    for t in range(t_start, 0, -1):
        x = denoise_step(model, x, t, t - 1, cond, guidance, schedule, Tape(check_finite=False))
    return x


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainTrace:
    losses: list[float] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for i, v in enumerate(self.losses):
                w.writerow([i, repr(float(v))])

    def window_mean(self, n: int, last: bool) -> float:
        vals = self.losses[-n:] if last else self.losses[:n]
        return float(np.mean(vals))


def noise_prediction_loss(tape: Tape, model, x0, t, eps, cond, schedule: NoiseSchedule) -> Node:
    """Per-sample squared error ``||eps - eps_theta(x_t, t, cond)||^2``, averaged over the batch."""
    x_t = forward_noise(x0, t, eps, schedule)
    pred = model.forward(tape, x_t, t, cond)
    diff = pred - (eps if isinstance(eps, Node) else tape.constant(eps))
    n = pred.shape[0]
    return tc.scale(tc.sq_l2(diff), 1.0 / n)


def train_dm(
    model: Denoiser,
    data: np.ndarray,
    labels: np.ndarray | None,
    schedule: NoiseSchedule,
    steps: int,
    lr: float = 1e-3,
    seed: int = 0,
    batch: int = 128,
    cond_drop: float = 0.1,
    lr_final: float | None = None,
) -> TrainTrace:
    """Train the noise predictor on ``data`` with optional class ``labels`` (token ids).

    Each step draws a batch, uniform ``t in [1, T]`` and standard normal noise.
    Labels are replaced by the null token with probability ``cond_drop`` so the
    unconditional branch is trained too. ``lr`` decays cosine-wise to
    ``lr_final`` when given.
    """
    data = np.asarray(data, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("train_dm needs a non-empty dataset")
    rng = tc.make_rng(seed, 303)
    trace = TrainTrace()
    for step in range(steps):
        idx = rng.integers(0, len(data), size=batch)
        x0 = data[idx]
        t = rng.integers(1, schedule.T + 1, size=batch)
        eps = rng.standard_normal(x0.shape)
        if labels is None:
            cond = None
        else:
            cond = np.asarray(labels)[idx].copy()
            cond[rng.random(batch) < cond_drop] = 0
        tape = Tape()
        loss = noise_prediction_loss(tape, model, x0, t, eps, cond, schedule)
        value = float(loss.value)
        if not math.isfinite(value) or value > 1e6:
            raise TrainingDiverged(f"DM loss {value} at step {step}")
        tc.backward(loss)
        cur = tc.cosine_lr(lr, lr_final, step, steps)
        names = model.params.names("net/")
        tc.adam_step(model.params, cur, names)
        trace.losses.append(value)
        if step % 2000 == 0:
            log.debug("train_dm step %d loss %.4f", step, value)
    return trace


def sample(model, n: int, cond, sampler: SamplerConfig, schedule: NoiseSchedule, seed: int | None = None) -> np.ndarray:
    """Draw ``z_T ~ N(0, I)`` and denoise with ``sampler``."""
    shape = model.spec.data_shape()
    if n == 0:
        return np.zeros((0, *shape))
    rng = tc.make_rng(sampler.seed if seed is None else seed, 404)
    z = rng.standard_normal((n, *shape))
    return few_step_denoise(model, z, cond, sampler, schedule)
