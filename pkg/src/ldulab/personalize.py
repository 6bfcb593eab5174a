"""Desk-scale personalization: textual inversion (TI) and DreamBooth (DB).

TI learns one pseudo-token embedding per identity against a frozen denoiser.
DB fine-tunes the denoiser itself on subject samples tagged with a fixed
subject embedding, regularised by a class-prior term.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .diffusion import Denoiser, SamplerConfig, TrainTrace, forward_noise, sample
from .errors import TrainingDiverged
from .nets import TokenTable
from .schedule import NoiseSchedule
from .tensorcore import Node, ParamStore, Tape

log = logging.getLogger(__name__)


@dataclass
class TIResult:
    tokens: ParamStore  # holds TokenTable.PSEUDO, one row per identity
    trace: TrainTrace = field(default_factory=TrainTrace)

    def embedding(self, which: int) -> np.ndarray:
        return self.tokens[TokenTable.PSEUDO][which]


def _draw_mc(rng: np.random.Generator, n: int, shape, T: int, n_mc: int):
    t = rng.integers(1, T + 1, size=(n_mc, n))
    eps = rng.standard_normal((n_mc, n, *shape))
    return t.reshape(-1), eps.reshape(n_mc * n, *shape)


def _tile(x: np.ndarray, reps: int) -> np.ndarray:
    return np.concatenate([x] * reps, axis=0)


def ti_loss(tape: Tape, model: Denoiser, x, who: np.ndarray, emb: Node, t: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule) -> Node:
    """Sum over identities of the mean noise-prediction error under each identity's token.

    ``x`` rows (array or node) belong to identities ``who``; ``emb`` has one row
    per identity. ``t``/``eps`` hold ``n_mc`` stacked draws per row of ``x``.
    """
    reps = len(t) // len(who)
    who_rep = np.tile(who, reps)
    if isinstance(x, Node):
        xs = tc.concat([x] * reps, 0) if reps > 1 else x
    else:
        xs = _tile(np.asarray(x), reps)
    x_t = forward_noise(xs, t, eps, schedule)
    pred = model.forward(tape, x_t, t, tc.gather_rows(emb, who_rep))
    per_row = tc.sq_l2(tc.reshape(pred - tape.constant(eps), (len(t), -1)), axis=1)
    counts = np.bincount(who_rep, minlength=emb.shape[0]).astype(np.float64)
    w = 1.0 / counts[who_rep]
    return tc.sum(tc.mul(per_row, w))


def ti_train(
    model: Denoiser,
    samples: Sequence[np.ndarray],
    steps: int,
    lr: float = 5e-3,
    seed: int = 0,
    init: ParamStore | None = None,
    n_mc: int = 1,
    trace_every: int = 1,
) -> TIResult:
    """Fit one pseudo-token per entry of ``samples`` with the denoiser frozen.

    Identities are trained side by side; each embedding only sees its own
    identity's loss, so this matches independent runs.
    """
    rng = tc.make_rng(seed, 606)
    m = len(samples)
    if init is None:
        tokens = model.tokens.init_pseudo(model.params, m, rng).copy()
    else:
        tokens = init.copy()
    x = np.concatenate([np.asarray(s, dtype=np.float64) for s in samples])
    who = np.concatenate([np.full(len(s), i) for i, s in enumerate(samples)])
    shape = x.shape[1:]
    trace = TrainTrace()
    for step in range(steps):
        t, eps = _draw_mc(rng, len(x), shape, model.schedule.T, n_mc)
        tape = Tape()
        emb = tape.param(tokens, TokenTable.PSEUDO)
        loss = ti_loss(tape, model, x, who, emb, t, eps, model.schedule)
        value = float(loss.value) / m
        if not math.isfinite(value) or value > 1e6:
            raise TrainingDiverged(f"TI loss {value} at step {step}")
        tc.backward(loss)
        model.params.zero_grad()  # denoiser is frozen; drop what reached it
        tc.adam_step(tokens, lr)
        if step % trace_every == 0:
            trace.losses.append(value)
    return TIResult(tokens, trace)


def personalization_loss(
    tape: Tape,
    model: Denoiser,
    x_ul,
    who: np.ndarray,
    emb: Node,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    n_mc: int = 8,
) -> Node:
    """Monte-Carlo TI loss of (possibly differentiable) samples ``x_ul`` under frozen tokens.

    Returned as the mean per-sample squared error, so a predictor that returns
    the true noise scores 0 and a zero predictor scores the data dimension.
    """
    shape = (x_ul.shape if isinstance(x_ul, Node) else np.shape(x_ul))[1:]
    n = len(who)
    t, eps = _draw_mc(rng, n, shape, schedule.T, n_mc)
    total = ti_loss(tape, model, x_ul, who, emb, t, eps, schedule)
    n_ident = len(np.unique(who))
    return tc.scale(total, 1.0 / n_ident)


def generate_personalized(model: Denoiser, embedding, n: int, sampler: SamplerConfig, schedule: NoiseSchedule, seed: int) -> np.ndarray:
    """Sample ``n`` points conditioned on a learned embedding (or a token id)."""
    if n == 0:
        return np.zeros((0, *model.spec.data_shape()))
    cond = embedding
    if isinstance(embedding, np.ndarray) and embedding.ndim == 1:
        cond = np.tile(embedding, (n, 1))
    return sample(model, n, cond, sampler, schedule, seed)


# ---------------------------------------------------------------------------
# DreamBooth


@dataclass
class DBResult:
    model: Denoiser
    trace: TrainTrace


def db_terms(tape: Tape, model: Denoiser, subj, subj_cond, cls, cls_cond, t_s, eps_s, t_c, eps_c, schedule) -> tuple[Node, Node]:
    def term(x, cond, t, eps):
        x_t = forward_noise(x, t, eps, schedule)
        pred = model.forward(tape, x_t, t, cond)
        return tc.scale(tc.sq_l2(pred - tape.constant(eps)), 1.0 / len(t))

    return term(subj, subj_cond, t_s, eps_s), term(cls, cls_cond, t_c, eps_c)


def db_train(
    model: Denoiser,
    subject: np.ndarray,
    subject_embedding: np.ndarray,
    class_samples: np.ndarray,
    class_token: int,
    prior_weight: float,
    steps: int,
    lr: float = 1e-4,
    seed: int = 0,
    batch: int = 2,
) -> DBResult:
    """Fine-tune a copy of the denoiser: subject error + ``prior_weight`` x class error."""
    tuned = Denoiser(model.params.copy(), model.spec, model.tokens, model.schedule)
    tuned.params.step = 0
    for n in tuned.params.names():
        tuned.params.set_moments(n, np.zeros_like(tuned.params[n]), np.zeros_like(tuned.params[n]))
    schedule = tuned.schedule
    rng = tc.make_rng(seed, 707)
    subject = np.asarray(subject, dtype=np.float64)
    class_samples = np.asarray(class_samples, dtype=np.float64)
    trace = TrainTrace()
    emb = np.asarray(subject_embedding, dtype=np.float64)
    for step in range(steps):
        si = rng.integers(0, len(subject), size=batch)
        ci = rng.integers(0, len(class_samples), size=batch)
        t_s = rng.integers(1, schedule.T + 1, size=batch)
        t_c = rng.integers(1, schedule.T + 1, size=batch)
        eps_s = rng.standard_normal((batch, *subject.shape[1:]))
        eps_c = rng.standard_normal((batch, *subject.shape[1:]))
        tape = Tape()
        s_term, c_term = db_terms(
            tape, tuned, subject[si], np.tile(emb, (batch, 1)), class_samples[ci], np.full(batch, class_token),
            t_s, eps_s, t_c, eps_c, schedule,
        )
        loss = s_term + tc.scale(c_term, prior_weight) if prior_weight else s_term
        value = float(loss.value)
        if not math.isfinite(value) or value > 1e6:
            raise TrainingDiverged(f"DB loss {value} at step {step}")
        tc.backward(loss)
        tc.adam_step(tuned.params, lr, tuned.params.names("net/denoiser/"))
        trace.losses.append(value)
    return DBResult(tuned, trace)
