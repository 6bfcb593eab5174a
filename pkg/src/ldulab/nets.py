"""Trainable networks: the conditional noise predictor, the perturbation net
and the token-embedding table that stands in for a text encoder.

Parameter names follow ``net/<which>/<layer>/<w|b>``. Token id ``0`` is the
reserved null token (zero embedding, the unconditional branch); class tokens
use ids ``1..n_class``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ShapeError, TokenError
from .tensorcore import Node, ParamStore, Tape

TIME_DIM = 32
COND_DIM = 16
NULL_TOKEN = 0


@dataclass
class DenoiserSpec:
    kind: str = "points"  # "points" | "images"
    dim: int = 2  # points: data dimension
    channels: int = 1  # images
    extent: int = 16  # images: square side
    hidden: tuple[int, ...] = (128, 128, 128)
    conv_width: int = 32
    n_class: int = 6
    time_dim: int = TIME_DIM
    cond_dim: int = COND_DIM

    def data_shape(self) -> tuple[int, ...]:
        if self.kind == "points":
            return (self.dim,)
        return (self.channels, self.extent, self.extent)


@dataclass
class RhoSpec:
    kind: str = "points"
    dim: int = 2
    channels: int = 1
    extent: int = 16
    hidden: int = 128
    conv_widths: tuple[int, int] = (64, 128)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


# ---------------------------------------------------------------------------
# tokens


@dataclass
class TokenTable:
    """Class-token embeddings (owned by the denoiser store) plus pseudo-tokens.

    Pseudo-tokens live in their own store so textual inversion can update them
    while every denoiser parameter stays frozen.
    """

    n_class: int
    cond_dim: int = COND_DIM
    pseudo: ParamStore = field(default_factory=ParamStore)

    PSEUDO = "net/tokens/pseudo/w"

    def class_embeddings(self, params: ParamStore) -> np.ndarray:
        return params["net/tokens/class/w"]

    def init_pseudo(self, params: ParamStore, n: int, rng: np.random.Generator, sigma: float = 0.01) -> ParamStore:
        """``n`` pseudo-tokens at the mean class embedding plus ``N(0, sigma^2)`` noise."""
        mean = self.class_embeddings(params).mean(axis=0)
        self.pseudo = ParamStore({self.PSEUDO: mean[None, :] + sigma * rng.standard_normal((n, self.cond_dim))})
        return self.pseudo

    def lookup(self, tape: Tape, params: ParamStore, ids) -> Node:
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        if ids.size and (ids.min() < 0 or ids.max() > self.n_class):
            bad = ids[(ids < 0) | (ids > self.n_class)][0]
            raise TokenError(f"unknown token id {int(bad)}")
        table = tc.concat([tape.constant(np.zeros((1, self.cond_dim))), tape.param(params, "net/tokens/class/w")], 0)
        return tc.gather_rows(table, ids)

    def pseudo_embedding(self, tape: Tape, which) -> Node:
        return tc.gather_rows(tape.param(self.pseudo, self.PSEUDO), np.atleast_1d(which))


# ---------------------------------------------------------------------------
# denoiser


def init_denoiser(spec: DenoiserSpec, seed: int = 0) -> ParamStore:
    rng = tc.make_rng(seed, 101)
    p = ParamStore()
    p["net/tokens/class/w"] = rng.standard_normal((spec.n_class, spec.cond_dim))
    if spec.kind == "points":
        widths = [spec.dim, *spec.hidden]
        h0 = widths[1]
        p["net/denoiser/in/w"] = _glorot(rng, spec.dim, h0, (spec.dim, h0))
        p["net/denoiser/in/b"] = np.zeros(h0)
        p["net/denoiser/time/w"] = _glorot(rng, spec.time_dim, h0, (spec.time_dim, h0))
        p["net/denoiser/cond/w"] = _glorot(rng, spec.cond_dim, h0, (spec.cond_dim, h0))
        for i in range(1, len(spec.hidden)):
            a, b = widths[i], widths[i + 1]
            p[f"net/denoiser/h{i}/w"] = _glorot(rng, a, b, (a, b))
            p[f"net/denoiser/h{i}/b"] = np.zeros(b)
        p["net/denoiser/out/w"] = _glorot(rng, widths[-1], spec.dim, (widths[-1], spec.dim))
        p["net/denoiser/out/b"] = np.zeros(spec.dim)
    elif spec.kind == "images":
        c, f = spec.channels, spec.conv_width
        fc = 8
        p["net/denoiser/in/w"] = _glorot(rng, c * 9, f * 9, (f, c, 3, 3))
        p["net/denoiser/in/b"] = np.zeros(f)
        p["net/denoiser/time/w"] = _glorot(rng, spec.time_dim, f, (spec.time_dim, f))
        p["net/denoiser/time/b"] = np.zeros(f)
        p["net/denoiser/cond/w"] = _glorot(rng, spec.cond_dim, fc, (spec.cond_dim, fc))
        p["net/denoiser/cond/b"] = np.zeros(fc)
        p["net/denoiser/mid/w"] = _glorot(rng, (f + fc) * 9, 2 * f * 9, (2 * f, f + fc, 3, 3))
        p["net/denoiser/mid/b"] = np.zeros(2 * f)
        p["net/denoiser/up/w"] = _glorot(rng, 2 * f * 9, f * 9, (2 * f, f, 3, 3))
        p["net/denoiser/up/b"] = np.zeros(f)
        p["net/denoiser/out/w"] = _glorot(rng, 2 * f * 9, c * 9, (c, 2 * f, 3, 3)) * 0.1
        p["net/denoiser/out/b"] = np.zeros(c)
    else:
        raise ShapeError(f"unknown data kind {spec.kind!r}")
    return p


def _cond_embedding(tape: Tape, params: ParamStore, tokens: TokenTable, cond, n: int) -> Node:
    if isinstance(cond, Node):
        emb = cond
    elif cond is None:
        emb = tokens.lookup(tape, params, np.full(n, NULL_TOKEN))
    elif isinstance(cond, np.ndarray) and cond.dtype.kind == "f":
        emb = tape.constant(cond)
    else:
        ids = np.atleast_1d(np.asarray(cond, dtype=np.int64))
        if ids.size == 1 and n != 1:
            ids = np.full(n, int(ids[0]))
        emb = tokens.lookup(tape, params, ids)
    if emb.value.ndim == 1:
        emb = tc.broadcast_rows(emb, n)
    if emb.shape != (n, tokens.cond_dim):
        raise ShapeError(f"condition embedding shape {emb.shape} vs {(n, tokens.cond_dim)}")
    return emb


def denoiser_forward(
    tape: Tape,
    params: ParamStore,
    spec: DenoiserSpec,
    tokens: TokenTable,
    x_t,
    t,
    cond=None,
) -> Node:
    """Predicted noise for a batch ``x_t`` at timestep(s) ``t``.

    ``cond`` is ``None`` (null token), a token id or id array, a float array of
    embeddings, or an embedding :class:`Node` (for gradients w.r.t. tokens).
    """
    x = x_t if isinstance(x_t, Node) else tape.constant(x_t)
    n = x.shape[0]
    if x.shape[1:] != spec.data_shape():
        raise ShapeError(f"denoiser: input shape {x.shape} vs data shape {spec.data_shape()}")
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(n, int(t))
    temb = tape.constant(tc.sinusoidal_embedding(t, spec.time_dim))
    cemb = _cond_embedding(tape, params, tokens, cond, n)
    P = lambda name: tape.param(params, f"net/denoiser/{name}")  # noqa: E731

    if spec.kind == "points":
        h = tc.affine(x, P("in/w"), P("in/b"))
        h = h + temb @ P("time/w")
        h = h + cemb @ P("cond/w")
        h = tc.silu(h)
        for i in range(1, len(spec.hidden)):
            h = tc.silu(tc.affine(h, P(f"h{i}/w"), P(f"h{i}/b")))
        return tc.affine(h, P("out/w"), P("out/b"))

    ext = spec.extent
    h0 = tc.conv2d(x, P("in/w"), P("in/b"))
    h0 = tc.silu(tc.channel_bias(h0, tc.affine(temb, P("time/w"), P("time/b"))))
    cmap = tc.spatial_broadcast(tc.affine(cemb, P("cond/w"), P("cond/b")), ext, ext)
    h1 = tc.silu(tc.conv2d(tc.concat([h0, cmap], 1), P("mid/w"), P("mid/b")))
    up = tc.silu(tc.conv_transpose2d(h1, P("up/w"), P("up/b")))
    return tc.conv2d(tc.concat([up, h0], 1), P("out/w"), P("out/b"))


def guided_noise(
    tape: Tape,
    params: ParamStore,
    spec: DenoiserSpec,
    tokens: TokenTable,
    x_t,
    t,
    cond,
    guidance: float = 1.0,
) -> Node:
    """Classifier-free guidance ``eps_u + g * (eps_c - eps_u)``.

    ``g == 1`` evaluates only the conditional branch and ``g == 0`` only the
    unconditional one, so both endpoints are exact.
    """
    if guidance < 0:
        raise ValueError("guidance scale must be >= 0")
    if guidance == 1.0 or cond is None:
        return denoiser_forward(tape, params, spec, tokens, x_t, t, cond)
    eps_u = denoiser_forward(tape, params, spec, tokens, x_t, t, None)
    if guidance == 0.0:
        return eps_u
    eps_c = denoiser_forward(tape, params, spec, tokens, x_t, t, cond)
    return eps_u + tc.scale(eps_c - eps_u, guidance)


# ---------------------------------------------------------------------------
# perturbation network


def init_rho(spec: RhoSpec, seed: int = 0) -> ParamStore:
    """Residual perturbation net; the last layer starts at zero so rho(z) == z."""
    rng = tc.make_rng(seed, 202)
    p = ParamStore()
    if spec.kind == "points":
        d, h = spec.dim, spec.hidden
        p["net/rho/l1/w"] = _glorot(rng, d, h, (d, h))
        p["net/rho/l1/b"] = np.zeros(h)
        p["net/rho/l2/w"] = _glorot(rng, h, h, (h, h))
        p["net/rho/l2/b"] = np.zeros(h)
        p["net/rho/out/w"] = np.zeros((h, d))
        p["net/rho/out/b"] = np.zeros(d)
    elif spec.kind == "images":
        c = spec.channels
        f1, f2 = spec.conv_widths
        p["net/rho/down/w"] = _glorot(rng, c * 9, f1 * 9, (f1, c, 3, 3))
        p["net/rho/down/b"] = np.zeros(f1)
        p["net/rho/mid/w"] = _glorot(rng, f1 * 9, f2 * 9, (f2, f1, 3, 3))
        p["net/rho/mid/b"] = np.zeros(f2)
        p["net/rho/up/w"] = _glorot(rng, f2 * 9, f1 * 9, (f2, f1, 3, 3))
        p["net/rho/up/b"] = np.zeros(f1)
        p["net/rho/out/w"] = np.zeros((c, 2 * f1, 3, 3))
        p["net/rho/out/b"] = np.zeros(c)
    else:
        raise ShapeError(f"unknown data kind {spec.kind!r}")
    return p


def rho_forward(tape: Tape, params: ParamStore, spec: RhoSpec, z_T) -> Node:
    z = z_T if isinstance(z_T, Node) else tape.constant(z_T)
    P = lambda name: tape.param(params, f"net/rho/{name}")  # noqa: E731
    if spec.kind == "points":
        if z.value.ndim != 2 or z.shape[1] != spec.dim:
            raise ShapeError(f"rho: input shape {z.shape} vs (n, {spec.dim})")
        h = tc.leaky_relu(tc.affine(z, P("l1/w"), P("l1/b")))
        h = tc.leaky_relu(tc.affine(h, P("l2/w"), P("l2/b")))
        return z + tc.affine(h, P("out/w"), P("out/b"))
    want = (spec.channels, spec.extent, spec.extent)
    if z.value.ndim != 4 or z.shape[1:] != want:
        raise ShapeError(f"rho: input shape {z.shape} vs (n, {', '.join(map(str, want))})")
    d = tc.leaky_relu(tc.conv2d(z, P("down/w"), P("down/b")))
    m = tc.leaky_relu(tc.conv2d(d, P("mid/w"), P("mid/b")))
    u = tc.leaky_relu(tc.conv_transpose2d(m, P("up/w"), P("up/b")))
    return z + tc.conv2d(tc.concat([u, d], 1), P("out/w"), P("out/b"))
