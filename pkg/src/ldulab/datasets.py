"""Procedural desk-scale datasets with identity structure.

* ``spiral``: points on ``r = a + b*phi`` (unwrapped angle), one contiguous
  arc of the spiral per identity.
* ``gmm``: one Gaussian blob per identity in ``dim`` dimensions.
* ``glyphs``: 16x16 single-channel anti-aliased stroke glyphs, one glyph
  class per identity, jittered per sample.

Points are normalized to ``[-1, 1]``, images to ``[0, 1]``. Each identity owns
a few subject samples plus a larger reference set drawn from the same
distribution (used only for evaluation); the class pool (labelled with token
ids ``1..m``) is what the denoiser is trained on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ModeError
from .tensorcore import make_rng


@dataclass
class DatasetSpec:
    kind: str = "spiral"  # spiral | gmm | glyphs
    n_per_identity: int = 6
    n_identities: int = 6
    noise: float = 0.02
    a: float = 0.05
    b: float = 0.045
    turns: float = 3.0
    dim: int = 2  # gmm dimension
    extent: int = 16
    pool_per_class: int = 400
    n_reference: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("spiral", "gmm", "glyphs"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}", "dataset.kind")
        if self.n_per_identity < 3:
            raise ConfigError("need at least 3 samples per identity", "dataset.n_per_identity")
        if self.n_identities < 1:
            raise ConfigError("need at least one identity", "dataset.n_identities")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0", "dataset.noise")
        if self.kind == "spiral" and (self.a + self.b * self.phi_max) * 1.0 + 3 * self.noise > 1.0:
            raise ConfigError("spiral does not fit in [-1, 1]", "dataset")
        if self.kind == "glyphs" and self.extent < 8:
            raise ConfigError("glyph extent must be >= 8", "dataset.extent")

    @property
    def phi_max(self) -> float:
        return 2 * math.pi * self.turns

    @property
    def data_range(self) -> float:
        return 1.0 if self.kind == "glyphs" else 2.0


@dataclass
class Identity:
    id: int
    samples: np.ndarray
    reference: np.ndarray
    class_token: int
    pseudo_index: int


@dataclass
class Dataset:
    spec: DatasetSpec
    identities: list[Identity]
    pool: np.ndarray
    pool_labels: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.spec.kind

    def subjects(self) -> tuple[np.ndarray, np.ndarray]:
        """All subject samples stacked, and the identity index of each row."""
        xs = np.concatenate([i.samples for i in self.identities])
        who = np.concatenate([np.full(len(i.samples), i.pseudo_index) for i in self.identities])
        return xs, who


# ---------------------------------------------------------------------------
# spiral


def spiral_point(phi, a: float, b: float) -> np.ndarray:
    r = a + b * np.asarray(phi)
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)


def _spiral(spec: DatasetSpec, rng: np.random.Generator) -> Dataset:
    m = spec.n_identities
    edges = np.linspace(0.0, spec.phi_max, m + 1)
    # keep a small gap between neighbouring arcs
    pad = 0.08 * (edges[1] - edges[0])

    def draw(i, n, stratified):
        lo, hi = edges[i] + pad, edges[i + 1] - pad
        if stratified:
            u = (np.arange(n) + rng.random(n)) / n
        else:
            u = rng.random(n)
        phi = lo + (hi - lo) * u
        return spiral_point(phi, spec.a, spec.b) + spec.noise * rng.standard_normal((n, 2))

    identities = []
    pool, labels = [], []
    for i in range(m):
        identities.append(
            Identity(i, draw(i, spec.n_per_identity, True), draw(i, spec.n_reference, False), i + 1, i)
        )
        pool.append(draw(i, spec.pool_per_class, False))
        labels.append(np.full(spec.pool_per_class, i + 1))
    return Dataset(spec, identities, np.concatenate(pool), np.concatenate(labels), {"edges": edges})


# ---------------------------------------------------------------------------
# gaussian mixture


def _gmm(spec: DatasetSpec, rng: np.random.Generator) -> Dataset:
    m, d = spec.n_identities, spec.dim
    # centres on a sphere of radius 0.6 so blobs stay inside [-1, 1]; evenly
    # spaced on the circle in 2-D so no two identities collide
    if d == 2:
        ang = 2 * math.pi * (np.arange(m) + rng.random()) / m
        centres = 0.6 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        centres = rng.standard_normal((m, d))
        centres = 0.6 * centres / np.linalg.norm(centres, axis=1, keepdims=True)
    sd = spec.noise if spec.noise > 0 else 0.0

    def draw(i, n):
        return np.clip(centres[i] + sd * rng.standard_normal((n, d)), -1.0, 1.0)

    identities, pool, labels = [], [], []
    for i in range(m):
        identities.append(Identity(i, draw(i, spec.n_per_identity), draw(i, spec.n_reference), i + 1, i))
        pool.append(draw(i, spec.pool_per_class))
        labels.append(np.full(spec.pool_per_class, i + 1))
    return Dataset(spec, identities, np.concatenate(pool), np.concatenate(labels), {"centres": centres})


# ---------------------------------------------------------------------------
# glyphs

_STROKES = [
    [((0.2, 0.2), (0.8, 0.8)), ((0.2, 0.8), (0.8, 0.2))],  # X
    [((0.5, 0.15), (0.5, 0.85)), ((0.15, 0.5), (0.85, 0.5))],  # +
    [((0.2, 0.2), (0.8, 0.2)), ((0.8, 0.2), (0.8, 0.8)), ((0.8, 0.8), (0.2, 0.8)), ((0.2, 0.8), (0.2, 0.2))],  # box
    [((0.5, 0.15), (0.15, 0.85)), ((0.5, 0.15), (0.85, 0.85)), ((0.15, 0.85), (0.85, 0.85))],  # triangle
    [((0.2, 0.15), (0.2, 0.85)), ((0.2, 0.85), (0.8, 0.85))],  # L
    [((0.2, 0.2), (0.8, 0.2)), ((0.5, 0.2), (0.5, 0.85))],  # T
    [((0.2, 0.15), (0.2, 0.85)), ((0.8, 0.15), (0.8, 0.85)), ((0.2, 0.5), (0.8, 0.5))],  # H
    [((0.15, 0.3), (0.85, 0.3)), ((0.15, 0.7), (0.85, 0.7))],  # =
]


def render_glyph(strokes, extent: int, shift=(0.0, 0.0), width: float = 0.09) -> np.ndarray:
    """Anti-aliased strokes: intensity falls off linearly with distance to each segment."""
    c = (np.arange(extent) + 0.5) / extent
    yy, xx = np.meshgrid(c, c, indexing="ij")
    img = np.zeros((extent, extent))
    for (x0, y0), (x1, y1) in strokes:
        x0, x1 = x0 + shift[0], x1 + shift[0]
        y0, y1 = y0 + shift[1], y1 + shift[1]
        dx, dy = x1 - x0, y1 - y0
        L2 = dx * dx + dy * dy
        u = np.clip(((xx - x0) * dx + (yy - y0) * dy) / L2, 0.0, 1.0)
        dist = np.hypot(xx - (x0 + u * dx), yy - (y0 + u * dy))
        img = np.maximum(img, np.clip(1.0 - (dist - width / 2) * extent, 0.0, 1.0))
    return img


def _glyphs(spec: DatasetSpec, rng: np.random.Generator) -> Dataset:
    m = spec.n_identities
    if m > len(_STROKES):
        raise ConfigError(f"at most {len(_STROKES)} glyph identities", "dataset.n_identities")

    def draw(i, n):
        out = np.empty((n, 1, spec.extent, spec.extent))
        for j in range(n):
            shift = rng.uniform(-0.06, 0.06, size=2)
            img = render_glyph(_STROKES[i], spec.extent, shift)
            img = img + spec.noise * rng.standard_normal(img.shape)
            out[j, 0] = np.clip(img, 0.0, 1.0)
        return out

    identities, pool, labels = [], [], []
    for i in range(m):
        identities.append(Identity(i, draw(i, spec.n_per_identity), draw(i, spec.n_reference), i + 1, i))
        pool.append(draw(i, spec.pool_per_class))
        labels.append(np.full(spec.pool_per_class, i + 1))
    return Dataset(spec, identities, np.concatenate(pool), np.concatenate(labels))


def generate(spec: DatasetSpec) -> Dataset:
    spec.validate()
    rng = make_rng(spec.seed, 505)
    return {"spiral": _spiral, "gmm": _gmm, "glyphs": _glyphs}[spec.kind](spec, rng)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    gaussian_filter: bool = False
    filter_kernel: int = 7
    filter_sigma: float = 1.0
    flip_prob: float = 0.0
    crop: int = 0  # pixels removed from each border before resizing back
    jitter: float = 0.0  # point mode


def _resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = img.shape[-2:]
    ys = (np.arange(h) + 0.5) * H / h - 0.5
    xs = (np.arange(w) + 0.5) * W / w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, H - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, W - 1)
    y1 = np.clip(y0 + 1, 0, H - 1)
    x1 = np.clip(x0 + 1, 0, W - 1)
    wy = np.clip(ys - y0, 0, 1)[:, None]
    wx = np.clip(xs - x0, 0, 1)[None, :]
    a = img[..., y0[:, None], x0[None, :]]
    b = img[..., y0[:, None], x1[None, :]]
    c = img[..., y1[:, None], x0[None, :]]
    d = img[..., y1[:, None], x1[None, :]]
    return (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d)


def augment(sample: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Training-time transforms. Images: filter, flip, centre crop + resize. Points: jitter."""
    from .attacks import gaussian_filter

    x = np.array(sample, dtype=np.float64)
    is_image = x.ndim >= 2
    if not is_image:
        if config.gaussian_filter or config.flip_prob > 0 or config.crop > 0:
            raise ModeError("filter/flip/crop need image input")
        if config.jitter > 0:
            x = x + config.jitter * rng.standard_normal(x.shape)
        return x
    if config.jitter > 0:
        raise ModeError("jitter is a point-mode transform")
    if config.gaussian_filter:
        x = gaussian_filter(x, config.filter_kernel, config.filter_sigma)
    if config.flip_prob > 0 and rng.random() < config.flip_prob:
        x = x[..., ::-1].copy()
    if config.crop > 0:
        H, W = x.shape[-2:]
        c = config.crop
        x = _resize_bilinear(x[..., c : H - c, c : W - c], H, W)
    return x


# ---------------------------------------------------------------------------
# export


def export_points_csv(points: np.ndarray, path, labels=None) -> None:
    with open(path, "w") as fh:
        d = points.shape[1]
        fh.write(",".join(["label"] * (labels is not None) + [f"x{i}" for i in range(d)]) + "\n")
        for j, row in enumerate(points):
            vals = [repr(float(v)) for v in row]
            if labels is not None:
                vals.insert(0, str(int(labels[j])))
            fh.write(",".join(vals) + "\n")


def export_pgm(image: np.ndarray, path) -> None:
    """Binary 8-bit PGM of a ``[0, 1]`` image (``(H, W)`` or ``(1, H, W)``)."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    q = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode())
        fh.write(q.tobytes())
