"""Minimal deterministic SVG line charts (no plotting dependency)."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .errors import ConfigError

W, H = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 64, 120, 24, 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def read_csv_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def render_svg(rows: Sequence[dict], x_key: str, y_keys: Sequence[str], title: str = "") -> str:
    """One polyline per y key over x sorted ascending.

    Rows sharing an x value (e.g. several seeds) are averaged.
    """
    if not rows:
        raise ConfigError("no rows to plot")
    for k in [x_key, *y_keys]:
        if k not in rows[0]:
            raise ConfigError(f"column {k!r} not in data", k)
    series = {}
    for y in y_keys:
        acc: dict[float, list[float]] = {}
        for r in rows:
            xv, yv = _num(r[x_key]), _num(r[y])
            if math.isfinite(xv) and math.isfinite(yv):
                acc.setdefault(xv, []).append(yv)
        series[y] = sorted((xv, sum(v) / len(v)) for xv, v in acc.items())
    xs = [p[0] for s in series.values() for p in s] or [0.0]
    ys = [p[1] for s in series.values() for p in s] or [0.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def px(v):
        return LEFT + (v - x0) / (x1 - x0) * pw

    def py(v):
        return TOP + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
    ]
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{px(xv):.2f}" y="{TOP + ph + 16}" font-size="10" text-anchor="middle">{_fmt(xv)}</text>')
        out.append(f'<text x="{LEFT - 6}" y="{py(yv) + 3:.2f}" font-size="10" text-anchor="end">{_fmt(yv)}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{H - 10}" font-size="12" text-anchor="middle">{escape(x_key)}</text>')
    out.append(
        f'<text x="14" y="{TOP + ph / 2:.2f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {TOP + ph / 2:.2f})">{escape(", ".join(y_keys))}</text>'
    )
    if title:
        out.append(f'<text x="{LEFT + pw / 2:.2f}" y="16" font-size="12" text-anchor="middle">{escape(title)}</text>')
    for i, (y, pts) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for a, b in pts:
            out.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="2.5" fill="{color}"/>')
        ly = TOP + 14 * i + 8
        out.append(f'<line x1="{W - RIGHT + 10}" y1="{ly}" x2="{W - RIGHT + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - RIGHT + 32}" y="{ly + 4}" font-size="10">{escape(y)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(rows: Sequence[dict], x_key: str, y_keys: Sequence[str], path: str | Path, title: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_svg(rows, x_key, y_keys, title))
    return path


def series_of(rows: Sequence[dict], x_key: str, y_key: str) -> list[tuple[float, float]]:
    """The (x, mean y) points a chart of ``y_key`` would draw, sorted by x."""
    acc: dict[float, list[float]] = {}
    for r in rows:
        acc.setdefault(_num(r[x_key]), []).append(_num(r[y_key]))
    return sorted((x, sum(v) / len(v)) for x, v in acc.items())
