"""Minimal SVG line plots (no plotting dependency)."""

from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray
    band: np.ndarray | None = None  # symmetric half-width, drawn as a shaded area
    markers: bool = False
    dashed: bool = False


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        return np.array([lo])
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    return np.arange(np.ceil(lo / step) * step, hi + 1e-9 * step, step)


class Panel:
    def __init__(self, x0, y0, w, h, xlim, ylim, equal=False):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        (xa, xb), (ya, yb) = xlim, ylim
        if xb <= xa:
            xa, xb = xa - 1, xb + 1
        if yb <= ya:
            ya, yb = ya - 1, yb + 1
        if equal:
            sx, sy = w / (xb - xa), h / (yb - ya)
            s = min(sx, sy)
            cx, cy = 0.5 * (xa + xb), 0.5 * (ya + yb)
            xa, xb = cx - w / s / 2, cx + w / s / 2
            ya, yb = cy - h / s / 2, cy + h / s / 2
        self.xlim, self.ylim = (xa, xb), (ya, yb)

    def px(self, x):
        return self.x0 + (np.asarray(x) - self.xlim[0]) / (self.xlim[1] - self.xlim[0]) * self.w

    def py(self, y):
        return self.y0 + self.h - (np.asarray(y) - self.ylim[0]) / (self.ylim[1] - self.ylim[0]) * self.h


def _limits(series: list[Series], pad: float = 0.05):
    xs = np.concatenate([s.x for s in series]) if series else np.zeros(1)
    ys = [s.y for s in series] + [s.y + s.band for s in series if s.band is not None] \
        + [s.y - s.band for s in series if s.band is not None]
    ys = np.concatenate(ys) if ys else np.zeros(1)
    xs, ys = xs[np.isfinite(xs)], ys[np.isfinite(ys)]
    if xs.size == 0:
        xs = np.zeros(1)
    if ys.size == 0:
        ys = np.zeros(1)
    dx, dy = xs.max() - xs.min(), ys.max() - ys.min()
    return (xs.min() - pad * dx, xs.max() + pad * dx), (ys.min() - pad * dy, ys.max() + pad * dy)


def _panel_svg(p: Panel, series: list[Series], title: str, xlabel: str, ylabel: str) -> list[str]:
    out = [f'<rect x="{p.x0}" y="{p.y0}" width="{p.w}" height="{p.h}" fill="none" stroke="#444"/>']
    for t in _ticks(*p.xlim):
        x = p.px(t)
        out.append(f'<line x1="{x:.1f}" y1="{p.y0 + p.h}" x2="{x:.1f}" y2="{p.y0 + p.h + 4}" stroke="#444"/>')
        out.append(f'<text x="{x:.1f}" y="{p.y0 + p.h + 16}" font-size="10" text-anchor="middle">{t:g}</text>')
    for t in _ticks(*p.ylim):
        y = p.py(t)
        out.append(f'<line x1="{p.x0 - 4}" y1="{y:.1f}" x2="{p.x0}" y2="{y:.1f}" stroke="#444"/>')
        out.append(f'<text x="{p.x0 - 6}" y="{y + 3:.1f}" font-size="10" text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{p.x0 + p.w / 2}" y="{p.y0 - 8}" font-size="12" text-anchor="middle">{escape(title)}</text>')
    out.append(f'<text x="{p.x0 + p.w / 2}" y="{p.y0 + p.h + 32}" font-size="11" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="{p.x0 - 42}" y="{p.y0 + p.h / 2}" font-size="11" text-anchor="middle" '
        f'transform="rotate(-90 {p.x0 - 42} {p.y0 + p.h / 2})">{escape(ylabel)}</text>'
    )
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        ok = np.isfinite(s.x) & np.isfinite(s.y)
        x, y = s.x[ok], s.y[ok]
        if x.size == 0:
            continue
        if s.band is not None:
            b = s.band[ok]
            pts = list(zip(p.px(x), p.py(y + b))) + list(zip(p.px(x[::-1]), p.py((y - b)[::-1])))
            out.append('<polygon points="%s" fill="%s" fill-opacity="0.15" stroke="none"/>'
                       % (" ".join(f"{a:.1f},{c:.1f}" for a, c in pts), color))
        pts = " ".join(f"{a:.1f},{c:.1f}" for a, c in zip(p.px(x), p.py(y)))
        dash = ' stroke-dasharray="5,3"' if s.dashed else ""
        if s.markers:
            for a, c in zip(p.px(x), p.py(y)):
                out.append(f'<circle cx="{a:.1f}" cy="{c:.1f}" r="4" fill="none" stroke="{color}"/>')
        else:
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')
        ly = p.y0 + 14 + 14 * i
        out.append(f'<line x1="{p.x0 + 8}" y1="{ly - 4}" x2="{p.x0 + 24}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{p.x0 + 28}" y="{ly}" font-size="10">{escape(s.label)}</text>')
    return out


def write_plot(path, panels: list[dict], width: int = 520, height: int = 360) -> None:
    """``panels``: dicts with keys series, title, xlabel, ylabel and optional equal (axis aspect)."""
    n = max(1, len(panels))
    total_w = width * n
    body = []
    for i, spec in enumerate(panels):
        xlim, ylim = _limits(spec["series"])
        p = Panel(i * width + 70, 30, width - 100, height - 80, xlim, ylim, spec.get("equal", False))
        body += _panel_svg(p, spec["series"], spec.get("title", ""), spec.get("xlabel", ""), spec.get("ylabel", ""))
    svg = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{height}" '
        f'viewBox="0 0 {total_w} {height}" font-family="sans-serif">',
        f'<rect width="{total_w}" height="{height}" fill="white"/>',
        *body,
        "</svg>",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(svg) + "\n")
