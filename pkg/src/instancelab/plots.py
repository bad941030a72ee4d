"""Standalone SVG emitters for histograms and line charts.

Plots are written as plain SVG text with no library dependency so outputs are
bitwise reproducible; the binning used by a histogram is recorded in an XML
comment at the top of the file.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 60, 20, 40, 50
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _header(title: str, comment: str) -> list:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f"<!-- {comment} -->",
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="monospace" font-size="14">{title}</text>',
    ]


def _axes(lines: list, x0: float, x1: float, y_max: float,
          x_label: str, y_label: str) -> None:
    ax, ay = _ML, _H - _MB
    lines.append(f'<line x1="{ax}" y1="{_MT}" x2="{ax}" y2="{ay}" '
                 'stroke="black"/>')
    lines.append(f'<line x1="{ax}" y1="{ay}" x2="{_W - _MR}" y2="{ay}" '
                 'stroke="black"/>')
    lines.append(f'<text x="{(_ML + _W - _MR) / 2:.1f}" y="{_H - 12}" '
                 'text-anchor="middle" font-family="monospace" '
                 f'font-size="12">{x_label}</text>')
    lines.append(f'<text x="16" y="{(_MT + ay) / 2:.1f}" text-anchor="middle" '
                 f'font-family="monospace" font-size="12" '
                 f'transform="rotate(-90 16 {(_MT + ay) / 2:.1f})">{y_label}</text>')
    for frac, val in ((0.0, x0), (0.5, (x0 + x1) / 2), (1.0, x1)):
        px = _ML + frac * (_W - _ML - _MR)
        lines.append(f'<text x="{px:.1f}" y="{ay + 16}" text-anchor="middle" '
                     f'font-family="monospace" font-size="10">{val:.3g}</text>')
    for frac, val in ((0.0, 0.0), (0.5, y_max / 2), (1.0, y_max)):
        py = ay - frac * (ay - _MT)
        lines.append(f'<text x="{ax - 6}" y="{py + 4:.1f}" text-anchor="end" '
                     f'font-family="monospace" font-size="10">{val:.3g}</text>')


def histogram_svg(path, values: Sequence[float], bins: int = 20,
                  title: str = "", x_label: str = "value",
                  lo: Optional[float] = None,
                  hi: Optional[float] = None) -> None:
    """Fixed-binning histogram; bin edges are recorded in the header comment."""
    vals = [float(v) for v in values if math.isfinite(v)]
    dropped = len(values) - len(vals)
    if not vals:
        vals = [0.0]
    lo = min(vals) if lo is None else lo
    hi = max(vals) if hi is None else hi
    if hi <= lo:
        hi = lo + 1.0
    width = (hi - lo) / bins
    counts = [0] * bins
    for v in vals:
        idx = min(int((v - lo) / width), bins - 1)
        if 0 <= idx:
            counts[idx] += 1
    comment = (f"histogram bins={bins} lo={lo!r} hi={hi!r} n={len(vals)} "
               f"dropped_nonfinite={dropped}")
    lines = _header(title, comment)
    y_max = max(counts) or 1
    span_x = _W - _ML - _MR
    span_y = _H - _MT - _MB
    for i, c in enumerate(counts):
        if c == 0:
            continue
        px = _ML + span_x * i / bins
        ph = span_y * c / y_max
        lines.append(f'<rect x="{px:.2f}" y="{_H - _MB - ph:.2f}" '
                     f'width="{span_x / bins:.2f}" height="{ph:.2f}" '
                     'fill="#1f77b4" stroke="white" stroke-width="0.5"/>')
    _axes(lines, lo, hi, y_max, x_label, "count")
    lines.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def lines_svg(path, x: Sequence[float], series: dict, title: str = "",
              x_label: str = "step", y_label: str = "value") -> None:
    """Multi-series line chart; one polyline and legend entry per series."""
    xs = [float(v) for v in x]
    all_y = [float(v) for ys in series.values() for v in ys
             if v is not None and math.isfinite(v)]
    if not xs or not all_y:
        xs, all_y = [0.0, 1.0], [0.0]
    x0, x1 = min(xs), max(xs)
    if x1 <= x0:
        x1 = x0 + 1.0
    y0, y1 = min(all_y + [0.0]), max(all_y)
    if y1 <= y0:
        y1 = y0 + 1.0
    span_x = _W - _ML - _MR
    span_y = _H - _MT - _MB
    lines = _header(title, f"series={sorted(series)} n={len(xs)}")

    def px(v):
        return _ML + span_x * (v - x0) / (x1 - x0)

    def py(v):
        return _H - _MB - span_y * (v - y0) / (y1 - y0)

    for idx, (name, ys) in enumerate(sorted(series.items())):
        color = _COLORS[idx % len(_COLORS)]
        pts = " ".join(f"{px(xv):.2f},{py(float(yv)):.2f}"
                       for xv, yv in zip(xs, ys)
                       if yv is not None and math.isfinite(float(yv)))
        lines.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     'stroke-width="1.5"/>')
        ly = _MT + 14 * idx
        lines.append(f'<line x1="{_W - _MR - 110}" y1="{ly}" '
                     f'x2="{_W - _MR - 90}" y2="{ly}" stroke="{color}" '
                     'stroke-width="2"/>')
        lines.append(f'<text x="{_W - _MR - 84}" y="{ly + 4}" '
                     f'font-family="monospace" font-size="11">{name}</text>')
    _axes(lines, x0, x1, y1, x_label, y_label)
    lines.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
