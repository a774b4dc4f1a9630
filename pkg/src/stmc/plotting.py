"""Minimal SVG charts: a line with an interval band, and a bar chart."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

_MARGIN = (60, 20, 40, 50)  # left, right, top, bottom


def _scale(lo, hi, a, b):
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lambda v: a + (v - lo) / (hi - lo) * (b - a)


def _ticks(lo, hi, n=5):
    return np.linspace(lo, hi, n)


def _frame(width, height, title, ylabel, body, y_ticks, ymap):
    left, right, top, bottom = _MARGIN
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<text x="14" y="{height / 2:.1f}" transform="rotate(-90 14 {height / 2:.1f})" '
           f'text-anchor="middle">{escape(ylabel)}</text>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" stroke="black"/>',
           f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" y2="{height - bottom}" '
           f'stroke="black"/>']
    for v in y_ticks:
        y = ymap(v)
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.3g}</text>')
        out.append(f'<line x1="{left - 3}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
    out.extend(body)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def line_band_svg(x, mean, lo, hi, vline=None, title="", ylabel="", width=640, height=360,
                  zero_line=True) -> str:
    left, right, top, bottom = _MARGIN
    x = np.asarray(x, float)
    ymin = min(np.min(lo), 0.0 if zero_line else np.min(lo))
    ymax = max(np.max(hi), 0.0 if zero_line else np.max(hi))
    xmap = _scale(x.min(), x.max(), left + 10, width - right - 10)
    ymap = _scale(ymin, ymax, height - bottom - 5, top + 5)
    band = " ".join(f"{xmap(a):.1f},{ymap(b):.1f}" for a, b in zip(x, hi))
    band += " " + " ".join(f"{xmap(a):.1f},{ymap(b):.1f}" for a, b in zip(x[::-1], lo[::-1]))
    line = " ".join(f"{xmap(a):.1f},{ymap(b):.1f}" for a, b in zip(x, mean))
    body = [f'<polygon class="band" points="{band}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>',
            f'<polyline class="mean" points="{line}" fill="none" stroke="#08519c" stroke-width="2"/>']
    for a, b in zip(x, mean):
        body.append(f'<circle cx="{xmap(a):.1f}" cy="{ymap(b):.1f}" r="2.5" fill="#08519c"/>')
    if zero_line:
        body.append(f'<line x1="{left}" y1="{ymap(0):.1f}" x2="{width - right}" y2="{ymap(0):.1f}" '
                    f'stroke="gray" stroke-width="0.8"/>')
    if vline is not None:
        vx = xmap(float(vline) - 0.5)
        body.append(f'<line class="treatment-start" x1="{vx:.1f}" y1="{top}" x2="{vx:.1f}" '
                    f'y2="{height - bottom}" stroke="#cb181d" stroke-dasharray="5,4"/>')
    for a in x:
        body.append(f'<text x="{xmap(a):.1f}" y="{height - bottom + 15}" text-anchor="middle">'
                    f'{a:g}</text>')
    return _frame(width, height, title, ylabel, body, _ticks(ymin, ymax), ymap)


def bar_svg(values, labels=None, title="", ylabel="", width=640, height=360) -> str:
    left, right, top, bottom = _MARGIN
    values = np.asarray(values, float)
    n = len(values)
    labels = labels if labels is not None else [str(i + 1) for i in range(n)]
    ymap = _scale(0.0, max(values.max(), 1e-12), height - bottom, top + 5)
    slot = (width - left - right) / max(n, 1)
    body = []
    for i, (v, lab) in enumerate(zip(values, labels)):
        x0 = left + i * slot + 0.15 * slot
        y = ymap(v)
        body.append(f'<rect class="bar" x="{x0:.1f}" y="{y:.1f}" width="{0.7 * slot:.1f}" '
                    f'height="{height - bottom - y:.1f}" fill="#3182bd" data-value="{v:.6g}"/>')
        body.append(f'<text x="{x0 + 0.35 * slot:.1f}" y="{height - bottom + 15}" '
                    f'text-anchor="middle">{escape(str(lab))}</text>')
    return _frame(width, height, title, ylabel, body, _ticks(0.0, max(values.max(), 1e-12)), ymap)
