"""Dependency-free SVG line charts for forensic reports.

Good enough for stacked time-series panels and a top-down trajectory view;
not a general plotting library.
"""

from __future__ import annotations

import os

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]

_MARGIN = 52
_PANEL_W = 720
_PANEL_H = 210


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _panel_svg(panel: dict, y_off: int) -> list:
    xs_all = [x for _, xs, _ in panel["series"] for x in xs]
    ys_all = [y for _, _, ys in panel["series"] for y in ys]
    if not xs_all:
        return []
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    for h in panel.get("hlines", ()):
        y_lo, y_hi = min(y_lo, h), max(y_hi, h)
    if x_hi - x_lo < 1e-12:
        x_hi = x_lo + 1.0
    if y_hi - y_lo < 1e-12:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    w = _PANEL_W - 2 * _MARGIN
    h = _PANEL_H - 2 * _MARGIN

    def px(x):
        return _MARGIN + (x - x_lo) / (x_hi - x_lo) * w

    def py(y):
        return y_off + _PANEL_H - _MARGIN - (y - y_lo) / (y_hi - y_lo) * h

    out = [
        f'<rect x="{_MARGIN}" y="{y_off + _MARGIN}" width="{w}" height="{h}" '
        'fill="none" stroke="#444" stroke-width="1"/>',
        f'<text x="{_MARGIN}" y="{y_off + _MARGIN - 14}" font-size="14" '
        f'font-family="sans-serif" fill="#000">{panel.get("title", "")}</text>',
        f'<text x="{_MARGIN - 6}" y="{py(y_lo):.1f}" font-size="10" text-anchor="end" '
        f'font-family="sans-serif">{_fmt(y_lo)}</text>',
        f'<text x="{_MARGIN - 6}" y="{py(y_hi):.1f}" font-size="10" text-anchor="end" '
        f'font-family="sans-serif">{_fmt(y_hi)}</text>',
        f'<text x="{px(x_lo):.1f}" y="{y_off + _PANEL_H - _MARGIN + 16}" font-size="10" '
        f'font-family="sans-serif">{_fmt(x_lo)}</text>',
        f'<text x="{px(x_hi):.1f}" y="{y_off + _PANEL_H - _MARGIN + 16}" font-size="10" '
        f'text-anchor="end" font-family="sans-serif">{_fmt(x_hi)}</text>',
    ]
    if panel.get("xlabel"):
        out.append(
            f'<text x="{_MARGIN + w / 2:.1f}" y="{y_off + _PANEL_H - _MARGIN + 30}" '
            f'font-size="11" text-anchor="middle" font-family="sans-serif">{panel["xlabel"]}</text>'
        )
    for hline in panel.get("hlines", ()):
        out.append(
            f'<line x1="{_MARGIN}" y1="{py(hline):.1f}" x2="{_MARGIN + w}" y2="{py(hline):.1f}" '
            'stroke="#999" stroke-width="1" stroke-dasharray="4,3"/>'
        )
    for idx, (label, xs, ys) in enumerate(panel["series"]):
        color = _COLORS[idx % len(_COLORS)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
        out.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        out.append(
            f'<text x="{_MARGIN + w - 4}" y="{y_off + _MARGIN + 14 + 13 * idx}" font-size="11" '
            f'text-anchor="end" font-family="sans-serif" fill="{color}">{label}</text>'
        )
    return out


def line_chart_svg(panels, path) -> None:
    """Write stacked line-chart panels to an SVG file atomically.

    Each panel is {"title", "series": [(label, xs, ys), ...],
    "hlines": [...], "xlabel": str}.
    """
    height = _PANEL_H * len(panels)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_PANEL_W}" height="{height}" '
        f'viewBox="0 0 {_PANEL_W} {height}">',
        f'<rect width="{_PANEL_W}" height="{height}" fill="#ffffff"/>',
    ]
    for k, panel in enumerate(panels):
        parts.extend(_panel_svg(panel, k * _PANEL_H))
    parts.append("</svg>")
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(parts) + "\n")
    os.replace(tmp, path)
