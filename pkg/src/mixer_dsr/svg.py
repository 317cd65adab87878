"""Minimal deterministic SVG writers (presentation only)."""

from __future__ import annotations

import numpy as np

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def _color(v: float) -> str:
    # white -> dark blue
    v = min(max(v, 0.0), 1.0)
    r = int(round(255 * (1 - 0.85 * v)))
    g = int(round(255 * (1 - 0.7 * v)))
    b = int(round(255 * (1 - 0.3 * v)))
    return f"#{r:02x}{g:02x}{b:02x}"


def _doc(width: float, height: float, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
            f'viewBox="0 0 {width:.0f} {height:.0f}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>\n"])


def heatmap(values: np.ndarray, highlight=None, title: str = "", cell: int = 14) -> str:
    """Grid of cells, one row per environment; ``highlight[e]`` gets an outline."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    n_rows, n_cols = values.shape
    lo, hi = np.nanmin(values), np.nanmax(values)
    span = hi - lo if hi > lo else 1.0
    x0, y0 = 50, 30
    body = [f'<text x="{x0}" y="18">{title}</text>']
    for e in range(n_rows):
        for m in range(n_cols):
            v = (values[e, m] - lo) / span
            x, y = x0 + m * cell, y0 + e * cell
            stroke = ' stroke="black" stroke-width="1.5"' if highlight is not None and highlight[e] == m else ""
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_color(v)}"{stroke}/>')
        body.append(f'<text x="{x0 - 6}" y="{y0 + e * cell + cell - 3}" text-anchor="end">{e}</text>')
    for m in range(n_cols):
        body.append(f'<text x="{x0 + m * cell + cell / 2}" y="{y0 + n_rows * cell + 12}" text-anchor="middle">{m}</text>')
    return _doc(x0 + n_cols * cell + 20, y0 + n_rows * cell + 25, body)


def bars(counts, title: str = "") -> str:
    counts = np.asarray(counts, dtype=np.float64)
    width, height, pad = 40 + 24 * len(counts), 160, 30
    top = counts.max() if counts.size and counts.max() > 0 else 1.0
    body = [f'<text x="10" y="16">{title}</text>']
    for i, c in enumerate(counts):
        h = (height - 2 * pad) * c / top
        x = 20 + 24 * i
        body.append(f'<rect x="{x}" y="{height - pad - h:.2f}" width="18" height="{h:.2f}" fill="{_PALETTE[i % 10]}"/>')
        body.append(f'<text x="{x + 9}" y="{height - pad + 12}" text-anchor="middle">{i}</text>')
    return _doc(width, height, body)


def line_panels(panels: list[dict], width: int = 320, height: int = 200) -> str:
    """Side-by-side panels; each is ``{"title", "series": [(xs, ys, label, dashed)]}``."""
    body = []
    for k, panel in enumerate(panels):
        ox = k * (width + 20) + 10
        series = panel["series"]
        xs_all = np.concatenate([np.asarray(s[0]) for s in series])
        ys_all = np.concatenate([np.asarray(s[1]) for s in series])
        xl, xh = float(xs_all.min()), float(xs_all.max())
        yl, yh = float(ys_all.min()), float(ys_all.max())
        xs_span = xh - xl if xh > xl else 1.0
        ys_span = yh - yl if yh > yl else 1.0
        body.append(f'<rect x="{ox}" y="25" width="{width}" height="{height}" fill="none" stroke="#999"/>')
        body.append(f'<text x="{ox}" y="16">{panel.get("title", "")}</text>')
        for j, (xs, ys, label, dashed) in enumerate(series):
            px = ox + (np.asarray(xs) - xl) / xs_span * width
            py = 25 + height - (np.asarray(ys) - yl) / ys_span * height
            pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
            dash = ' stroke-dasharray="4,3"' if dashed else ""
            body.append(f'<polyline points="{pts}" fill="none" stroke="{_PALETTE[j % 10]}" stroke-width="1.3"{dash}>'
                        f"<title>{label}</title></polyline>")
    return _doc(len(panels) * (width + 20) + 10, height + 40, body)
