"""Minimal SVG scatter/line plots and heatmaps with no plotting dependency."""

from __future__ import annotations

from html import escape

import numpy as np

W, H, PAD = 480, 360, 50


def _scale(v, lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return a + (np.asarray(v, dtype=float) - lo) / span * (b - a)


def _frame(title: str, xlabel: str, ylabel: str, xlim, ylim) -> list[str]:
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
    ]
    for v, x in zip(np.linspace(*xlim, 5), np.linspace(PAD, W - PAD, 5)):
        out.append(f'<text x="{x:.1f}" y="{H - PAD + 14}" text-anchor="middle">{v:.3g}</text>')
    for v, y in zip(np.linspace(*ylim, 5), np.linspace(H - PAD, PAD, 5)):
        out.append(f'<text x="{PAD - 4}" y="{y + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    return out


def xy_plot(x, y, title: str = "", xlabel: str = "", ylabel: str = "", line: bool = False) -> str:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.size == 0:
        raise ValueError("nothing to plot")
    xlim, ylim = (x.min(), x.max()), (y.min(), y.max())
    out = _frame(title, xlabel, ylabel, xlim, ylim)
    px = _scale(x, *xlim, PAD, W - PAD)
    py = _scale(y, *ylim, H - PAD, PAD)
    if line:
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(px, py))
        out.append(f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="1.5"/>')
    else:
        out += [f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="steelblue"/>' for a, b in zip(px, py)]
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap(values, row_labels, col_labels, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """Cells shaded white (low) to blue (high) with the value printed in each."""
    v = np.asarray(values, dtype=float)
    nr, nc = v.shape
    finite = v[np.isfinite(v)]
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    cw, ch = (W - 2 * PAD) / nc, (H - 2 * PAD) / nr
    out = _frame(title, xlabel, ylabel, (0, 0), (0, 0))[:5]
    out.append(f'<text x="14" y="{H / 2}" text-anchor="middle" transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>')
    for i in range(nr):
        for j in range(nc):
            t = float(_scale(v[i, j], lo, hi, 0, 1)) if np.isfinite(v[i, j]) else 0.0
            shade = int(255 * (1 - 0.7 * t))
            x, y = PAD + j * cw, PAD + i * ch
            out.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{cw:.1f}" height="{ch:.1f}" '
                       f'fill="rgb({shade},{shade},255)" stroke="gray"/>')
            out.append(f'<text x="{x + cw / 2:.1f}" y="{y + ch / 2 + 4:.1f}" text-anchor="middle">{v[i, j]:.2f}</text>')
    for j, lab in enumerate(col_labels):
        out.append(f'<text x="{PAD + (j + 0.5) * cw:.1f}" y="{H - PAD + 14}" text-anchor="middle">{escape(str(lab))}</text>')
    for i, lab in enumerate(row_labels):
        out.append(f'<text x="{PAD - 4}" y="{PAD + (i + 0.5) * ch + 4:.1f}" text-anchor="end">{escape(str(lab))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
