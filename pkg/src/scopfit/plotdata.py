"""Plot-ready tables and a minimal SVG renderer."""
from __future__ import annotations

import csv
from xml.sax.saxutils import escape

import numpy as np

__all__ = ["heatmap_svg", "line_svg", "write_table"]

_W, _H, _PAD = 480, 320, 40


def write_table(path, columns: dict) -> None:
    """Write equal-length columns to CSV with round-trip float formatting."""
    names = list(columns)
    cols = [list(columns[k]) for k in names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _scale(v, lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return a + (np.asarray(v, dtype=float) - lo) / span * (b - a)


def line_svg(x, series: dict, title: str = "", dashed=()) -> str:
    """Polyline plot of one or more ``y`` series against ``x``."""
    x = np.asarray(x, dtype=float)
    ys = {k: np.asarray(v, dtype=float) for k, v in series.items()}
    lo = min(float(np.min(v)) for v in ys.values())
    hi = max(float(np.max(v)) for v in ys.values())
    px = _scale(x, x.min(), x.max(), _PAD, _W - _PAD)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}">',
             f'<rect x="{_PAD}" y="{_PAD}" width="{_W - 2 * _PAD}" height="{_H - 2 * _PAD}" '
             'fill="none" stroke="#888"/>',
             f'<text x="{_W / 2}" y="{_PAD / 2}" text-anchor="middle" font-size="12">'
             f"{escape(title)}</text>"]
    for name, y in ys.items():
        py = _scale(y, lo, hi, _H - _PAD, _PAD)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        dash = ' stroke-dasharray="4 3"' if name in dashed else ""
        parts.append(f'<polyline fill="none" stroke="black" points="{pts}"{dash}/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def heatmap_svg(x1, x2, z, title: str = "") -> str:
    """Grey-scale lattice of ``z`` over the ``x1 x x2`` grid (x1 major)."""
    g1, g2 = np.unique(x1), np.unique(x2)
    Z = np.asarray(z, dtype=float).reshape(g1.size, g2.size)
    lo, hi = float(Z.min()), float(Z.max())
    cw = (_W - 2 * _PAD) / g1.size
    ch = (_H - 2 * _PAD) / g2.size
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}">',
             f'<text x="{_W / 2}" y="{_PAD / 2}" text-anchor="middle" font-size="12">'
             f"{escape(title)}</text>"]
    for i in range(g1.size):
        for j in range(g2.size):
            v = int(round(float(_scale(Z[i, j], lo, hi, 230, 20))))
            parts.append(f'<rect x="{_PAD + i * cw:.2f}" y="{_H - _PAD - (j + 1) * ch:.2f}" '
                         f'width="{cw:.2f}" height="{ch:.2f}" fill="rgb({v},{v},{v})"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
