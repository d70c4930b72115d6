"""
Minimal SVG renderings of the figure CSVs (line charts, bar charts and
site heatmaps), written as plain markup with no plotting dependency.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

W, H, PAD = 480, 320, 48
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]


def _read(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _num(x: str) -> float:
    try:
        return float(x)
    except ValueError:
        return math.nan


def _scale(lo, hi, a, b):
    if not np.isfinite(lo) or not np.isfinite(hi):
        lo, hi = 0.0, 1.0
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    return lambda v: a + (v - lo) / (hi - lo) * (b - a)


def _frame(title: str, xlabel: str, ylabel: str, xr, yr) -> list[str]:
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="14" y="{H / 2}" text-anchor="middle" transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>']
    for v, anchor, x, y in ((xr[0], "start", PAD, H - PAD + 14), (xr[1], "end", W - PAD, H - PAD + 14)):
        out.append(f'<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.3g}</text>')
    for v, y in ((yr[0], H - PAD), (yr[1], PAD + 4)):
        out.append(f'<text x="{PAD - 4}" y="{y}" text-anchor="end">{v:.3g}</text>')
    return out


def line_chart(series: dict[str, tuple[np.ndarray, np.ndarray]], title: str, xlabel: str, ylabel: str,
               hline: float | None = None) -> str:
    """Polyline per named series; an optional dashed reference level."""
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()]) if series else np.zeros(1)
    if hline is not None:
        ys = np.append(ys, hline)
    xr, yr = (np.nanmin(xs), np.nanmax(xs)), (np.nanmin(ys), np.nanmax(ys))
    sx, sy = _scale(*xr, PAD, W - PAD), _scale(*yr, H - PAD, PAD)
    out = _frame(title, xlabel, ylabel, xr, yr)
    if hline is not None:
        out.append(f'<line x1="{PAD}" y1="{sy(hline):.1f}" x2="{W - PAD}" y2="{sy(hline):.1f}" '
                   'stroke="gray" stroke-dasharray="4 3"/>')
    for i, (name, (x, y)) in enumerate(series.items()):
        col = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x, y) if np.isfinite(a) and np.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{W - PAD + 4}" y="{PAD + 14 * i}" fill="{col}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(values, title: str, xlabel: str, ylabel: str, reference: float | None = None) -> str:
    values = np.asarray(values, float)
    top = max(float(np.nanmax(values)) if values.size else 1.0, reference or 0.0)
    sy = _scale(0.0, top, H - PAD, PAD)
    out = _frame(title, xlabel, ylabel, (0.0, 1.0), (0.0, top))
    bw = (W - 2 * PAD) / max(values.size, 1)
    for i, v in enumerate(values):
        out.append(f'<rect x="{PAD + i * bw + 1:.1f}" y="{sy(v):.1f}" width="{bw - 2:.1f}" '
                   f'height="{H - PAD - sy(v):.1f}" fill="{PALETTE[0]}"/>')
    if reference is not None:
        out.append(f'<line x1="{PAD}" y1="{sy(reference):.1f}" x2="{W - PAD}" y2="{sy(reference):.1f}" '
                   'stroke="black" stroke-dasharray="4 3"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap(x, y, v, title: str) -> str:
    """Square cell per site on a diverging blue/red scale symmetric about zero."""
    x, y, v = (np.asarray(a, float) for a in (x, y, v))
    ux, uy = np.unique(x), np.unique(y)
    cell = min((W - 2 * PAD) / max(len(ux), 1), (H - 2 * PAD) / max(len(uy), 1))
    vmax = float(np.nanmax(np.abs(v))) or 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>']
    for a, b, c in zip(x, y, v):
        i, j = int(np.searchsorted(ux, a)), int(np.searchsorted(uy, b))
        t = max(-1.0, min(1.0, c / vmax))
        shade = int(255 * (1 - abs(t)))
        col = f"rgb(255,{shade},{shade})" if t > 0 else f"rgb({shade},{shade},255)"
        out.append(f'<rect x="{PAD + i * cell:.1f}" y="{H - PAD - (j + 1) * cell:.1f}" width="{cell:.1f}" '
                   f'height="{cell:.1f}" fill="{col}"/>')
    out.append(f'<text x="{W - PAD}" y="{H - 12}" text-anchor="end">|max| = {vmax:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _grouped(rows, key: int, xcol: int, ycol: int) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], ([], []))
        groups[r[key]][0].append(_num(r[xcol]))
        groups[r[key]][1].append(_num(r[ycol]))
    return {k: (np.array(a), np.array(b)) for k, (a, b) in groups.items()}


def emit_figures(out, rho_true: float | None = None) -> list[Path]:
    """Render every recognised CSV under ``out/figures`` next to it as ``.svg``."""
    fig = Path(out) / "figures"
    written = []

    def put(name, text):
        p = fig / name
        p.write_text(text)
        written.append(p)

    if (fig / "rho_trajectory.csv").exists():
        _, rows = _read(fig / "rho_trajectory.csv")
        series = {f"rep {k}": v for k, v in _grouped(rows, 0, 1, 2).items()}
        put("rho_trajectory.svg", line_chart(series, "learned range per epoch", "epoch", "rho", rho_true))
    if (fig / "sample_efficiency.csv").exists():
        hdr, rows = _read(fig / "sample_efficiency.csv")
        t = np.array([_num(r[0]) for r in rows])
        series = {hdr[c].removeprefix("rmse_"): (t, np.array([_num(r[c]) for r in rows])) for c in (1, 2)}
        put("sample_efficiency.svg", line_chart(series, "test RMSE vs training length", "T_train", "RMSE"))
    if (fig / "horizon_decay.csv").exists():
        hdr, rows = _read(fig / "horizon_decay.csv")
        h = np.array([_num(r[0]) for r in rows])
        series = {hdr[c].removeprefix("rmse_"): (h, np.array([_num(r[c]) for r in rows])) for c in (1, 2, 3)}
        put("horizon_decay.svg", line_chart(series, "recursive forecast RMSE", "horizon", "RMSE"))
    for p in sorted(fig.glob("residual_snapshot_*.csv")):
        _, rows = _read(p)
        cols = np.array([[_num(c) for c in r] for r in rows]).T
        put(p.with_suffix(".svg").name, heatmap(cols[0], cols[1], cols[2], p.stem.replace("_", " ")))
    for p in sorted(fig.glob("pit_*.csv")):
        _, rows = _read(p)
        put(p.with_suffix(".svg").name,
            bar_chart([_num(r[2]) for r in rows], p.stem.replace("_", " "), "PIT", "fraction", 1.0 / len(rows)))
    return written


__all__ = ["line_chart", "bar_chart", "heatmap", "emit_figures"]
