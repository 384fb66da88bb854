"""Standalone SVG plots, written by hand so output is byte-deterministic:
no timestamps, no library version strings, fixed coordinate formatting.

Two figures back the run reports: a TKV scatter (signed percent error vs
ground-truth volume) and a convergence curve (validation mean kidney dice
per epoch).
"""

from __future__ import annotations

import os

WIDTH, HEIGHT = 640, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 30, 55

_STYLE = ("text { font-family: monospace; font-size: 12px; fill: #222; } "
          ".title { font-size: 14px; } "
          ".axis { stroke: #222; stroke-width: 1; } "
          ".grid { stroke: #ccc; stroke-width: 0.5; } "
          ".zero { stroke: #888; stroke-width: 1; stroke-dasharray: 4 3; }")

_SERIES_COLORS = ("#1f6fb2", "#c44e52", "#2a9d64", "#8a5fbf")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


class _Frame:
    """Maps data coordinates onto the pixel plot area."""

    def __init__(self, xlo, xhi, ylo, yhi):
        if xhi <= xlo:
            xhi = xlo + 1.0
        if yhi <= ylo:
            yhi = ylo + 1.0
        self.xlo, self.xhi, self.ylo, self.yhi = xlo, xhi, ylo, yhi

    def x(self, v: float) -> float:
        span = WIDTH - MARGIN_L - MARGIN_R
        return MARGIN_L + (v - self.xlo) / (self.xhi - self.xlo) * span

    def y(self, v: float) -> float:
        span = HEIGHT - MARGIN_T - MARGIN_B
        return HEIGHT - MARGIN_B - (v - self.ylo) / (self.yhi - self.ylo) * span


def _frame_svg(frame: _Frame, title: str, xlabel: str, ylabel: str) -> list:
    parts = []
    x0, x1 = MARGIN_L, WIDTH - MARGIN_R
    y0, y1 = HEIGHT - MARGIN_B, MARGIN_T
    for tx in _ticks(frame.xlo, frame.xhi):
        px = frame.x(tx)
        parts.append(f'<line class="grid" x1="{_fmt(px)}" y1="{y0}" '
                     f'x2="{_fmt(px)}" y2="{y1}"/>')
        parts.append(f'<text x="{_fmt(px)}" y="{y0 + 18}" '
                     f'text-anchor="middle">{tx:.3g}</text>')
    for ty in _ticks(frame.ylo, frame.yhi):
        py = frame.y(ty)
        parts.append(f'<line class="grid" x1="{x0}" y1="{_fmt(py)}" '
                     f'x2="{x1}" y2="{_fmt(py)}"/>')
        parts.append(f'<text x="{x0 - 8}" y="{_fmt(py + 4)}" '
                     f'text-anchor="end">{ty:.3g}</text>')
    parts.append(f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>')
    parts.append(f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>')
    parts.append(f'<text class="title" x="{(x0 + x1) // 2}" y="{MARGIN_T - 10}" '
                 f'text-anchor="middle">{title}</text>')
    parts.append(f'<text x="{(x0 + x1) // 2}" y="{HEIGHT - 14}" '
                 f'text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="16" y="{(y0 + y1) // 2}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {(y0 + y1) // 2})">{ylabel}</text>')
    return parts


def _document(body: list) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">'
            f'<style>{_STYLE}</style>'
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
    return head + "".join(body) + "</svg>\n"


def scatter_svg(results, path) -> None:
    """Signed TKV percent error against ground-truth TKV (mL), one circle
    per case; cases with zero ground truth are skipped (error undefined)."""
    points = [(r.tkv_gt_mm3 / 1000.0, r.percent_error)
              for r in results if r.tkv_gt_mm3 > 0]
    if not points:
        raise ValueError("scatter_svg: no cases with positive ground truth")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points] + [0.0]
    pad_x = 0.05 * (max(xs) - min(xs) or 1.0)
    pad_y = 0.10 * (max(ys) - min(ys) or 1.0)
    frame = _Frame(min(xs) - pad_x, max(xs) + pad_x,
                   min(ys) - pad_y, max(ys) + pad_y)
    body = _frame_svg(frame, "TKV percent error per case",
                      "ground-truth TKV (mL)", "percent error")
    zy = frame.y(0.0)
    body.append(f'<line class="zero" x1="{MARGIN_L}" y1="{_fmt(zy)}" '
                f'x2="{WIDTH - MARGIN_R}" y2="{_fmt(zy)}"/>')
    for x, y in points:
        body.append(f'<circle cx="{_fmt(frame.x(x))}" cy="{_fmt(frame.y(y))}" '
                    f'r="4" fill="#1f6fb2" fill-opacity="0.7"/>')
    with open(os.fspath(path), "w") as fh:
        fh.write(_document(body))


def convergence_svg(series_by_label, path) -> None:
    """Validation mean kidney dice per epoch, one polyline per labelled
    series (e.g. one per compared configuration)."""
    items = [(label, pts) for label, pts in series_by_label.items() if pts]
    if not items:
        raise ValueError("convergence_svg: no points to plot")
    epochs = [e for _, pts in items for e, _ in pts]
    frame = _Frame(min(epochs), max(epochs), 0.0, 1.0)
    body = _frame_svg(frame, "Validation mean kidney dice", "epoch", "dice")
    for i, (label, pts) in enumerate(items):
        color = _SERIES_COLORS[i % len(_SERIES_COLORS)]
        coords = " ".join(f"{_fmt(frame.x(e))},{_fmt(frame.y(d))}"
                          for e, d in pts)
        body.append(f'<polyline points="{coords}" fill="none" '
                    f'stroke="{color}" stroke-width="1.5"/>')
        body.append(f'<text x="{WIDTH - MARGIN_R - 6}" '
                    f'y="{MARGIN_T + 16 + 16 * i}" text-anchor="end" '
                    f'fill="{color}">{label}</text>')
    with open(os.fspath(path), "w") as fh:
        fh.write(_document(body))
