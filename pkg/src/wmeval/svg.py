"""Minimal deterministic SVG line and scatter charts."""

from __future__ import annotations

from html import escape
from typing import Sequence

WIDTH, HEIGHT = 480, 320
MARGIN = 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _bounds(values: Sequence[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


class _Frame:
    def __init__(self, xs, ys, title, xlabel, ylabel, square: bool = False):
        self.x0, self.x1 = _bounds(xs)
        self.y0, self.y1 = _bounds(ys)
        if square:
            self.x0 = self.y0 = min(self.x0, self.y0)
            self.x1 = self.y1 = max(self.x1, self.y1)
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
            f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
            f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
        ]
        for v, anchor in ((self.x0, "start"), (self.x1, "end")):
            self.parts.append(
                f'<text x="{_fmt(self.px(v))}" y="{HEIGHT - MARGIN + 14}" text-anchor="{anchor}" font-size="10">{v:.3g}</text>'
            )
        for v in (self.y0, self.y1):
            self.parts.append(f'<text x="{MARGIN - 4}" y="{_fmt(self.py(v) + 4)}" text-anchor="end" font-size="10">{v:.3g}</text>')

    def px(self, x: float) -> float:
        return MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2 * MARGIN)

    def py(self, y: float) -> float:
        return HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2 * MARGIN)

    def legend(self, i: int, name: str, color: str) -> None:
        y = MARGIN + 14 * i
        self.parts.append(f'<rect x="{WIDTH - MARGIN - 90}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
        self.parts.append(f'<text x="{WIDTH - MARGIN - 76}" y="{y + 1}" font-size="10">{escape(name)}</text>')

    def done(self) -> str:
        return "\n".join(self.parts + ["</svg>", ""])


def line_chart(series: dict[str, Sequence[tuple[float, float]]], title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    if not xs:
        raise ValueError("nothing to plot")
    fr = _Frame(xs, ys, title, xlabel, ylabel)
    for i, (name, pts) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{_fmt(fr.px(x))},{_fmt(fr.py(y))}" for x, y in pts)
        fr.parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            fr.parts.append(f'<circle cx="{_fmt(fr.px(x))}" cy="{_fmt(fr.py(y))}" r="3" fill="{color}"/>')
        fr.legend(i, name, color)
    return fr.done()


def scatter_chart(
    points: Sequence[tuple[float, float]],
    labels: Sequence[str] | None = None,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    diagonal: bool = True,
) -> str:
    if not points:
        raise ValueError("nothing to plot")
    fr = _Frame([p[0] for p in points], [p[1] for p in points], title, xlabel, ylabel, square=diagonal)
    if diagonal:
        fr.parts.append(
            f'<line x1="{_fmt(fr.px(fr.x0))}" y1="{_fmt(fr.py(fr.y0))}" x2="{_fmt(fr.px(fr.x1))}" y2="{_fmt(fr.py(fr.y1))}" '
            'stroke="#999" stroke-dasharray="4 3"/>'
        )
    for i, (x, y) in enumerate(points):
        fr.parts.append(f'<circle cx="{_fmt(fr.px(x))}" cy="{_fmt(fr.py(y))}" r="4" fill="{COLORS[0]}"/>')
        if labels:
            fr.parts.append(f'<text x="{_fmt(fr.px(x) + 6)}" y="{_fmt(fr.py(y) - 6)}" font-size="9">{escape(labels[i])}</text>')
    return fr.done()
