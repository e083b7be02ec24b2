"""Dependency-free SVG line and bar charts with byte-stable output."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=50)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.2e}"
    return f"{v:.3g}"


class _Frame:
    def __init__(self, xs: Sequence[float], ys: Sequence[float], log_x: bool):
        self.log_x = log_x
        tx = [math.log10(x) for x in xs] if log_x else list(xs)
        self.x0, self.x1 = min(tx), max(tx)
        self.y0, self.y1 = min(ys), max(ys)
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            pad = abs(self.y0) * 0.05 or 1.0
            self.y0, self.y1 = self.y0 - pad, self.y1 + pad
        self.pw = WIDTH - MARGIN["left"] - MARGIN["right"]
        self.ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(self, x: float) -> float:
        t = math.log10(x) if self.log_x else x
        return MARGIN["left"] + (t - self.x0) / (self.x1 - self.x0) * self.pw

    def py(self, y: float) -> float:
        return MARGIN["top"] + (1.0 - (y - self.y0) / (self.y1 - self.y0)) * self.ph


def _axes(frame: _Frame, title: str, xlabel: str, ylabel: str) -> list[str]:
    left, top = MARGIN["left"], MARGIN["top"]
    bottom = top + frame.ph
    out = [
        f'<rect x="{left}" y="{top}" width="{frame.pw}" height="{frame.ph}" fill="none" stroke="#000"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{left + frame.pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="16" y="{top + frame.ph / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {top + frame.ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for i in range(5):
        yv = frame.y0 + (frame.y1 - frame.y0) * i / 4
        y = frame.py(yv)
        out.append(f'<line x1="{left - 4}" y1="{_fmt(y)}" x2="{left}" y2="{_fmt(y)}" stroke="#000"/>')
        out.append(
            f'<text x="{left - 6}" y="{_fmt(y + 4)}" text-anchor="end" font-size="10">{_tick(yv)}</text>'
        )
        tv = frame.x0 + (frame.x1 - frame.x0) * i / 4
        xv = 10**tv if frame.log_x else tv
        x = frame.px(xv)
        out.append(f'<line x1="{_fmt(x)}" y1="{bottom}" x2="{_fmt(x)}" y2="{bottom + 4}" stroke="#000"/>')
        out.append(
            f'<text x="{_fmt(x)}" y="{bottom + 16}" text-anchor="middle" font-size="10">{_tick(xv)}</text>'
        )
    return out


def _legend(names: Sequence[str]) -> list[str]:
    x = WIDTH - MARGIN["right"] + 12
    out = []
    for i, name in enumerate(names):
        y = MARGIN["top"] + 14 + 16 * i
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<line x1="{x}" y1="{y - 4}" x2="{x + 18}" y2="{y - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x + 22}" y="{y}" font-size="11">{escape(name)}</text>')
    return out


def _document(body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">'
    )
    return "\n".join([head, f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#fff"/>', *body, "</svg>"]) + "\n"


def line_chart(
    series: dict[str, Sequence[tuple[float, float]]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    log_x: bool = False,
) -> str:
    """One polyline per series, in insertion order."""
    points = [p for pts in series.values() for p in pts]
    if not points:
        return _document(_axes(_Frame([0, 1], [0, 1], False), title, xlabel, ylabel))
    frame = _Frame([p[0] for p in points], [p[1] for p in points], log_x)
    body = _axes(frame, title, xlabel, ylabel)
    for i, (name, pts) in enumerate(series.items()):
        coords = " ".join(f"{_fmt(frame.px(x))},{_fmt(frame.py(y))}" for x, y in pts)
        body.append(
            f'<polyline fill="none" stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="1.5" points="{coords}"/>'
        )
    body.extend(_legend(list(series)))
    return _document(body)


def bar_chart(values: dict[str, float], title: str = "", ylabel: str = "") -> str:
    names = list(values)
    top = max([v for v in values.values()] + [1e-12])
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    frame = _Frame([0, 1], [0.0, top], False)
    body = [
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="16" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    slot = pw / max(len(names), 1)
    for i, name in enumerate(names):
        v = values[name]
        x = MARGIN["left"] + slot * i + slot * 0.15
        y = frame.py(v)
        body.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(slot * 0.7)}" '
            f'height="{_fmt(MARGIN["top"] + ph - y)}" fill="{PALETTE[i % len(PALETTE)]}"/>'
        )
        body.append(
            f'<text x="{_fmt(x + slot * 0.35)}" y="{HEIGHT - MARGIN["bottom"] + 16}" '
            f'text-anchor="middle" font-size="11">{escape(name)}</text>'
        )
        body.append(
            f'<text x="{_fmt(x + slot * 0.35)}" y="{_fmt(y - 4)}" text-anchor="middle" font-size="10">{v:.3f}</text>'
        )
    return _document(body)
