"""Dependency-free SVG figures."""

from __future__ import annotations

import math
from collections import defaultdict
from xml.sax.saxutils import escape

import numpy as np

from .metrics import pca_2d, summarize

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#17becf", "#7f7f7f", "#bcbd22")
PLOT_KINDS = ("loss-vs-shots", "loss-vs-hardness", "pca-task")

W, H = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 30, 55


def _num(v):
    return f"{v:.2f}"


class _Canvas:
    def __init__(self, xs, ys, title, xlabel, ylabel):
        self.x0, self.x1 = _padded(xs)
        self.y0, self.y1 = _padded(ys)
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}">',
            f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        ]
        self._axes(xlabel, ylabel)

    def px(self, x):
        return LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)

    def py(self, y):
        return H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)

    def _axes(self, xlabel, ylabel):
        bx, by = LEFT, H - BOTTOM
        self.parts.append(f'<g class="axes" stroke="black" fill="none">'
                          f'<line x1="{bx}" y1="{by}" x2="{W - RIGHT}" y2="{by}"/>'
                          f'<line x1="{bx}" y1="{by}" x2="{bx}" y2="{TOP}"/></g>')
        for t in np.linspace(self.x0, self.x1, 5):
            self.parts.append(f'<text x="{_num(self.px(t))}" y="{by + 16}" text-anchor="middle" '
                              f'font-size="10">{t:.3g}</text>')
        for t in np.linspace(self.y0, self.y1, 5):
            self.parts.append(f'<text x="{bx - 6}" y="{_num(self.py(t) + 3)}" text-anchor="end" '
                              f'font-size="10">{t:.3g}</text>')
        self.parts.append(f'<text x="{(LEFT + W - RIGHT) / 2:.1f}" y="{H - 15}" text-anchor="middle" '
                          f'font-size="12">{escape(xlabel)}</text>')
        self.parts.append(f'<text x="16" y="{(TOP + H - BOTTOM) / 2:.1f}" text-anchor="middle" '
                          f'font-size="12" transform="rotate(-90 16 {(TOP + H - BOTTOM) / 2:.1f})">'
                          f'{escape(ylabel)}</text>')

    def legend(self, entries):
        self.parts.append('<g class="legend">')
        for i, (label, color) in enumerate(entries):
            y = TOP + 10 + 18 * i
            self.parts.append(f'<rect x="{W - RIGHT + 15}" y="{y - 8}" width="12" height="12" '
                              f'fill="{color}" data-series="{escape(label)}"/>'
                              f'<text x="{W - RIGHT + 32}" y="{y + 2}" font-size="11">{escape(label)}</text>')
        self.parts.append("</g>")

    def render(self):
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _padded(vals):
    vals = [v for v in vals if math.isfinite(v)]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _series_key(row):
    return row.get("arm") or f"{row['learner']} lambda={row['lambda']:g}"


def _group(rows):
    groups = defaultdict(list)
    for r in rows:
        if math.isfinite(r["loss"]):
            groups[_series_key(r)].append(r)
    if not groups:
        raise ValueError("no finite rows to plot")
    return dict(groups)


def loss_vs_shots_svg(rows) -> str:
    """Per-series mean query loss against shots with shaded 95% CI bands."""
    groups = _group(rows)
    stats = {}
    for name, rs in groups.items():
        by_k = defaultdict(list)
        for r in rs:
            by_k[r["shots"]].append(r["loss"])
        pts = []
        for k in sorted(by_k):
            v = by_k[k]
            ci = summarize(v).ci if len(v) > 1 else 0.0
            pts.append((k, float(np.mean(v)), ci))
        stats[name] = pts
    xs = [p[0] for pts in stats.values() for p in pts]
    ys = [p[1] + s * p[2] for pts in stats.values() for p in pts for s in (-1, 1)]
    c = _Canvas(xs, ys, "query loss across shots", "shots", "query CE loss")
    entries = []
    for i, (name, pts) in enumerate(stats.items()):
        color = PALETTE[i % len(PALETTE)]
        entries.append((name, color))
        upper = [f"{_num(c.px(k))},{_num(c.py(m + ci))}" for k, m, ci in pts]
        lower = [f"{_num(c.px(k))},{_num(c.py(m - ci))}" for k, m, ci in reversed(pts)]
        c.parts.append(f'<polygon class="band" points="{" ".join(upper + lower)}" fill="{color}" '
                       f'fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{_num(c.px(k))},{_num(c.py(m))}" for k, m, _ in pts)
        c.parts.append(f'<polyline class="mean" points="{line}" fill="none" stroke="{color}" '
                       f'stroke-width="2"/>')
        for k, m, _ in pts:
            c.parts.append(f'<circle class="marker" cx="{_num(c.px(k))}" cy="{_num(c.py(m))}" r="3" '
                           f'fill="{color}"/>')
    c.legend(entries)
    return c.render()


def loss_vs_hardness_svg(rows) -> str:
    groups = _group(rows)
    xs = [r["hardness"] for rs in groups.values() for r in rs]
    ys = [r["loss"] for rs in groups.values() for r in rs]
    c = _Canvas(xs, ys, "query loss against task hardness", "hardness", "query CE loss")
    entries = []
    for i, (name, rs) in enumerate(groups.items()):
        color = PALETTE[i % len(PALETTE)]
        entries.append((name, color))
        for r in rs:
            c.parts.append(f'<circle class="marker" cx="{_num(c.px(r["hardness"]))}" '
                           f'cy="{_num(c.py(r["loss"]))}" r="2.5" fill="{color}" fill-opacity="0.7"/>')
    c.legend(entries)
    return c.render()


def pca_task_svg(episode, classifier, grid: int = 40) -> str:
    """Support (squares), queries (dots), classifier rows (crosses) and
    nearest-classifier regions, all in the top-2 PCA plane of the episode."""
    pts = np.vstack([episode.support_x, episode.query_x, classifier.rows])
    pca = pca_2d(pts)
    ns, nq = len(episode.support_x), len(episode.query_x)
    proj = pca.projections
    sup, qry, cls = proj[:ns], proj[ns:ns + nq], proj[ns + nq:]
    c = _Canvas(proj[:, 0], proj[:, 1], f"{classifier.learner} classifier, PCA of one task", "PC1", "PC2")
    colors = [PALETTE[j % len(PALETTE)] for j in range(episode.n_way)]
    # regions: lift grid points back into feature space and classify there
    gx = np.linspace(c.x0, c.x1, grid + 1)
    gy = np.linspace(c.y0, c.y1, grid + 1)
    cx, cy = (gx[:-1] + gx[1:]) / 2, (gy[:-1] + gy[1:]) / 2
    plane = np.array([[a, b] for b in cy for a in cx])
    lifted = pca.mean + plane @ pca.components
    if classifier.kind == "cosine":
        lifted[np.linalg.norm(lifted, axis=1) == 0] += 1e-9
    labels = classifier.predict(lifted).reshape(grid, grid)
    cw = abs(c.px(gx[1]) - c.px(gx[0]))
    ch = abs(c.py(gy[1]) - c.py(gy[0]))
    c.parts.append('<g class="regions">')
    for iy in range(grid):
        for ix in range(grid):
            c.parts.append(f'<rect class="region" x="{_num(c.px(gx[ix]))}" y="{_num(c.py(gy[iy + 1]))}" '
                           f'width="{_num(cw)}" height="{_num(ch)}" fill="{colors[labels[iy, ix]]}" '
                           f'fill-opacity="0.15" stroke="none"/>')
    c.parts.append("</g>")
    for (a, b), y in zip(qry, episode.query_y):
        c.parts.append(f'<circle class="query" cx="{_num(c.px(a))}" cy="{_num(c.py(b))}" r="2" '
                       f'fill="{colors[y]}"/>')
    for (a, b), y in zip(sup, episode.support_y):
        c.parts.append(f'<rect class="support" x="{_num(c.px(a) - 4)}" y="{_num(c.py(b) - 4)}" '
                       f'width="8" height="8" fill="{colors[y]}" stroke="black"/>')
    for j, (a, b) in enumerate(cls):
        x, y = c.px(a), c.py(b)
        c.parts.append(f'<path class="classifier" d="M{_num(x - 5)},{_num(y - 5)}L{_num(x + 5)},{_num(y + 5)}'
                       f'M{_num(x - 5)},{_num(y + 5)}L{_num(x + 5)},{_num(y - 5)}" stroke="{colors[j]}" '
                       f'stroke-width="2.5"/>')
    c.legend([(name, colors[j]) for j, name in enumerate(episode.classes[:len(PALETTE)])])
    return c.render()


def plot_results(rows, kind: str) -> str:
    if kind == "loss-vs-shots":
        return loss_vs_shots_svg(rows)
    if kind == "loss-vs-hardness":
        return loss_vs_hardness_svg(rows)
    raise ValueError(f"unknown plot kind {kind!r}; results plots are loss-vs-shots, loss-vs-hardness")
