"""Embedding diagnostics: nearest-centroid probe, power-iteration PCA, SVG plots."""
from __future__ import annotations

from html import escape

import numpy as np
from scipy.stats import spearmanr

from .ndgrad import Rng

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


def centroids(emb: np.ndarray, labels: np.ndarray, classes) -> np.ndarray:
    return np.stack([emb[labels == c].mean(axis=0) for c in classes])


def nearest_centroid_accuracy(train_emb, train_labels, test_emb, test_labels) -> float:
    classes = np.unique(train_labels)
    cents = centroids(np.asarray(train_emb), np.asarray(train_labels), classes)
    d = ((np.asarray(test_emb)[:, None, :] - cents[None]) ** 2).sum(-1)
    return float(np.mean(classes[np.argmin(d, axis=1)] == np.asarray(test_labels)))


def triplet_satisfaction(emb_mean, pos, neg, targets, opt_means) -> float:
    """Fraction of triplets with d(mu+, mu*) < d(mu-, mu*)."""
    opt = np.asarray(opt_means)[targets]
    dp = np.linalg.norm(emb_mean[pos] - opt, axis=1)
    dn = np.linalg.norm(emb_mean[neg] - opt, axis=1)
    return float(np.mean(dp < dn))


def spearman(x, y) -> float:
    rho = spearmanr(x, y).statistic
    return 0.0 if np.isnan(rho) else float(rho)


def power_iteration(cov: np.ndarray, n_components: int = 2, iters: int = 500, tol: float = 1e-13,
                    seed: int = 0):
    """Leading eigenpairs of a symmetric PSD matrix by deflated power iteration."""
    cov = np.array(cov, dtype=np.float64)
    n = cov.shape[0]
    rng = Rng(seed)
    vals, vecs = [], []
    for _ in range(min(n_components, n)):
        v = rng.normal(n)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            w /= norm
            if w @ v < 0:
                w = -w
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        lam = float(v @ cov @ v)
        first = np.argmax(np.abs(v))
        v = v * np.sign(v[first])
        vals.append(lam)
        vecs.append(v)
        cov = cov - lam * np.outer(v, v)
    return np.array(vals), np.stack(vecs, axis=1)


def pca_project(x: np.ndarray, n_components: int = 2, seed: int = 0):
    """Project rows of ``x`` on the top principal components; returns (coords, components, mean)."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 3:
        raise ValueError(f"need at least 3 embeddings for a projection, got {len(x)}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / len(x)
    _, comps = power_iteration(cov, n_components, iters=5000, seed=seed)
    return xc @ comps, comps, mean


def scatter_svg(points, colors, shades=None, stars=None, star_colors=None, title: str = "",
                size: int = 480) -> str:
    pts = np.asarray(points, dtype=np.float64)
    allp = pts if stars is None else np.vstack([pts, np.asarray(stars)])
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 30

    def xy(p):
        q = (np.asarray(p) - lo) / span
        return pad + q[0] * (size - 2 * pad), size - pad - q[1] * (size - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>',
           f'<text x="{size / 2:.0f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>']
    shades = np.ones(len(pts)) if shades is None else np.asarray(shades, float)
    for p, c, s in zip(pts, colors, shades):
        x, y = xy(p)
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{c}" fill-opacity="{0.15 + 0.85 * s:.3f}"/>')
    if stars is not None:
        for p, c in zip(stars, star_colors or ["black"] * len(stars)):
            x, y = xy(p)
            out.append(f'<path d="M{x:.2f},{y - 9:.2f} L{x + 3:.2f},{y - 3:.2f} L{x + 9:.2f},{y - 3:.2f} '
                       f'L{x + 4:.2f},{y + 2:.2f} L{x + 6:.2f},{y + 9:.2f} L{x:.2f},{y + 5:.2f} '
                       f'L{x - 6:.2f},{y + 9:.2f} L{x - 4:.2f},{y + 2:.2f} L{x - 9:.2f},{y - 3:.2f} '
                       f'L{x - 3:.2f},{y - 3:.2f} Z" fill="{c}" stroke="black" stroke-width="1"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def line_svg(xs, ys, title: str = "", xlabel: str = "", ylabel: str = "", size=(480, 320)) -> str:
    w, h = size
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    pad = 45
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    if x1 == x0:
        x1 = x0 + 1

    def xy(a, b):
        return pad + (a - x0) / (x1 - x0) * (w - 2 * pad), h - pad - (b - y0) / (y1 - y0) * (h - 2 * pad)

    pts = " ".join(f"{px:.2f},{py:.2f}" for px, py in (xy(a, b) for a, b in zip(xs, ys)))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
           f'<rect width="{w}" height="{h}" fill="white"/>',
           f'<text x="{w / 2:.0f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
           f'<text x="{w / 2:.0f}" y="{h - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
           f'<text x="12" y="{h / 2:.0f}" font-size="12" transform="rotate(-90 12 {h / 2:.0f})" '
           f'text-anchor="middle">{escape(ylabel)}</text>',
           f'<polyline points="{pts}" fill="none" stroke="{PALETTE[0]}" stroke-width="2"/>']
    for a, b in zip(xs, ys):
        px, py = xy(a, b)
        out.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="4" fill="{PALETTE[0]}"/>')
        out.append(f'<text x="{px:.2f}" y="{py - 8:.2f}" text-anchor="middle" font-size="10">{b:.2f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
