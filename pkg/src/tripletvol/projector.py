"""Exact t-SNE for embedding visualisation, with SVG and CSV writers."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import ContractError, NumericError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    n_iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum_initial: float = 0.5
    momentum_final: float = 0.8
    momentum_switch: int = 250
    entropy_tol: float = 1e-5
    max_bisection: int = 50
    seed: int = 7

    def validate(self, n: int) -> None:
        if self.n_iterations < 1:
            raise ContractError("t-SNE needs at least one iteration")
        if not 1.0 < self.perplexity < (n - 1) / 3.0:
            raise ContractError(f"perplexity {self.perplexity} must lie in (1, {(n - 1) / 3.0:.2f}) for n={n}")

    def to_json(self) -> dict:
        return asdict(self)


def _sq_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_affinities(
    x: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 50
) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic Gaussian affinities with per-point precision matched to ``perplexity``.

    Bisection runs on log-precision until the row entropy (nats) is within
    ``tol`` of ``log(perplexity)``. Returns ``(P_cond, beta)``.
    """
    d = _sq_distances(np.asarray(x, dtype=np.float64))
    n = d.shape[0]
    target = math.log(perplexity)
    P = np.zeros((n, n))
    betas = np.zeros(n)
    for i in range(n):
        di = np.delete(d[i], i)
        di = di - di.min()
        if not di.any():
            # equidistant neighbours: every bandwidth gives the uniform row
            P[i] = np.insert(np.full(n - 1, 1.0 / (n - 1)), i, 0.0)
            betas[i] = 1.0
            continue
        scale = di.mean()
        lo, hi = -60.0, 60.0  # bracket on log(beta * scale)
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            beta = math.exp(mid) / scale
            w = np.exp(-di * beta)
            sw = w.sum()
            p = w / sw
            h = math.log(sw) + beta * float(np.dot(p, di))
            if abs(h - target) < tol:
                break
            if h > target:
                lo = mid
            else:
                hi = mid
        else:
            raise NumericError(f"perplexity bisection failed to converge for point {i}")
        row = np.insert(p, i, 0.0)
        P[i] = row
        betas[i] = beta
    return P, betas


def joint_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 50) -> np.ndarray:
    """Symmetrised, normalised ``P`` (zero diagonal, sums to one)."""
    cond, _ = conditional_affinities(x, perplexity, tol, max_iter)
    P = cond + cond.T
    return P / P.sum()


def row_perplexity(P_cond: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.nansum(np.where(P_cond > 0, P_cond * np.log(P_cond), 0.0), axis=1)
    return np.exp(h)


def _dedupe(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    _, first, counts = np.unique(np.round(x, 12), axis=0, return_index=True, return_counts=True)
    if counts.max() > 1:
        logger.info("t-SNE: jittering %d duplicate rows by 1e-9", int((counts - 1).sum()))
        return x + rng.normal(0.0, 1e-9, x.shape)
    return x


def kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def tsne_embed(x, cfg: TsneConfig = TsneConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Project rows of ``x`` to 2D. Returns ``(coords [n, 2], kl_trace [n_iterations])``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 8:
        raise ContractError("t-SNE needs at least 8 points")
    cfg.validate(n)
    rng = np.random.default_rng(cfg.seed)
    x = _dedupe(x, rng)
    P = joint_affinities(x, cfg.perplexity, cfg.entropy_tol, cfg.max_bisection)
    P = np.maximum(P, 1e-12 * (1 - np.eye(n)))

    y = rng.normal(0.0, 1e-4, (n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    trace = np.empty(cfg.n_iterations)
    for it in range(cfg.n_iterations):
        exaggeration = cfg.early_exaggeration if it < cfg.exaggeration_iters else 1.0
        momentum = cfg.momentum_initial if it < cfg.momentum_switch else cfg.momentum_final
        num = 1.0 / (1.0 + _sq_distances(y))
        np.fill_diagonal(num, 0.0)
        Q = num / num.sum()
        W = (exaggeration * P - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ y
        trace[it] = kl_divergence(P, Q)

        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - cfg.learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    if not np.all(np.isfinite(y)):
        raise NumericError("t-SNE produced non-finite coordinates")
    return y, trace


# ----------------------------------------------------------------------
# output


def write_coords_csv(path, coords: np.ndarray, labels: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y", "label"])
        for i, ((cx, cy), lab) in enumerate(zip(coords, labels)):
            w.writerow([i, repr(float(cx)), repr(float(cy)), int(lab)])


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"]


def scatter_svg(
    coords: np.ndarray,
    labels: Sequence[int],
    path,
    label_names: Optional[dict] = None,
    title: str = "",
    size: int = 480,
) -> None:
    """Standalone SVG scatter, one circle per point, coloured by label."""
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise ContractError("scatter_svg needs finite coordinates")
    labels = [int(v) for v in labels]
    names = label_names or {0: "normal", 1: "mTBI"}
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    lo = lo - 0.05 * span
    span = span * 1.1
    margin, legend_w = 20, 110
    plot = size - 2 * margin

    def px(c):
        return margin + (c[0] - lo[0]) / span[0] * plot, margin + plot - (c[1] - lo[1]) / span[1] * plot

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + legend_w}" height="{size}" '
        f'viewBox="0 0 {size + legend_w} {size}">',
        f'<rect x="{margin}" y="{margin}" width="{plot}" height="{plot}" fill="white" stroke="#444"/>',
    ]
    if title:
        out.append(f'<text x="{margin}" y="{margin - 6}" font-size="12">{escape(title)}</text>')
    classes = sorted(set(labels))
    colour = {c: _PALETTE[i % len(_PALETTE)] for i, c in enumerate(classes)}
    for c, lab in zip(coords, labels):
        x, y = px(c)
        out.append(f'<circle class="marker" cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{colour[lab]}" fill-opacity="0.8"/>')
    for i, c in enumerate(classes):
        y = margin + 14 + 18 * i
        out.append(
            f'<g class="legend"><circle cx="{size + 8}" cy="{y - 4}" r="5" fill="{colour[c]}"/>'
            f'<text x="{size + 18}" y="{y}" font-size="12">{escape(str(names.get(c, c)))}</text></g>'
        )
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
