"""Triplet margin loss (with optional anchor/positive swap) and binary cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError
from .miner import pairwise_distances
from .tensor import Tensor, clip, log, minimum, relu, take, tsum

MEAN_OVER_ACTIVE = "mean-over-active"
MEAN_OVER_ALL = "mean-over-all"


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 0.2
    swap: bool = True
    reduction: str = MEAN_OVER_ACTIVE

    def __post_init__(self):
        if self.margin < 0:
            raise ContractError("triplet margin must be non-negative")
        if self.reduction not in (MEAN_OVER_ACTIVE, MEAN_OVER_ALL):
            raise ContractError(f"unknown reduction {self.reduction!r}")


def triplet_hinge(distances: Tensor, triplets: np.ndarray, cfg: TripletLossConfig) -> Tensor:
    """Per-triplet ``max(0, d(a,p) - d'(a,n) + margin)`` from a distance matrix."""
    a, p, n = triplets[:, 0], triplets[:, 1], triplets[:, 2]
    d_ap = take(distances, (a, p))
    d_an = take(distances, (a, n))
    if cfg.swap:
        d_an = minimum(d_an, take(distances, (p, n)))
    return relu(d_ap - d_an + cfg.margin)


def triplet_margin_loss(
    e: Tensor,
    triplets: np.ndarray,
    cfg: TripletLossConfig = TripletLossConfig(),
    distances: Optional[Tensor] = None,
) -> Tensor:
    """Reduce the triplet hinge over ``triplets`` drawn from embeddings ``e``.

    ``distances`` may be passed when the caller already built the pairwise
    matrix from ``e`` (it must come from the same graph). An empty triplet
    set yields a constant zero.
    """
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if len(triplets) == 0:
        return Tensor(np.zeros((), dtype=e.dtype))
    if distances is None:
        distances = pairwise_distances(e)
    hinge = triplet_hinge(distances, triplets, cfg)
    if cfg.reduction == MEAN_OVER_ACTIVE:
        count = max(int(np.count_nonzero(hinge.data > 0)), 1)
    else:
        count = len(triplets)
    return tsum(hinge) * (1.0 / count)


def binary_cross_entropy(p_hat: Tensor, y, eps: float = 1e-7) -> Tensor:
    """Mean negative log-likelihood of labels ``y`` under probabilities ``p_hat``."""
    p = clip(p_hat.reshape(-1), eps, 1.0 - eps)
    t = np.asarray(y, dtype=p.dtype).reshape(-1)
    if t.shape != p.shape:
        raise ContractError(f"{len(t)} labels for {p.size} predictions")
    ll = log(p) * t + log(1.0 - p) * (1.0 - t)
    return tsum(ll) * (-1.0 / len(t))
