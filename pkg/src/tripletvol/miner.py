"""Pairwise distances and multi-similarity pair mining.

Similarity is taken as negative Euclidean distance between L2-normalised
embeddings. For each anchor ``a`` with at least one same-class and one
other-class partner:

* negative ``(a, n)`` is kept iff ``d(a, n) < max_p d(a, p) + eps``
* positive ``(a, p)`` is kept iff ``d(a, p) > min_n d(a, n) - eps``

i.e. negatives closer than the hardest positive (within ``eps``) and
positives farther than the hardest negative (within ``eps``). All pairs
meeting the rule are returned; there is no top-k truncation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, _result


def pairwise_distances(e: Tensor) -> Tensor:
    """Euclidean distance matrix ``[n, n]`` between the rows of ``e``.

    Where a distance is exactly zero (the diagonal, duplicate rows) the
    gradient is taken as zero instead of dividing by zero.
    """
    if e.ndim != 2:
        raise ShapeError(f"pairwise_distances expects [n, d], got {e.shape}")
    if e.shape[0] < 2:
        raise ContractError("pairwise_distances needs a batch of at least 2 embeddings")
    diff = e.data[:, None, :] - e.data[None, :, :]
    dist = np.sqrt(np.maximum(np.einsum("ijk,ijk->ij", diff, diff), 0.0))

    def grad_fn(g):
        safe = np.where(dist > 0, dist, 1.0)
        w = np.where(dist > 0, g / safe, 0.0)
        w = w + w.T
        return (np.einsum("ij,ijk->ik", w, diff),)

    return _result(dist, (e,), grad_fn, "pairwise_distances")


@dataclass
class DistanceMatrix:
    d: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        n = len(self.labels)
        if self.d.shape != (n, n):
            raise ShapeError(f"distance matrix {self.d.shape} does not match {n} labels")

    @classmethod
    def from_embeddings(cls, e, labels) -> "DistanceMatrix":
        t = e if isinstance(e, Tensor) else Tensor(np.asarray(e, dtype=np.float64))
        return cls(pairwise_distances(t).data, labels)


@dataclass(frozen=True)
class MinerConfig:
    epsilon: float = 0.1

    def __post_init__(self):
        if self.epsilon < 0:
            raise ContractError("miner epsilon must be non-negative")


@dataclass
class PairSet:
    positives: np.ndarray  # [k, 2] (anchor, positive)
    negatives: np.ndarray  # [k, 2] (anchor, negative)

    def as_sets(self) -> tuple[set[tuple[int, int]], set[tuple[int, int]]]:
        return ({tuple(map(int, p)) for p in self.positives}, {tuple(map(int, p)) for p in self.negatives})

    def __len__(self) -> int:
        return len(self.positives) + len(self.negatives)


def mine_pairs(dm: DistanceMatrix, cfg: MinerConfig = MinerConfig()) -> PairSet:
    d, labels = dm.d, dm.labels
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)

    hardest_pos = np.where(pos_mask, d, -np.inf).max(axis=1, keepdims=True)
    hardest_neg = np.where(neg_mask, d, np.inf).min(axis=1, keepdims=True)
    keep_neg = neg_mask & (d < hardest_pos + cfg.epsilon) & valid[:, None]
    keep_pos = pos_mask & (d > hardest_neg - cfg.epsilon) & valid[:, None]
    return PairSet(np.argwhere(keep_pos).astype(np.int64), np.argwhere(keep_neg).astype(np.int64))


def pairs_to_triplets(ps: PairSet) -> np.ndarray:
    """Every ``(a, p, n)`` whose positive and negative pairs share anchor ``a``."""
    if len(ps.positives) == 0 or len(ps.negatives) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    negs_by_anchor: dict[int, list[int]] = {}
    for a, k in ps.negatives:
        negs_by_anchor.setdefault(int(a), []).append(int(k))
    triplets = {
        (int(a), int(p), k)
        for a, p in ps.positives
        for k in negs_by_anchor.get(int(a), ())
    }
    if not triplets:
        return np.zeros((0, 3), dtype=np.int64)
    return np.array(sorted(triplets), dtype=np.int64)
