"""m-per-class batch construction for two-class metric learning.

Each batch is a concatenation of groups; every group holds ``m`` class-0
indices followed by ``m`` class-1 indices. Within a class, indices come from
a shuffled pool drawn without replacement; the pool is reshuffled once every
index has been used, so over many draws each index appears either
``floor(draws / N)`` or ``ceil(draws / N)`` times.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError

Batch = list[tuple[int, int]]


@dataclass
class SamplerConfig:
    m: int = 4
    batch_size: int = 32
    class_indices: Mapping[int, Sequence[int]] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError("m must be at least 1")
        n_classes = len(self.class_indices)
        if n_classes != 2:
            raise ConfigError(f"sampler balances exactly two classes, got {n_classes}")
        for label, idx in self.class_indices.items():
            if len(idx) == 0:
                raise ConfigError(f"class {label} has no samples")
        if self.batch_size % (self.m * n_classes) != 0:
            raise ConfigError(f"batch_size {self.batch_size} is not a multiple of m * n_classes = {self.m * n_classes}")

    @classmethod
    def from_labels(cls, indices: Sequence[int], labels: Sequence[int], m: int = 4, batch_size: int = 32, seed: int = 0):
        classes: dict[int, list[int]] = {0: [], 1: []}
        for i, y in zip(indices, labels):
            classes.setdefault(int(y), []).append(int(i))
        return cls(m=m, batch_size=batch_size, class_indices=classes, seed=seed)


class _Pool:
    def __init__(self, indices: Sequence[int], rng: np.random.Generator):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.rng = rng
        self.order = self.rng.permutation(self.indices)
        self.pos = 0

    def draw(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if self.pos == len(self.order):
                self.order = self.rng.permutation(self.indices)
                self.pos = 0
            take = min(k - len(out), len(self.order) - self.pos)
            out.extend(int(i) for i in self.order[self.pos : self.pos + take])
            self.pos += take
        return out


class MPerClassSampler:
    """Stateful batch source; call :meth:`epoch` once per training epoch."""

    def __init__(self, cfg: SamplerConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.labels = sorted(cfg.class_indices)
        self.pools = {y: _Pool(cfg.class_indices[y], rng) for y in self.labels}
        self._plan: list[Batch] = []
        self._cursor = 0

    def _batch(self) -> Batch:
        m = self.cfg.m
        batch: Batch = []
        for _ in range(self.cfg.batch_size // (m * len(self.labels))):
            for y in self.labels:
                batch.extend((i, y) for i in self.pools[y].draw(m))
        return batch

    def epoch(self, n_batches: int) -> list[Batch]:
        """Plan the next ``n_batches`` full batches and make them current."""
        self._plan = [self._batch() for _ in range(n_batches)]
        self._cursor = 0
        return self._plan

    def next_batch(self) -> Batch:
        """Return the next planned batch; ``StopIteration`` marks end of epoch."""
        if self._cursor >= len(self._plan):
            raise StopIteration
        batch = self._plan[self._cursor]
        self._cursor += 1
        return batch

    def __iter__(self) -> Iterator[Batch]:
        while True:
            try:
                yield self.next_batch()
            except StopIteration:
                return


def epoch_plan(cfg: SamplerConfig, n_batches: int) -> list[Batch]:
    """One epoch of batches from a freshly seeded sampler."""
    return MPerClassSampler(cfg).epoch(n_batches)


def batches_per_epoch(n_samples: int, batch_size: int) -> int:
    """Full batches only; the trailing partial batch is never emitted."""
    return max(1, n_samples // batch_size)
