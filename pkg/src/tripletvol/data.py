"""Dataset manifests and a lazily loading, byte-budgeted volume cache."""

from __future__ import annotations

import json
import logging
import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DataError, FormatError
from .volume import Volume, read_vvol

logger = logging.getLogger(__name__)

LABEL_NORMAL = 0
LABEL_MTBI = 1


@dataclass
class ManifestEntry:
    path: str
    label: int
    subject: str
    fold: int = 0
    lesion_box: Optional[list[int]] = None

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "label": self.label,
            "subject": self.subject,
            "fold": self.fold,
            "lesion_box": self.lesion_box,
        }


@dataclass
class DatasetManifest:
    """Labelled volume list with a fold index per entry.

    ``root`` is the directory relative paths are resolved against; it is not
    serialised.
    """

    k_folds: int
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.k_folds < 1:
            raise DataError(f"k_folds must be positive, got {self.k_folds}")
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise DataError("manifest paths are not unique")
        for e in self.entries:
            if e.label not in (LABEL_NORMAL, LABEL_MTBI):
                raise DataError(f"{e.path}: label must be 0 or 1, got {e.label}")
            if not 0 <= e.fold < self.k_folds:
                raise DataError(f"{e.path}: fold {e.fold} outside [0, {self.k_folds})")
        labels = {e.label for e in self.entries}
        if labels != {LABEL_NORMAL, LABEL_MTBI}:
            raise DataError("manifest needs at least one entry of each class")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def resolve(self, i: int) -> Path:
        p = Path(self.entries[i].path)
        return p if p.is_absolute() else self.root / p

    def indices_in_folds(self, folds: Sequence[int]) -> list[int]:
        wanted = set(folds)
        return [i for i, e in enumerate(self.entries) if e.fold in wanted]

    def to_json(self) -> dict:
        return {"k_folds": self.k_folds, "entries": [e.to_json() for e in self.entries]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict) or "entries" not in doc or "k_folds" not in doc:
            raise FormatError(f"{path}: manifest needs 'k_folds' and 'entries'")
        entries = []
        for raw in doc["entries"]:
            try:
                entries.append(
                    ManifestEntry(
                        path=str(raw["path"]),
                        label=int(raw["label"]),
                        subject=str(raw["subject"]),
                        fold=int(raw["fold"]),
                        lesion_box=raw.get("lesion_box"),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}: malformed entry {raw!r}") from exc
        return cls(int(doc["k_folds"]), entries, root=path.parent)


class VolumeDataset:
    """Reads manifest volumes on demand, optionally preprocessing each one.

    Decoded arrays are kept in an LRU cache bounded by ``cache_bytes``.
    ``workers > 1`` loads a batch on a thread pool; results come back in
    request order, so batches are identical to synchronous loading.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        transform: Optional[Callable[[Volume], Volume]] = None,
        cache_bytes: int = 512 * 2**20,
        workers: int = 1,
    ):
        self.manifest = manifest
        self.transform = transform
        self.cache_bytes = cache_bytes
        self.workers = max(1, workers)
        self._cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self._cached_bytes = 0

    def __len__(self) -> int:
        return len(self.manifest)

    def label(self, i: int) -> int:
        return self.manifest.entries[i].label

    def volume(self, i: int) -> Volume:
        v = read_vvol(self.manifest.resolve(i))
        return self.transform(v) if self.transform is not None else v

    def load(self, i: int) -> np.ndarray:
        hit = self._cache.get(i)
        if hit is not None:
            self._cache.move_to_end(i)
            return hit
        arr = np.ascontiguousarray(self.volume(i).voxels, dtype=np.float32)
        self._remember(i, arr)
        return arr

    def _remember(self, i: int, arr: np.ndarray) -> None:
        if arr.nbytes > self.cache_bytes:
            return
        self._cache[i] = arr
        self._cached_bytes += arr.nbytes
        while self._cached_bytes > self.cache_bytes:
            _, old = self._cache.popitem(last=False)
            self._cached_bytes -= old.nbytes

    def batch(self, indices: Sequence[int]) -> np.ndarray:
        """Stack volumes into a ``[b, 1, X, Y, Z]`` float32 array."""
        indices = list(indices)
        if self.workers > 1:
            missing = [i for i in dict.fromkeys(indices) if i not in self._cache]
            with ThreadPoolExecutor(self.workers) as pool:
                for i, v in zip(missing, pool.map(self.volume, missing)):
                    self._remember(i, np.ascontiguousarray(v.voxels, dtype=np.float32))
        arrays = [self.load(i) for i in indices]
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise DataError(f"volumes in a batch disagree on dims: {sorted(shapes)}")
        return np.stack(arrays)[:, None]


def default_workers() -> int:
    return min(4, os.cpu_count() or 1)
