"""Occlusion sensitivity maps and slice renders.

A cubic occluder is slid over the volume on a stride grid. Each placement
contributes ``baseline_score - occluded_score`` to every voxel it covers, and
a voxel's importance is the mean over the placements covering it. Positive
importance means hiding the region lowers the predicted-class score.

By default the occluder is filled with the median of the volume's tissue
(voxels above zero after windowing). A background-valued cube inside the
head reads as an anomaly of its own and swamps the signal being explained.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ContractError
from .layers import Module
from .tensor import Tensor, no_grad
from .volume import Volume

ScoreFn = Callable[[np.ndarray], np.ndarray]

POSITIVE_RGB = np.array([0, 64, 255], dtype=np.float64)
NEGATIVE_RGB = np.array([255, 32, 0], dtype=np.float64)


@dataclass(frozen=True)
class OsmConfig:
    patch: int = 8
    stride: int = 4
    fill_value: Optional[float] = None  # None: tissue median of each volume
    batch: int = 16

    def validate(self, dims) -> None:
        if self.patch < 1 or self.patch > min(dims):
            raise ContractError(f"occluder edge {self.patch} must lie in [1, {min(dims)}]")
        if not 1 <= self.stride <= self.patch:
            raise ContractError(f"stride {self.stride} must lie in [1, patch={self.patch}]")


def placements(extent: int, patch: int, stride: int) -> list[int]:
    """Occluder start offsets along one axis; the last one is flush with the edge."""
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def tissue_fill(voxels: np.ndarray) -> float:
    """Median of the positive voxels, or 0 for an all-background volume."""
    tissue = voxels[voxels > 0]
    return float(np.median(tissue)) if tissue.size else 0.0


def network_scorer(network: Module) -> ScoreFn:
    """Score volumes ``[b, X, Y, Z]`` with a sigmoid-output network; returns P(mTBI)."""

    def score(volumes: np.ndarray) -> np.ndarray:
        with no_grad():
            x = Tensor(np.asarray(volumes, dtype=np.float32)[:, None])
            return network(x).data.reshape(-1).astype(np.float64)

    return score


def predicted_class_scorer(score: ScoreFn, reference: np.ndarray) -> ScoreFn:
    """Wrap a P(mTBI) scorer so it reports the probability of the class predicted on ``reference``."""
    positive = score(reference[None])[0] >= 0.5
    if positive:
        return score
    return lambda volumes: 1.0 - score(volumes)


def occlusion_map(model: ScoreFn, v, cfg: OsmConfig = OsmConfig()) -> Volume:
    """Importance volume (same dims as ``v``) for scalar scorer ``model``."""
    vol = v if isinstance(v, Volume) else Volume(np.asarray(v))
    base = vol.voxels.astype(np.float32)
    cfg.validate(base.shape)
    fill = tissue_fill(base) if cfg.fill_value is None else cfg.fill_value
    s0 = float(model(base[None])[0])
    grid = [placements(n, cfg.patch, cfg.stride) for n in base.shape]
    starts = list(itertools.product(*grid))
    deltas = np.empty(len(starts))
    for lo in range(0, len(starts), cfg.batch):
        chunk = starts[lo : lo + cfg.batch]
        occluded = np.repeat(base[None], len(chunk), axis=0)
        for j, (x, y, z) in enumerate(chunk):
            occluded[j, x : x + cfg.patch, y : y + cfg.patch, z : z + cfg.patch] = fill
        deltas[lo : lo + len(chunk)] = s0 - np.asarray(model(occluded), dtype=np.float64)

    total = np.zeros(base.shape)
    count = np.zeros(base.shape)
    for (x, y, z), delta in zip(starts, deltas):
        sl = (slice(x, x + cfg.patch), slice(y, y + cfg.patch), slice(z, z + cfg.patch))
        total[sl] += delta
        count[sl] += 1
    return Volume(total / count, vol.spacing_mm)


def box_means(importance, box) -> tuple[float, float]:
    """Mean importance inside and outside a half-open voxel box ``[x0, y0, z0, x1, y1, z1]``."""
    imp = importance.voxels if isinstance(importance, Volume) else np.asarray(importance)
    inside = np.zeros(imp.shape, dtype=bool)
    inside[box[0] : box[3], box[1] : box[4], box[2] : box[5]] = True
    if inside.all() or not inside.any():
        raise ContractError(f"box {list(box)} must split the volume {imp.shape}")
    return float(imp[inside].mean()), float(imp[~inside].mean())


# ----------------------------------------------------------------------
# rendering


def _slice(a: np.ndarray, axis: int, index: int) -> np.ndarray:
    if not 0 <= axis < 3:
        raise ContractError(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < a.shape[axis]:
        raise ContractError(f"slice index {index} outside extent {a.shape[axis]}")
    # rows follow the second remaining axis, columns the first
    return np.take(a, index, axis=axis).T


def write_pgm(path, gray: np.ndarray) -> None:
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file written by this module."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1
    magic, w, h = fields[0], int(fields[1]), int(fields[2])
    channels = {b"P5": 1, b"P6": 3}[magic]
    data = np.frombuffer(raw[pos : pos + w * h * channels], dtype=np.uint8)
    return data.reshape(h, w) if channels == 1 else data.reshape(h, w, 3)


def render_slice(importance, underlay, axis: int, index: int, path) -> np.ndarray:
    """Write a P6 composite of ``underlay`` with a signed importance overlay.

    The grayscale underlay alone is written next to it with a ``.pgm``
    suffix. Overlay opacity is ``|importance| / max|importance|`` over the
    whole volume; positive importance is drawn blue, negative red. Returns
    the composite RGB array.
    """
    imp = importance.voxels if isinstance(importance, Volume) else np.asarray(importance)
    und = underlay.voxels if isinstance(underlay, Volume) else np.asarray(underlay)
    if imp.shape != und.shape:
        raise ContractError(f"importance {imp.shape} and underlay {und.shape} differ in shape")
    gray = np.rint(np.clip(_slice(und, axis, index), 0.0, 1.0) * 255.0)
    path = Path(path)
    write_pgm(path.with_suffix(".pgm"), gray)

    rgb = np.repeat(gray[..., None], 3, axis=2)
    scale = float(np.max(np.abs(imp)))
    if scale > 0:
        sl = _slice(imp, axis, index)
        alpha = (np.abs(sl) / scale)[..., None]
        colour = np.where(sl[..., None] > 0, POSITIVE_RGB, NEGATIVE_RGB)
        rgb = np.where(alpha > 0, np.rint((1 - alpha) * rgb + alpha * colour), rgb)
    rgb = rgb.astype(np.uint8)
    write_ppm(path, rgb)
    return rgb
