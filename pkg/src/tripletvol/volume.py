"""Volumes, the VVOL on-disk format, and CT-style preprocessing.

Arrays are indexed ``[x, y, z]``; on disk the voxels are written with ``x``
varying fastest, then ``y``, then ``z`` (Fortran order).

VVOL layout (little-endian)::

    0   4s   magic "VVOL"
    4   u32  version (1)
    8   3u32 dx, dy, dz
    20  3f32 sx, sy, sz   (spacing, mm)
    32  u32  dtype code (1 = f32)
    36  ...  dx*dy*dz f32 voxels
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.interpolate import make_interp_spline

from .errors import ContractError, DataError, FormatError

logger = logging.getLogger(__name__)

VVOL_MAGIC = b"VVOL"
VVOL_VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sI3I3fI")

DEFAULT_TARGET_DIMS = (128, 128, 64)
DEFAULT_BACKGROUND_THRESHOLD = 0.05


@dataclass
class Volume:
    """Single-channel 3D scalar field with voxel spacing in mm."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ContractError(f"volume voxels must be a non-empty 3-D array, got shape {self.voxels.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)  # type: ignore[assignment]
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ContractError(f"spacing must be three positive values, got {self.spacing_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)  # type: ignore[return-value]

    def copy(self) -> "Volume":
        return Volume(self.voxels.copy(), self.spacing_mm)


@dataclass(frozen=True)
class WindowSpec:
    width_hu: float = 80.0
    level_hu: float = 40.0

    def __post_init__(self):
        if self.width_hu <= 0:
            raise ContractError("window width must be positive")


BRAIN_WINDOW = WindowSpec(80.0, 40.0)


# ----------------------------------------------------------------------
# VVOL io


def write_vvol(v: Volume, path) -> None:
    data = np.asarray(v.voxels, dtype="<f4")
    header = _HEADER.pack(VVOL_MAGIC, VVOL_VERSION, *v.dims, *v.spacing_mm, DTYPE_F32)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes(order="F"))


def read_vvol(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, dx, dy, dz, sx, sy, sz, code = _HEADER.unpack_from(raw)
    if magic != VVOL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VVOL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {code}")
    if min(dx, dy, dz) < 1:
        raise FormatError(f"{path}: bad dims {(dx, dy, dz)}")
    if not (sx > 0 and sy > 0 and sz > 0):
        raise FormatError(f"{path}: bad spacing {(sx, sy, sz)}")
    n = dx * dy * dz
    payload = raw[_HEADER.size :]
    if len(payload) < 4 * n:
        raise FormatError(f"{path}: truncated payload, expected {n} values, found {len(payload) // 4}")
    if len(payload) > 4 * n:
        raise FormatError(f"{path}: trailing bytes after payload ({len(payload) - 4 * n})")
    voxels = np.frombuffer(payload, dtype="<f4").reshape((dx, dy, dz), order="F").astype(np.float32)
    return Volume(voxels, (sx, sy, sz))


# ----------------------------------------------------------------------
# preprocessing


def window_hu(v: Volume, w: WindowSpec = BRAIN_WINDOW) -> Volume:
    """Linear remap of the window ``[WL - WW/2, WL + WW/2]`` onto ``[0, 1]``."""
    lo = w.level_hu - w.width_hu / 2.0
    out = np.clip((v.voxels.astype(np.float64) - lo) / w.width_hu, 0.0, 1.0)
    return Volume(out.astype(np.float32), v.spacing_mm)


def _zoom_axis(a: np.ndarray, axis: int, n_out: int, order: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    k = min(order, n_in - 1)
    if k % 2 == 0 and k > 1:
        k -= 1
    spline = make_interp_spline(np.arange(n_in, dtype=np.float64), a, k=k, axis=axis)
    return spline(np.linspace(0.0, n_in - 1.0, n_out))


def siz_resample(v: Volume, target_dims: Sequence[int], order: int = 3) -> Volume:
    """Spline-interpolated zoom onto ``target_dims`` (cubic by default).

    Separable not-a-knot spline interpolation, one axis at a time. Corner
    voxels map onto corner voxels, so constants and linear ramps are
    reproduced exactly. Spacing is scaled by the inverse zoom factor.
    """
    target = tuple(int(t) for t in target_dims)
    if len(target) != 3 or min(target) < 2:
        raise ContractError(f"target dims must be three extents >= 2, got {target_dims}")
    for axis, (cur, tgt) in enumerate(zip(v.dims, target)):
        if cur != tgt and cur < 2:
            raise ContractError(f"cannot resample axis {axis} of extent {cur}")
    out = v.voxels.astype(np.float64)
    for axis in range(3):
        out = _zoom_axis(out, axis, target[axis], order)
    zoom = tuple(t / c for t, c in zip(target, v.dims))
    spacing = tuple(s / z for s, z in zip(v.spacing_mm, zoom))
    return Volume(out.astype(np.float32), spacing)


_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def strip_background(v: Volume, threshold: float = DEFAULT_BACKGROUND_THRESHOLD) -> Volume:
    """Keep only the largest 6-connected component above ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ContractError("background threshold must lie strictly inside (0, 1)")
    mask = v.voxels > threshold
    labels, count = ndimage.label(mask, structure=_SIX_CONNECTED)
    if count == 0:
        logger.warning("strip_background: no foreground above %.3f, returning zeros", threshold)
        return Volume(np.zeros_like(v.voxels), v.spacing_mm)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    keep = labels == int(np.argmax(sizes))
    return Volume(np.where(keep, v.voxels, 0).astype(v.voxels.dtype), v.spacing_mm)


def preprocess(
    v: Volume,
    target_dims: Sequence[int] = DEFAULT_TARGET_DIMS,
    window: WindowSpec = BRAIN_WINDOW,
    threshold: float = DEFAULT_BACKGROUND_THRESHOLD,
) -> Volume:
    """Window, resample, then strip background; output lies in ``[0, 1]``."""
    if not np.all(np.isfinite(v.voxels)):
        raise DataError("volume contains non-finite voxels")
    w = window_hu(v, window)
    r = siz_resample(w, target_dims)
    r = Volume(np.clip(r.voxels, 0.0, 1.0), r.spacing_mm)
    return strip_background(r, threshold)
