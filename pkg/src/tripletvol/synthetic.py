"""Synthetic head-CT phantoms with and without a hyper-intense lesion.

Volumes are generated in Hounsfield units so that the full preprocessing
chain (window, resample, background strip) has something to do: air at
-1000 HU, an ellipsoidal "brain" near 30 HU with a smooth radial falloff,
a per-subject intensity offset and voxel noise, and a dense scanner bed
along the bottom rows.

A lesion subject is its own lesion-free phantom plus an ellipsoid raised by
``LESION_CONTRAST`` window units (24 HU under the 80 HU brain window), so
subtracting the paired phantom leaves signal only inside the lesion box.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import LABEL_MTBI, LABEL_NORMAL, DatasetManifest, ManifestEntry
from .errors import ContractError, DataError
from .volume import BRAIN_WINDOW, Volume, write_vvol

AIR_HU = -1000.0
BRAIN_HU = 30.0
BED_HU = 300.0
NOISE_HU = 1.0
BRAIN_OFFSET_HU = 4.0
RIM_FALLOFF_HU = 6.0
BRAIN_SEMI_AXIS = 0.38
LESION_CONTRAST = 0.3
LESION_RADIUS = (0.08, 0.15)


def _grid(dims):
    return np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")


def synthetic_phantom(dims: Sequence[int], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return (HU voxels, brain mask) for one lesion-free subject.

    The ellipsoid geometry is fixed by ``dims``; subjects differ by a global
    brain offset and voxel noise. Geometry jitter gives every volume a
    fingerprint the desk-scale networks memorise instead of the lesion.
    """
    dims = tuple(int(d) for d in dims)
    x, y, z = _grid(dims)
    ext = np.array(dims, dtype=np.float64)
    centre = (ext - 1) / 2
    axes = ext * BRAIN_SEMI_AXIS
    r2 = ((x - centre[0]) / axes[0]) ** 2 + ((y - centre[1]) / axes[1]) ** 2 + ((z - centre[2]) / axes[2]) ** 2
    brain = r2 <= 1.0

    hu = np.full(dims, AIR_HU)
    offset = rng.uniform(-BRAIN_OFFSET_HU, BRAIN_OFFSET_HU)
    # darker towards the rim, like partial-volume falloff
    hu[brain] = BRAIN_HU + offset - RIM_FALLOFF_HU * r2[brain]

    lo, hi = int(0.2 * dims[0]), int(np.ceil(0.8 * dims[0]))
    hu[lo:hi, 0, :] = BED_HU
    hu += rng.normal(0.0, NOISE_HU, dims)
    return hu, brain


def add_lesion(
    hu: np.ndarray, brain: np.ndarray, rng: np.random.Generator, tries: int = 200
) -> tuple[np.ndarray, list[int]]:
    """Insert one ellipsoidal lesion fully inside ``brain``.

    Returns the new HU array and the half-open lesion box
    ``[x0, y0, z0, x1, y1, z1]``.
    """
    dims = hu.shape
    ext = np.array(dims, dtype=np.float64)
    radii = ext * rng.uniform(*LESION_RADIUS, 3)
    x, y, z = _grid(dims)
    for _ in range(tries):
        centre = rng.uniform(radii, ext - 1 - radii)
        inside = (
            ((x - centre[0]) / radii[0]) ** 2 + ((y - centre[1]) / radii[1]) ** 2 + ((z - centre[2]) / radii[2]) ** 2
        ) <= 1.0
        if inside.any() and np.all(brain[inside]):
            out = hu.copy()
            out[inside] += LESION_CONTRAST * BRAIN_WINDOW.width_hu
            idx = np.argwhere(inside)
            box = [int(v) for v in idx.min(axis=0)] + [int(v) + 1 for v in idx.max(axis=0)]
            return out, box
    raise DataError(f"lesion with radii {np.round(radii, 2).tolist()} cannot fit inside the phantom")


def synthetic_subject(
    dims: Sequence[int], seed: int, index: int, with_lesion: bool
) -> tuple[Volume, Volume, Optional[list[int]]]:
    """Generate subject ``index`` of run ``seed``.

    Returns ``(volume, paired_phantom, lesion_box)``; for lesion-free
    subjects the volume and phantom are identical and the box is ``None``.
    """
    if min(dims) < 16:
        raise ContractError(f"synthetic volumes need every extent >= 16, got {tuple(dims)}")
    rng = np.random.default_rng([seed, index])
    hu, brain = synthetic_phantom(dims, rng)
    base = Volume(hu.astype(np.float32))
    if not with_lesion:
        return base, base, None
    lesioned, box = add_lesion(hu, brain, rng)
    return Volume(lesioned.astype(np.float32)), base, box


def generate_synthetic(
    out_dir, n_per_class: int, dims: Sequence[int] = (32, 32, 16), seed: int = 7, k_folds: int = 5
) -> DatasetManifest:
    """Write ``2 * n_per_class`` VVOL volumes plus ``manifest.json`` to ``out_dir``."""
    from .evaluator import kfold_split

    if n_per_class < 1:
        raise ContractError("n_per_class must be at least 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for index in range(2 * n_per_class):
        label = LABEL_NORMAL if index < n_per_class else LABEL_MTBI
        vol, _, box = synthetic_subject(dims, seed, index, with_lesion=label == LABEL_MTBI)
        name = f"vol_{index:04d}.vvol"
        write_vvol(vol, out / name)
        entries.append(ManifestEntry(name, label, f"S{index:04d}", 0, box))

    manifest = DatasetManifest(1, entries, root=out)
    if k_folds > 1 and n_per_class >= k_folds:
        folds = kfold_split(manifest, k_folds, seed)
        for e, f in zip(entries, folds):
            e.fold = int(f)
        manifest = DatasetManifest(k_folds, entries, root=out)
    manifest.save(out / "manifest.json")
    return manifest
