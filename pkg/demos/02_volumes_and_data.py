"""
Volumes, preprocessing and the synthetic dataset
================================================

Generate a handful of synthetic head volumes, look at the HU statistics of
one subject, preprocess it and save a slice as a greyscale image.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from tripletvol.data import VolumeDataset
from tripletvol.explain import write_pgm
from tripletvol.synthetic import generate_synthetic
from tripletvol.volume import BRAIN_WINDOW, preprocess, read_vvol, window_hu

out = Path(tempfile.mkdtemp(prefix="tv-demo-"))
manifest = generate_synthetic(out, n_per_class=4, dims=(32, 32, 16), seed=7, k_folds=2)
print(len(manifest), "volumes written to", out)

# %% [markdown]
# Each lesion subject carries the voxel box of its lesion in the manifest.

# %%
lesion_idx = next(i for i, e in enumerate(manifest.entries) if e.lesion_box)
entry = manifest.entries[lesion_idx]
raw = read_vvol(manifest.resolve(lesion_idx))
print("label", entry.label, "box", entry.lesion_box, "dims", raw.dims)
x0, y0, z0, x1, y1, z1 = entry.lesion_box
inside = raw.voxels[x0:x1, y0:y1, z0:z1]
# the box bounds an ellipsoid, so its corners can reach past the brain into air
tissue = inside[inside > -500]
print("mean tissue HU inside lesion box: %.1f" % tissue.mean())
print("HU range of the volume: %.0f .. %.0f" % (raw.voxels.min(), raw.voxels.max()))

# %% [markdown]
# The brain window maps [0, 80] HU onto [0, 1]; preprocessing then resamples
# and strips everything outside the largest connected component.

# %%
windowed = window_hu(raw, BRAIN_WINDOW)
clean = preprocess(raw, (32, 32, 16))
print("foreground voxels after windowing:", int((windowed.voxels > 0.05).sum()))
print("foreground voxels after stripping:", int((clean.voxels > 0.05).sum()))

z = (z0 + z1) // 2
write_pgm(out / "slice.pgm", np.rint(clean.voxels[:, :, z].T * 255))
print("slice written to", out / "slice.pgm")

# %% [markdown]
# The dataset object loads and caches preprocessed batches.

# %%
ds = VolumeDataset(manifest, transform=lambda v: preprocess(v, (32, 32, 16)))
batch = ds.batch([0, 1, 2, 3])
print("batch", batch.shape, batch.dtype, "labels", [ds.label(i) for i in range(4)])
