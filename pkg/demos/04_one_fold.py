"""
One cross-validation fold, end to end
=====================================

Train the triplet embedder and its classifier on four folds of the
synthetic benchmark, test on the fifth, then look at the embeddings with
t-SNE and at one occlusion map. Takes a couple of minutes on a laptop CPU.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from tripletvol.config import RunConfig
from tripletvol.data import VolumeDataset
from tripletvol.explain import OsmConfig, box_means, network_scorer, occlusion_map, predicted_class_scorer, render_slice
from tripletvol.pipeline import RTCNN_NAME, fold_assignment, run_fold
from tripletvol.projector import TsneConfig, scatter_svg, tsne_embed
from tripletvol.synthetic import generate_synthetic
from tripletvol.trainer import PHASE_EMBEDDER, embed_indices

out = Path(tempfile.mkdtemp(prefix="tv-fold-"))
cfg = RunConfig()
manifest = generate_synthetic(out / "data", 100, cfg.data.target_dims, seed=7, k_folds=5)
ds = VolumeDataset(manifest, transform=cfg.data.transform())
folds = fold_assignment(manifest, 5, seed=7)

# %%
result = run_fold(ds, folds, 0, RTCNN_NAME, cfg.embedder_spec(), cfg.train)
print("test accuracy %.3f" % result.report.accuracy)
print("silhouette before %.3f, after %.3f" % (result.silhouette_before, result.silhouette_after))
means = result.log.epoch_means(PHASE_EMBEDDER)
print("triplet loss, first epoch %.4f, last epoch %.4f" % (means[0], means[-1]))

# %% [markdown]
# Held-out embeddings projected to 2D.

# %%
emb = embed_indices(result.model.embedder, ds, result.test_indices)
labels = [ds.label(i) for i in result.test_indices]
coords, kl = tsne_embed(emb, TsneConfig(perplexity=10.0))
scatter_svg(coords, labels, out / "tsne.svg", title="held-out embeddings")
print("KL %.3f -> %.3f, scatter at %s" % (kl[0], kl[-1], out / "tsne.svg"))

# %% [markdown]
# Occlusion map for one held-out lesion volume.

# %%
i = next(j for j in result.test_indices if manifest.entries[j].lesion_box)
vol = ds.volume(i)
score = predicted_class_scorer(network_scorer(result.model), vol.voxels.astype(np.float32))
imp = occlusion_map(score, vol, OsmConfig())
box = manifest.entries[i].lesion_box
inside, outside = box_means(imp, box)
print("importance inside the lesion box %.4f, outside %.4f" % (inside, outside))
render_slice(imp, vol, 2, (box[2] + box[5] - 1) // 2, out / "osm.ppm")
print("render at", out / "osm.ppm")
