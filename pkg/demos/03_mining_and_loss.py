"""
Pair mining and the triplet loss
================================

Mine informative pairs from a batch of unit embeddings, turn them into
triplets and evaluate the margin loss.
"""

# %%
import numpy as np

from tripletvol.losses import TripletLossConfig, triplet_margin_loss
from tripletvol.miner import DistanceMatrix, MinerConfig, mine_pairs, pairs_to_triplets, pairwise_distances
from tripletvol.sampler import SamplerConfig, epoch_plan
from tripletvol.tensor import Tensor, l2_normalize_rows

rng = np.random.default_rng(1)

# %% [markdown]
# Batches come from the m-per-class sampler: groups of four from each class.

# %%
cfg = SamplerConfig.from_labels(list(range(40)), [0] * 20 + [1] * 20, m=4, batch_size=16, seed=0)
batch = epoch_plan(cfg, 1)[0]
labels = np.array([y for _, y in batch])
print("labels in batch:", labels)

# %% [markdown]
# Two loose clusters on the unit sphere, one per class.

# %%
centres = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
e = l2_normalize_rows(Tensor(centres[labels] + rng.normal(0, 0.6, (16, 3))))
d = pairwise_distances(e)

for eps in (0.0, 0.1, 0.5):
    pairs = mine_pairs(DistanceMatrix(d.data, labels), MinerConfig(eps))
    print(f"eps={eps}: {len(pairs.positives)} positive and {len(pairs.negatives)} negative pairs")

# %%
pairs = mine_pairs(DistanceMatrix(d.data, labels), MinerConfig(0.1))
triplets = pairs_to_triplets(pairs)
loss = triplet_margin_loss(e, triplets, TripletLossConfig(margin=0.2), distances=d)
print(len(triplets), "triplets, loss %.4f" % loss.item())

# %% [markdown]
# Tight, well separated clusters leave nothing to mine.

# %%
tight = l2_normalize_rows(Tensor(centres[labels] + rng.normal(0, 0.01, (16, 3))))
empty = mine_pairs(DistanceMatrix.from_embeddings(tight.data, labels), MinerConfig(0.1))
print("pairs mined from tight clusters:", len(empty))
