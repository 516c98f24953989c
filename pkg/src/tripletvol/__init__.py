"""Triplet-loss metric learning for 3D volumes on a small numpy autograd engine."""

from .config import RunConfig
from .data import DatasetManifest, ManifestEntry, VolumeDataset
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    GradientError,
    NumericError,
    OracleError,
    ShapeError,
    TripletVolError,
)
from .evaluator import FoldReport, SummaryStat, confusion_metrics, one_sided_t_test, silhouette, summarize_folds
from .explain import OsmConfig, occlusion_map, render_slice
from .losses import TripletLossConfig, binary_cross_entropy, triplet_margin_loss
from .miner import MinerConfig, PairSet, mine_pairs, pairs_to_triplets, pairwise_distances
from .model import (
    ModelSpec,
    build_classifier,
    build_embedder,
    build_rcnn_baseline,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .projector import TsneConfig, tsne_embed
from .sampler import MPerClassSampler, SamplerConfig
from .tensor import Tensor, backward, finite_diff_gradient, no_grad
from .trainer import TrainConfig, train_baseline, train_classifier, train_embedder, train_rtcnn
from .volume import Volume, WindowSpec, preprocess, read_vvol, write_vvol

__version__ = "0.1.0"
