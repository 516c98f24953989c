"""k-fold orchestration: train on k-1 folds, test on the held-out one."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import DatasetManifest, VolumeDataset
from .evaluator import FoldReport, compare_reports, confusion_metrics, kfold_split, metrics_report, silhouette
from .layers import Module
from .model import ModelSpec, build_embedder
from .synthetic import generate_synthetic
from .trainer import (
    TrainConfig,
    TrainLog,
    embed_indices,
    jsonl_sink,
    predict_proba,
    train_baseline,
    train_rtcnn,
)

logger = logging.getLogger(__name__)

RTCNN_NAME = "rtcnn"
BASELINE_NAME = "rcnn-baseline"


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def fold_assignment(manifest: DatasetManifest, k: int, seed: int) -> np.ndarray:
    """Use the manifest's folds when they match ``k``, otherwise re-split."""
    if manifest.k_folds == k:
        return np.array([e.fold for e in manifest.entries])
    return kfold_split(manifest, k, seed)


@dataclass
class FoldResult:
    fold: int
    report: FoldReport
    probabilities: np.ndarray
    test_indices: list[int]
    model: Module
    log: TrainLog
    silhouette_before: Optional[float] = None
    silhouette_after: Optional[float] = None


def run_fold(
    dataset: VolumeDataset,
    folds: np.ndarray,
    fold: int,
    variant: str,
    spec: ModelSpec,
    cfg: TrainConfig,
    threshold: float = 0.5,
    log_path=None,
) -> FoldResult:
    train_idx = [int(i) for i in np.flatnonzero(folds != fold)]
    test_idx = [int(i) for i in np.flatnonzero(folds == fold)]
    cfg = dataclasses.replace(cfg, seed=fold_seed(cfg.seed, fold))
    log = TrainLog(sink=jsonl_sink(log_path) if log_path else None)
    test_labels = [dataset.label(i) for i in test_idx]

    before = after = None
    if variant == RTCNN_NAME:
        initial = build_embedder(spec, np.random.default_rng([cfg.seed, 0]))
        before = silhouette(embed_indices(initial, dataset, test_idx), test_labels)
        model, log = train_rtcnn(dataset, train_idx, spec, cfg, log=log)
        after = silhouette(embed_indices(model.embedder, dataset, test_idx), test_labels)
    else:
        model, log = train_baseline(dataset, train_idx, spec, cfg, log=log)

    probs = predict_proba(model, dataset, test_idx)
    report = confusion_metrics(probs, test_labels, threshold)
    logger.info("fold %d %s: accuracy %.3f", fold, variant, report.accuracy)
    return FoldResult(fold, report, probs, test_idx, model, log, before, after)


def cross_validate(
    dataset: VolumeDataset,
    variant: str,
    spec: ModelSpec,
    cfg: TrainConfig,
    k: int = 5,
    seed: int = 7,
    threshold: float = 0.5,
    log_dir=None,
    folds_to_run: Optional[Sequence[int]] = None,
) -> list[FoldResult]:
    folds = fold_assignment(dataset.manifest, k, seed)
    results = []
    for f in folds_to_run if folds_to_run is not None else range(k):
        log_path = Path(log_dir) / f"{variant}-fold{f}.jsonl" if log_dir else None
        results.append(run_fold(dataset, folds, f, variant, spec, cfg, threshold, log_path))
    return results


def cv_report(variant: str, results: Sequence[FoldResult]) -> dict:
    extra = {}
    if any(r.silhouette_after is not None for r in results):
        extra["silhouette"] = [
            {"fold": r.fold, "before": r.silhouette_before, "after": r.silhouette_after} for r in results
        ]
    return metrics_report(variant, [r.report for r in results], extra)


@dataclass
class BenchmarkResult:
    dataset: VolumeDataset
    rtcnn: list[FoldResult]
    baseline: list[FoldResult]
    reports: dict
    p_values: dict
    seconds: float


def synthetic_benchmark(
    data_dir,
    cfg=None,
    n_per_class: int = 100,
    dims: Sequence[int] = (32, 32, 16),
    seed: int = 7,
) -> BenchmarkResult:
    """Generate the synthetic dataset and cross-validate RTCNN and the baseline on it.

    Both variants see the same folds, the same training budget and the same
    preprocessing. ``cfg`` is a :class:`tripletvol.config.RunConfig`.
    """
    from .config import RunConfig

    cfg = cfg if cfg is not None else RunConfig()
    start = time.perf_counter()
    manifest = generate_synthetic(data_dir, n_per_class, dims, seed=seed, k_folds=cfg.eval.k)
    dataset = VolumeDataset(manifest, transform=cfg.data.transform(), cache_bytes=cfg.train.cache_mb * 2**20)
    runs = {}
    for variant, spec in ((RTCNN_NAME, cfg.embedder_spec()), (BASELINE_NAME, cfg.baseline_spec())):
        runs[variant] = cross_validate(dataset, variant, spec, cfg.train, cfg.eval.k, cfg.eval.seed,
                                       cfg.eval.threshold)
    reports = {v: cv_report(v, r) for v, r in runs.items()}
    p_values = compare_reports(reports[RTCNN_NAME], reports[BASELINE_NAME])
    return BenchmarkResult(dataset, runs[RTCNN_NAME], runs[BASELINE_NAME], reports, p_values,
                           time.perf_counter() - start)
