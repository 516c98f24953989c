"""Acceptance gate: one PASS/FAIL line per criterion appears in the pytest terminal summary.

The synthetic benchmark (seed 7, 200 volumes at 32x32x16, 5 folds, RTCNN and
the residual baseline under the same budget) is built once per module and
shared by criteria 5, 6 and 7.
"""

import itertools
import json
import time

import numpy as np
import pytest

from helpers import grad_check
from tripletvol.cli import run
from tripletvol.config import RunConfig
from tripletvol.errors import FormatError
from tripletvol.evaluator import one_sided_t_test, summarize_folds
from tripletvol.explain import OsmConfig, box_means, network_scorer, occlusion_map, predicted_class_scorer
from tripletvol.layers import conv3d, dense, instance_norm, prelu, sigmoid
from tripletvol.losses import TripletLossConfig, binary_cross_entropy, triplet_margin_loss
from tripletvol.miner import DistanceMatrix, MinerConfig, mine_pairs, pairwise_distances
from tripletvol.model import CLASSIFIER, EMBEDDER, ModelSpec, build, build_classifier, load_checkpoint, parameter_count, save_checkpoint
from tripletvol.pipeline import synthetic_benchmark
from tripletvol.projector import TsneConfig, conditional_affinities, joint_affinities, row_perplexity, tsne_embed
from tripletvol.sampler import SamplerConfig, epoch_plan
from tripletvol.tensor import Tensor, l2_normalize_rows
from tripletvol.trainer import PHASE_CLASSIFIER, PHASE_EMBEDDER
from tripletvol.volume import Volume, read_vvol, write_vvol

from test_miner import mine_brute_force, random_batch
from test_projector import separable_by_a_line, two_clusters


def note(record_property, text):
    record_property("detail", text)


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    return synthetic_benchmark(tmp_path_factory.mktemp("benchmark"), RunConfig(), 100, (32, 32, 16), seed=7)


# ----------------------------------------------------------------------
# 1. gradient integrity

CASES = 50
TOL = 1e-4


def _conv_case(rng):
    stride = int(rng.integers(1, 3))
    x = rng.normal(size=(1, 2, 4, 4, 3))
    w = rng.normal(size=(2, 2, 3, 3, 3))
    b = rng.normal(size=2)
    return (lambda x, w, b: conv3d(x, w, b, stride=stride, padding=1)), [x, w, b], None


def _norm_case(rng):
    return (lambda x, g, b: instance_norm(x, g, b)), [rng.normal(size=(2, 3, 3, 2, 2)), rng.normal(size=3),
                                                      rng.normal(size=3)], None


def _prelu_case(rng):
    return (lambda x, a: prelu(x, a)), [rng.normal(size=(3, 4, 2)), rng.uniform(0.05, 0.5, 4)], None


def _dense_case(rng):
    return dense, [rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)], None


def _sigmoid_case(rng):
    return sigmoid, [rng.normal(0, 3, size=(4, 3))], None


def _normalize_case(rng):
    return l2_normalize_rows, [rng.normal(size=(5, 4))], None


def _distance_case(rng):
    w = rng.normal(size=(6, 6))
    np.fill_diagonal(w, 0.0)
    return pairwise_distances, [rng.normal(size=(6, 3))], w


def _triplet_case(rng):
    ts = np.array([[0, 1, 2], [0, 1, 3], [4, 5, 0], [2, 3, 5]])
    cfg = TripletLossConfig(margin=0.5, swap=bool(rng.integers(0, 2)))
    while True:
        e = rng.normal(size=(6, 3))
        d = pairwise_distances(l2_normalize_rows(Tensor(e))).data
        a, p, n = ts.T
        d_an = np.minimum(d[a, n], d[p, n]) if cfg.swap else d[a, n]
        clear_hinge = np.all(np.abs(d[a, p] - d_an + cfg.margin) > 1e-3)
        clear_min = not cfg.swap or np.all(np.abs(d[a, n] - d[p, n]) > 1e-3)
        if clear_hinge and clear_min:
            return (lambda x: triplet_margin_loss(l2_normalize_rows(x), ts, cfg)), [e], None


def _bce_case(rng):
    y = rng.integers(0, 2, 6)
    return (lambda p: binary_cross_entropy(p, y)), [rng.uniform(0.02, 0.98, 6)], None


OPS = {
    "conv3d": _conv_case,
    "instance_norm": _norm_case,
    "prelu": _prelu_case,
    "dense": _dense_case,
    "sigmoid": _sigmoid_case,
    "l2_normalize": _normalize_case,
    "pairwise_distance": _distance_case,
    "triplet_loss": _triplet_case,
    "bce": _bce_case,
}


@pytest.mark.criterion(1, "gradient integrity (finite differences, float64)")
def test_criterion_1_gradients(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for name, make in OPS.items():
        errs = []
        for _ in range(CASES):
            fn, arrays, weight = make(rng)
            errs.append(grad_check(fn, arrays, rng, weight=weight))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - start
    note(record_property, f"{CASES} cases x {len(OPS)} ops, worst rel err {max(worst.values()):.1e}, {elapsed:.0f}s")
    assert all(v < TOL for v in worst.values()), worst
    assert elapsed < 300


# ----------------------------------------------------------------------
# 2. miner oracle


@pytest.mark.criterion(2, "miner equals exhaustive enumeration")
def test_criterion_2_miner_oracle(record_property):
    rng = np.random.default_rng(7)
    eps_values = (0.0, 0.1, 0.5, 2.0)
    batches = 0
    for eps in eps_values:
        for _ in range(50):
            e, labels = random_batch(rng)
            dm = DistanceMatrix.from_embeddings(e, labels)
            assert mine_pairs(dm, MinerConfig(eps)).as_sets() == mine_brute_force(dm.d, labels, eps)
            batches += 1
    for _ in range(200):
        e, labels = random_batch(rng)
        dm = DistanceMatrix.from_embeddings(e, labels)
        nested = [mine_pairs(dm, MinerConfig(eps)).as_sets() for eps in eps_values]
        for (p1, n1), (p2, n2) in zip(nested, nested[1:]):
            assert p1 <= p2 and n1 <= n2
    note(record_property, f"{batches} batches set-equal, 200 monotonicity checks")


# ----------------------------------------------------------------------
# 3. loss exactness


def _loss(d_ap, d_an, d_pn, swap):
    d = Tensor(np.array([[0.0, d_ap, d_an], [d_ap, 0.0, d_pn], [d_an, d_pn, 0.0]]))
    return triplet_margin_loss(Tensor(np.zeros((3, 2))), np.array([[0, 1, 2]]), TripletLossConfig(0.2, swap),
                               distances=d).item()


@pytest.mark.criterion(3, "triplet loss hand values")
def test_criterion_3_loss_values(record_property):
    cases = [((0.9, 0.5, 1.0, False), 0.6), ((0.1, 0.9, 0.95, False), 0.0), ((0.1, 0.9, 0.95, True), 0.0),
             ((0.5, 1.2, 0.4, True), 0.3)]
    got = [_loss(*args) for args, _ in cases]
    note(record_property, "values " + ", ".join(f"{g:.6f}" for g in got))
    for g, (_, want) in zip(got, cases):
        assert abs(g - want) < 1e-6


# ----------------------------------------------------------------------
# 4. sampler balance


@pytest.mark.criterion(4, "m-per-class sampler balance")
def test_criterion_4_sampler(record_property):
    pools = {0: list(range(37)), 1: list(range(37, 128))}
    batches = epoch_plan(SamplerConfig(m=4, batch_size=32, class_indices=pools, seed=7), 1000)
    assert len(batches) == 1000
    for batch in batches:
        labels = np.array([y for _, y in batch])
        assert np.sum(labels == 0) == 16 and np.sum(labels == 1) == 16
        for group in labels.reshape(-1, 4):
            assert len(set(group.tolist())) == 1
    spreads = []
    for label, pool in pools.items():
        counts = np.bincount([i for b in batches for i, y in b if y == label], minlength=128)[pool]
        spreads.append(int(counts.max() - counts.min()))
    note(record_property, f"1000 batches, occurrence spread per class {spreads}")
    assert max(spreads) <= 1


# ----------------------------------------------------------------------
# 5-7. synthetic benchmark


@pytest.mark.criterion(5, "synthetic end-to-end: RTCNN >= 0.90 and >= baseline, < 60 min")
def test_criterion_5_benchmark(benchmark, record_property):
    rt = [r.report.accuracy for r in benchmark.rtcnn]
    base = [r.report.accuracy for r in benchmark.baseline]
    p = benchmark.p_values["accuracy"]
    note(record_property, f"RTCNN {np.mean(rt):.3f} {rt}, baseline {np.mean(base):.3f} {base}, "
                          f"one-sided p {p:.3g}, {benchmark.seconds / 60:.1f} min")
    assert len(rt) == len(base) == 5
    assert np.mean(rt) >= 0.90
    assert np.mean(rt) >= np.mean(base)
    assert 0.0 <= p <= 1.0
    assert benchmark.seconds < 3600


@pytest.mark.criterion(6, "held-out silhouette gain >= 0.3")
def test_criterion_6_silhouette(benchmark, record_property):
    gains = [r.silhouette_after - r.silhouette_before for r in benchmark.rtcnn]
    note(record_property, "per-fold gain " + ", ".join(f"{g:.2f}" for g in gains))
    assert np.mean(gains) >= 0.3


@pytest.mark.criterion(7, "occlusion maps localise the lesion")
def test_criterion_7_osm(benchmark, record_property):
    fold = benchmark.rtcnn[0]
    entries = benchmark.dataset.manifest.entries
    lesioned = [i for i in fold.test_indices if entries[i].lesion_box]
    score = network_scorer(fold.model)
    inside, outside = [], []
    for i in lesioned:
        vol = benchmark.dataset.volume(i)
        scorer = predicted_class_scorer(score, vol.voxels.astype(np.float32))
        a, b = box_means(occlusion_map(scorer, vol, OsmConfig()), entries[i].lesion_box)
        inside.append(a)
        outside.append(b)
    mi, mo = float(np.mean(inside)), float(np.mean(outside))
    constant = occlusion_map(lambda v: np.full(len(v), 0.3), benchmark.dataset.volume(lesioned[0]), OsmConfig())
    note(record_property, f"{len(lesioned)} lesion volumes, mean inside {mi:.4f} vs outside {mo:.4f}")
    assert mi > 0 and mi >= 2 * mo
    assert np.all(constant.voxels == 0)


def test_trainer_regression_baselines(benchmark, record_property):
    """Triplet loss shrinks by 4x within 20 epochs; the frozen-embedding classifier fits its training folds."""
    for r in benchmark.rtcnn:
        means = r.log.epoch_means(PHASE_EMBEDDER)
        assert means[19] < 0.25 * means[0], (r.fold, means[0], means[19])
        last = max(rec.epoch for rec in r.log.records if rec.phase == PHASE_CLASSIFIER)
        acc = np.mean([rec.accuracy for rec in r.log.records if rec.phase == PHASE_CLASSIFIER and rec.epoch == last])
        assert acc >= 0.95, (r.fold, acc)
        assert r.silhouette_after > r.silhouette_before


# ----------------------------------------------------------------------
# 8. t-SNE


@pytest.mark.criterion(8, "t-SNE affinities, separation and KL descent")
def test_criterion_8_tsne(record_property):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(60, 6))
    cond, _ = conditional_affinities(x, 15.0)
    perp_err = float(np.abs(row_perplexity(cond) - 15.0).max())
    P = joint_affinities(x, 15.0)
    assert np.allclose(P, P.T) and abs(P.sum() - 1.0) < 1e-12 and np.all(np.diag(P) == 0) and perp_err < 1e-3

    pts, labels = two_clusters(seed=7)
    coords, trace = tsne_embed(pts, TsneConfig(perplexity=10.0, seed=7))
    first, last = trace[:100].mean(), trace[-100:].mean()
    note(record_property, f"max perplexity error {perp_err:.1e}, KL {first:.3f} -> {last:.3f}")
    assert separable_by_a_line(coords, labels)
    assert last < first


# ----------------------------------------------------------------------
# 9. formats and reproducibility


@pytest.mark.criterion(9, "format round trips and bitwise reruns")
def test_criterion_9_formats(tmp_path, record_property):
    rng = np.random.default_rng(9)
    v = Volume(rng.normal(size=(7, 5, 3)).astype(np.float32), (0.5, 0.75, 2.0))
    write_vvol(v, tmp_path / "v.vvol")
    back = read_vvol(tmp_path / "v.vvol")
    assert back.voxels.tobytes() == v.voxels.tobytes() and back.spacing_mm == v.spacing_mm
    raw = (tmp_path / "v.vvol").read_bytes()
    for bad in (b"NOPE" + raw[4:], raw[:-4], raw + b"\0"):
        (tmp_path / "bad.vvol").write_bytes(bad)
        with pytest.raises(FormatError):
            read_vvol(tmp_path / "bad.vvol")

    spec = ModelSpec(EMBEDDER, (8, 8, 4), channel_widths=[2, 4], embedding_dim=8, dense_hidden=[16])
    net = build(spec, rng=1)
    save_checkpoint(net, tmp_path / "e.ckpt")
    restored = load_checkpoint(tmp_path / "e.ckpt")
    assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(net.parameters(), restored.parameters()))
    ck = (tmp_path / "e.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + ck[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")

    data = tmp_path / "data"
    assert run(["synth", "--n", "6", "--dims", "16x16x16", "--k", "2", "--out", str(data)]) == 0
    tiny = {
        "data": {"target_dims": [8, 8, 4], "manifest": str(data / "manifest.json")},
        "model": {"channel_widths": [2, 4], "embedding_dim": 8, "dense_hidden": [16], "classifier_hidden": [8, 4]},
        "train": {"epochs_embedder": 2, "epochs_classifier": 2, "batch_size": 8, "m": 2},
    }
    RunConfig.from_json(tiny).save(tmp_path / "tiny.json")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["train", "--config", str(tmp_path / "tiny.json"), "--threads", "1", "--out", str(a)]) == 0
    assert run(["train", "--config", str(a / "config.json"), "--threads", "1", "--out", str(b)]) == 0
    same = [(a / "checkpoints" / n).read_bytes() == (b / "checkpoints" / n).read_bytes()
            for n in ("embedder.ckpt", "classifier.ckpt")]
    note(record_property, "VVOL and checkpoint bitwise, malformed rejected, rerun checkpoints identical")
    assert all(same)
    assert json.loads((a / "config.json").read_text()) == json.loads((b / "config.json").read_text())


# ----------------------------------------------------------------------
# 10. statistics


@pytest.mark.criterion(10, "statistics and parameter accounting")
def test_criterion_10_statistics(record_property):
    values = [0.91, 0.95, 0.88, 0.97, 0.93]
    s = summarize_folds(values)
    closed = 2.776 * np.std(values, ddof=1) / np.sqrt(5)
    p_same = one_sided_t_test([0.9, 0.8, 0.85], [0.9, 0.8, 0.85])
    p_far = one_sided_t_test([10, 10.1, 9.9, 10, 10], [1, 1.1, 0.9, 1, 1])
    n_params = parameter_count(build_classifier(ModelSpec(CLASSIFIER)))
    note(record_property, f"half-width {s.half_width:.5f} vs {closed:.5f}, p {p_same} / {p_far:.1e}, "
                          f"classifier {n_params:,}")
    assert abs(s.half_width - closed) < 1e-3 * closed
    assert p_same == 0.5 and p_far < 1e-6
    assert n_params == 149_889
