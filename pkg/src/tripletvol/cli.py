"""Command-line entry point: synth, preprocess, train, eval, osm, project.

Every artifact-producing command writes the fully resolved run config to
``<out>/config.json``; passing it back with ``--config`` reproduces the run.
Exit codes: 0 success, 1 usage or config error, 2 data/format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

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
)
from .evaluator import compare_reports, format_table, silhouette
from .explain import box_means, network_scorer, occlusion_map, predicted_class_scorer, render_slice
from .model import RTCNN, build_embedder, load_checkpoint, save_checkpoint
from .pipeline import BASELINE_NAME, RTCNN_NAME, cross_validate, cv_report
from .projector import scatter_svg, tsne_embed, write_coords_csv
from .synthetic import generate_synthetic
from .trainer import TrainLog, embed_indices, jsonl_sink, train_baseline, train_rtcnn
from .volume import Volume, preprocess, read_vvol, write_vvol

logger = logging.getLogger("tripletvol")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LAYOUT = ("checkpoints", "logs", "reports", "figures")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 32x32x16, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive extents, got {text!r}")
    return dims  # type: ignore[return-value]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config JSON (flags override its values)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, help="overrides train, eval and t-SNE seeds")
    common.add_argument("--threads", type=int, default=1, help="cap on BLAS and loader threads")

    parser = _Parser(prog="tripletvol", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset and manifest")
    p.add_argument("--n", type=int, default=100, help="volumes per class")
    p.add_argument("--dims", type=_dims, default=(32, 32, 16))
    p.add_argument("--k", type=int, default=5, help="folds recorded in the manifest")

    p = sub.add_parser("preprocess", parents=[common], help="window, resample and strip every manifest volume")
    p.add_argument("--manifest", help="input manifest (default: data.manifest)")
    p.add_argument("--dims", type=_dims, help="target dims (default: data.target_dims)")

    for name, text in (("train", "train on the whole manifest"), ("eval", "k-fold train/test with reports")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--manifest")
        p.add_argument("--variant", choices=(RTCNN_NAME, BASELINE_NAME), default=RTCNN_NAME)
        if name == "eval":
            p.add_argument("--compare", help="metrics.json of another model for the one-sided t-test")

    p = sub.add_parser("osm", parents=[common], help="occlusion sensitivity map for one volume")
    p.add_argument("--manifest")
    p.add_argument("--variant", choices=(RTCNN_NAME, BASELINE_NAME), default=RTCNN_NAME)
    p.add_argument("--checkpoints", help="directory with trained checkpoints (default: <out>/checkpoints)")
    p.add_argument("--index", type=int, help="manifest entry (default: first lesion volume)")
    p.add_argument("--axis", type=int, default=2)
    p.add_argument("--slice", type=int, help="slice index (default: lesion centre or middle)")

    p = sub.add_parser("project", parents=[common], help="t-SNE of embeddings to CSV and SVG")
    p.add_argument("--manifest")
    p.add_argument("--checkpoints", help="directory with embedder.ckpt; omitted means an untrained embedder")
    return parser


# ----------------------------------------------------------------------
# helpers


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides("train", seed=args.seed)
        cfg = cfg.with_overrides("eval", seed=args.seed)
        cfg = cfg.with_overrides("tsne", seed=args.seed)
    if getattr(args, "manifest", None):
        cfg = cfg.with_overrides("data", manifest=str(Path(args.manifest).resolve()))
    return cfg


def _prepare_out(out: Path, cfg: RunConfig, command: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for d in LAYOUT:
        (out / d).mkdir(exist_ok=True)
    cfg.save(out / "config.json")
    (out / "command.json").write_text(json.dumps(command, indent=2, sort_keys=True) + "\n")


def _dataset(cfg: RunConfig, threads: int) -> VolumeDataset:
    manifest = DatasetManifest.load(cfg.data.manifest)
    return VolumeDataset(manifest, cfg.data.transform(), cache_bytes=cfg.train.cache_mb * 2**20, workers=threads)


def _spec(cfg: RunConfig, variant: str):
    return cfg.embedder_spec() if variant == RTCNN_NAME else cfg.baseline_spec()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def scale_box(box: Sequence[int], src_dims, dst_dims) -> list[int]:
    """Map a half-open voxel box through the resampling grid ``i -> i*(m-1)/(n-1)``."""
    lo, hi = [], []
    for a, b, n, m in zip(box[:3], box[3:], src_dims, dst_dims):
        f = (m - 1) / (n - 1) if n > 1 else 1.0
        lo.append(int(math.floor(a * f)))
        hi.append(min(int(m), int(math.ceil((b - 1) * f)) + 1))
    return lo + hi


# ----------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig, out: Path) -> None:
    seed = args.seed if args.seed is not None else cfg.train.seed
    out.mkdir(parents=True, exist_ok=True)
    generate_synthetic(out, args.n, args.dims, seed=seed, k_folds=args.k)
    cfg = cfg.with_overrides("data", manifest=str((out / "manifest.json").resolve()), target_dims=list(args.dims))
    cfg.save(out / "config.json")
    _write_json(out / "command.json", {"command": "synth", "n": args.n, "dims": list(args.dims), "k": args.k,
                                       "seed": seed})
    print(f"wrote {2 * args.n} volumes and manifest.json to {out}")


def cmd_preprocess(args, cfg: RunConfig, out: Path) -> None:
    if args.dims:
        cfg = cfg.with_overrides("data", target_dims=list(args.dims))
    manifest = DatasetManifest.load(cfg.data.manifest)
    dst = out / "volumes"
    dst.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, e in enumerate(manifest.entries):
        raw = read_vvol(manifest.resolve(i))
        v = preprocess(raw, cfg.data.target_dims, cfg.data.window, cfg.data.background_threshold)
        name = f"volumes/{Path(e.path).stem}.vvol"
        if (out / name).exists() and (out / name).resolve() == manifest.resolve(i).resolve():
            raise DataError(f"refusing to overwrite input volume {manifest.resolve(i)}")
        write_vvol(v, out / name)
        box = scale_box(e.lesion_box, raw.dims, v.dims) if e.lesion_box else None
        entries.append(ManifestEntry(name, e.label, e.subject, e.fold, box))
    DatasetManifest(manifest.k_folds, entries, root=out).save(out / "manifest.json")
    # the new manifest is already preprocessed; downstream commands must not repeat it
    cfg = cfg.with_overrides("data", manifest=str((out / "manifest.json").resolve()), preprocess=False)
    cfg.save(out / "config.json")
    print(f"preprocessed {len(entries)} volumes into {dst}")


def cmd_train(args, cfg: RunConfig, out: Path) -> None:
    _prepare_out(out, cfg, {"command": "train", "variant": args.variant})
    ds = _dataset(cfg, args.threads)
    indices = list(range(len(ds)))
    log = TrainLog(sink=jsonl_sink(out / "logs" / "train.jsonl"))
    ck = out / "checkpoints"
    spec = _spec(cfg, args.variant)
    if args.variant == RTCNN_NAME:
        model, log = train_rtcnn(ds, indices, spec, cfg.train, log=log, checkpoint_dir=ck)
        save_checkpoint(model.embedder, ck / "embedder.ckpt")
        save_checkpoint(model.classifier, ck / "classifier.ckpt")
    else:
        model, log = train_baseline(ds, indices, spec, cfg.train, log=log, checkpoint_dir=ck)
        save_checkpoint(model, ck / "baseline.ckpt")
    print(f"trained {args.variant} on {len(indices)} volumes; checkpoints in {ck}")


def cmd_eval(args, cfg: RunConfig, out: Path) -> None:
    _prepare_out(out, cfg, {"command": "eval", "variant": args.variant, "compare": args.compare})
    ds = _dataset(cfg, args.threads)
    results = cross_validate(ds, args.variant, _spec(cfg, args.variant), cfg.train, cfg.eval.k, cfg.eval.seed,
                             cfg.eval.threshold, log_dir=out / "logs")
    report = cv_report(args.variant, results)
    reports, p_values = [report], None
    if args.compare:
        try:
            other = json.loads(Path(args.compare).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{args.compare}: not valid JSON ({exc})") from exc
        p_values = compare_reports(report, other)
        report["comparison"] = {"against": other.get("model"), "p_one_sided": p_values}
        reports.append(other)
    _write_json(out / "reports" / "metrics.json", report)
    table = format_table(reports, p_values)
    (out / "reports" / "table.txt").write_text(table)
    sys.stdout.write(table)


def _load_scorer_network(args, out: Path):
    ck = Path(args.checkpoints) if args.checkpoints else out / "checkpoints"
    if args.variant == RTCNN_NAME:
        return RTCNN(load_checkpoint(ck / "embedder.ckpt"), load_checkpoint(ck / "classifier.ckpt"))
    return load_checkpoint(ck / "baseline.ckpt")


def cmd_osm(args, cfg: RunConfig, out: Path) -> None:
    _prepare_out(out, cfg, {"command": "osm", "variant": args.variant, "index": args.index, "axis": args.axis,
                            "slice": args.slice, "checkpoints": args.checkpoints})
    ds = _dataset(cfg, args.threads)
    entries = ds.manifest.entries
    index = args.index
    if index is None:
        index = next((i for i, e in enumerate(entries) if e.lesion_box), 0)
    if not 0 <= index < len(entries):
        raise DataError(f"index {index} outside manifest of {len(entries)} entries")
    network = _load_scorer_network(args, out)
    vol = ds.volume(index)
    score = predicted_class_scorer(network_scorer(network), vol.voxels.astype(np.float32))
    imp = occlusion_map(score, vol, cfg.osm)

    box = entries[index].lesion_box
    if args.slice is not None:
        sl = args.slice
    elif box:
        sl = (box[args.axis] + box[args.axis + 3] - 1) // 2
    else:
        sl = vol.dims[args.axis] // 2
    stem = out / "figures" / f"osm-{index:04d}"
    write_vvol(Volume(imp.voxels.astype(np.float32), imp.spacing_mm), stem.with_suffix(".vvol"))
    render_slice(imp, vol, args.axis, sl, Path(f"{stem}-axis{args.axis}-slice{sl}.ppm"))
    summary = {"index": index, "axis": args.axis, "slice": sl, "max_abs": float(np.abs(imp.voxels).max())}
    if box:
        summary["mean_inside"], summary["mean_outside"] = box_means(imp, box)
    _write_json(out / "reports" / f"osm-{index:04d}.json", summary)
    print(f"importance volume and slice render written under {out / 'figures'}")


def cmd_project(args, cfg: RunConfig, out: Path) -> None:
    _prepare_out(out, cfg, {"command": "project", "checkpoints": args.checkpoints})
    ds = _dataset(cfg, args.threads)
    if args.checkpoints:
        embedder = load_checkpoint(Path(args.checkpoints) / "embedder.ckpt")
        tag = "trained"
    else:
        embedder = build_embedder(cfg.embedder_spec(), np.random.default_rng([cfg.train.seed, 0]))
        tag = "untrained"
    indices = list(range(len(ds)))
    labels = [ds.label(i) for i in indices]
    emb = embed_indices(embedder, ds, indices)
    coords, trace = tsne_embed(emb, cfg.tsne)
    write_coords_csv(out / "figures" / "tsne.csv", coords, labels)
    scatter_svg(coords, labels, out / "figures" / "tsne.svg", title=f"t-SNE of {tag} embeddings")
    _write_json(out / "reports" / "tsne.json", {
        "embedder": tag,
        "n_points": len(indices),
        "kl_first": float(trace[0]),
        "kl_final": float(trace[-1]),
        "silhouette_embedding": silhouette(emb, labels),
    })
    print(f"t-SNE coordinates and scatter written under {out / 'figures'}")


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "osm": cmd_osm,
    "project": cmd_project,
}


def _configure_logging() -> None:
    level = os.environ.get("TV_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"TV_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logger.setLevel(levels[level])


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    previous_level = logger.level
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        cfg = _resolve_config(args)
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args, cfg, Path(args.out))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"tripletvol: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, ContractError, ShapeError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"tripletvol: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, GradientError, OracleError, FloatingPointError) as exc:
        print(f"tripletvol: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        logger.setLevel(previous_level)
    return EXIT_OK


def main() -> None:
    sys.exit(run())
