"""Command-line pipeline driver.

Subcommands cover the whole workflow: ``synth`` and ``gen-partial``
prepare datasets, ``train`` runs the two-stage trainer, ``calibrate``
fits per-predictor decision thresholds on the validation split,
``predict`` and ``eval`` fuse committee decisions over the test split,
``cam`` renders class-activation heatmaps, ``gradcheck`` verifies
backpropagation numerically, and ``report`` re-emits tables from saved
artifacts.  Every command writes into a fixed layout under ``--out``:

    datasets/    generated or occluded dataset directories
    checkpoints/ stage1.ckpt and final.ckpt
    tables/      ranking.csv, thresholds.csv, score matrices
    reports/     report.csv/.md, ranking_grid.csv, predictions.csv
    heatmaps/    exported .pgm/.ppm pairs
    logs/        per-command resolved configs and training logs

Outputs carry no timestamps, so re-running a command with the same
inputs reproduces its artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .cam import compute_cam, export_heatmap
from .checkpoint import checkpoint_load, checkpoint_save
from .config import RunConfig, apply_overrides, format_config, load_config
from .data import (SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL, VARIANTS, BatchConfig,
                   DataSource, compute_priors, generate_partial_dataset,
                   load_dataset_dir, load_pixels, parse_attr_file,
                   parse_split_manifest, sample_tensors)
from .errors import ConfigError, EmptyInput, FacepartsError, MissingInput
from .evaluation import (EvaluationReport, build_ranking_table, emit_report,
                         evaluate_report, fuse_decisions, prior_baseline,
                         write_ranking_grid)
from .fusion import (ThresholdTable, calibrate_thresholds, load_score_matrix,
                     load_threshold_table, save_score_matrix,
                     save_threshold_table)
from .geometry import FiducialSet, PartialVariant, PREDICTORS, SegmentId
from .gradcheck import DEFAULT_TOLERANCE, run_gradcheck
from .model import SplitFaceModel
from .synthetic import IMAGE_SIZE, generate_dataset
from .training import (apply_pruning, collect_scores, load_ranking_csv,
                       prune_masks, rank_predictors, train_stage1,
                       train_stage2, write_ranking_csv, write_train_log)

STAGE1_CKPT = "checkpoints/stage1.ckpt"
FINAL_CKPT = "checkpoints/final.ckpt"
RANKING_CSV = "tables/ranking.csv"
THRESHOLDS_CSV = "tables/thresholds.csv"


# ---------------------------------------------------------------------------
# shared plumbing


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (if given) with command-line overrides applied on top."""
    cfg = (load_config(args.config) if getattr(args, "config", None)
           else RunConfig())
    return apply_overrides(
        cfg,
        dataset_dir=getattr(args, "data", None),
        seed=getattr(args, "seed", None),
        width_scale=getattr(args, "width_scale", None),
        threshold_mode=getattr(args, "threshold_mode", None),
        aggregator=getattr(args, "aggregator", None),
    )


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{path} not found; {hint}")
    return path


def _ensure_dirs(out: Path, *names: str) -> None:
    for name in names:
        (out / name).mkdir(parents=True, exist_ok=True)


def _log_config(out: Path, command: str, cfg: RunConfig) -> None:
    _ensure_dirs(out, "logs")
    (out / "logs" / f"config_{command}.ini").write_text(format_config(cfg))


def _load_source(cfg: RunConfig) -> DataSource:
    if not cfg.dataset_dir:
        raise ConfigError("no dataset directory configured; pass --data or "
                          "set dataset_dir in the [data] section")
    size = ((cfg.image_size, cfg.image_size)
            if cfg.image_size is not None else None)
    return load_dataset_dir(cfg.dataset_dir, image_size=size)


def _load_annotations(args: argparse.Namespace, cfg: RunConfig):
    """Annotations (with splits when available) from files or a dataset dir."""
    attr_file = getattr(args, "attr_file", None)
    if attr_file:
        annotations = parse_attr_file(attr_file)
        split_file = getattr(args, "split_file", None)
        if split_file:
            annotations.assign_splits(parse_split_manifest(split_file))
        return annotations
    if not cfg.dataset_dir:
        raise ConfigError("pass --attr-file or a dataset via --data")
    root = Path(cfg.dataset_dir)
    annotations = parse_attr_file(root / "attributes.txt")
    split_path = root / "split.txt"
    if split_path.exists():
        annotations.assign_splits(parse_split_manifest(split_path))
    return annotations


def _load_thresholds(out: Path, mode: str,
                     mask_table: np.ndarray,
                     attribute_names: list[str]) -> ThresholdTable:
    """Calibrated table for optimal mode; a synthetic 0.5 table for fixed."""
    path = out / THRESHOLDS_CSV
    if mode == "optimal":
        if not path.exists():
            raise MissingInput(
                f"threshold table {path} not found; run `calibrate` first")
        return load_threshold_table(path)
    if path.exists():
        return load_threshold_table(path)
    half = np.where(mask_table, 0.5, np.nan)
    return ThresholdTable(attribute_names=list(attribute_names),
                          thresholds=half, accuracies=np.full_like(half,
                                                                   np.nan))


def _effective_thresholds(table: ThresholdTable, mode: str) -> np.ndarray:
    if mode == "fixed":
        return np.where(np.isnan(table.thresholds), np.nan, 0.5)
    return table.thresholds


# ---------------------------------------------------------------------------
# dataset commands


def cmd_synth(args: argparse.Namespace) -> int:
    out_dir = Path(args.out) / "datasets" / "synthetic"
    generate_dataset(out_dir, args.train, args.val, args.test,
                     seed=args.seed, size=args.size)
    print(f"synthetic dataset written: {out_dir} "
          f"({args.train} train / {args.val} val / {args.test} test)")
    return 0


def cmd_gen_partial(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    if not cfg.dataset_dir:
        raise ConfigError("gen-partial needs a source dataset; pass --data")
    key = args.variant.replace("-", "_")
    try:
        variant = PartialVariant[key]
    except KeyError:
        choices = ", ".join(v.name.replace("_", "-") for v in VARIANTS)
        raise ConfigError(
            f"unknown variant {args.variant!r}; choose from {choices}")
    out_dir = Path(args.out) / "datasets" / variant.name.replace("_", "-")
    kept, skipped = generate_partial_dataset(cfg.dataset_dir, variant,
                                             out_dir, tau=cfg.tau)
    print(f"partial dataset written: {out_dir} "
          f"({len(kept)} kept, {len(skipped)} skipped)")
    return 0


# ---------------------------------------------------------------------------
# training commands


def _run_stage2(model: SplitFaceModel, optimizer, source: DataSource,
                cfg: RunConfig, out: Path) -> None:
    tcfg = cfg.train_config()
    matrix, labels = collect_scores(model, source, SPLIT_VAL,
                                    batch_size=tcfg.batch_size, tau=tcfg.tau)
    ranking = rank_predictors(matrix, labels)
    apply_pruning(model, optimizer,
                  prune_masks(ranking, tcfg.keep_per_attribute))
    optimizer, history = train_stage2(model, source, tcfg,
                                      optimizer=optimizer)
    checkpoint_save(out / FINAL_CKPT, model, optimizer)
    write_ranking_csv(out / RANKING_CSV, ranking)
    write_train_log(out / "logs" / "train_stage2.log", history)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    source = _load_source(cfg)
    tcfg = cfg.train_config()
    _ensure_dirs(out, "checkpoints", "tables", "logs")
    _log_config(out, "train", cfg)

    if args.stage in ("1", "auto"):
        model = SplitFaceModel(source.annotations.num_attributes,
                               width_scale=cfg.width_scale, seed=cfg.seed)
        optimizer, history = train_stage1(model, source, tcfg)
        checkpoint_save(out / STAGE1_CKPT, model, optimizer)
        write_train_log(out / "logs" / "train_stage1.log", history)
        print(f"stage 1 checkpoint: {out / STAGE1_CKPT}")
    else:
        model, optimizer = checkpoint_load(
            _require(out / STAGE1_CKPT, "run `train --stage 1` first"))
        if optimizer is None:
            raise MissingInput(f"{out / STAGE1_CKPT} carries no optimizer "
                               "state; re-run stage 1")

    if args.stage in ("2", "auto"):
        _run_stage2(model, optimizer, source, cfg, out)
        print(f"final checkpoint: {out / FINAL_CKPT}")
        print(f"predictor ranking: {out / RANKING_CSV}")
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    source = _load_source(cfg)
    model, _ = checkpoint_load(_require(out / FINAL_CKPT, "run `train` first"))
    matrix, labels = collect_scores(model, source, SPLIT_VAL,
                                    batch_size=cfg.batch_size, tau=cfg.tau)
    table = calibrate_thresholds(matrix, labels)
    _ensure_dirs(out, "tables")
    _log_config(out, "calibrate", cfg)
    save_threshold_table(table, out / THRESHOLDS_CSV)
    save_score_matrix(matrix, out / "tables" / "val_scores.csv",
                      out / "tables" / "val_visibility.csv")
    print(f"threshold table: {out / THRESHOLDS_CSV}")
    return 0


# ---------------------------------------------------------------------------
# decision commands


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    source = _load_source(cfg)
    model, _ = checkpoint_load(_require(out / FINAL_CKPT, "run `train` first"))
    ranking = load_ranking_csv(
        _require(out / RANKING_CSV, "run `train` first"))
    matrix, _ = collect_scores(model, source, SPLIT_TEST,
                               batch_size=cfg.batch_size, tau=cfg.tau)
    table = _load_thresholds(out, cfg.threshold_mode, matrix.mask_table(),
                             matrix.attribute_names)
    thresholds = _effective_thresholds(table, cfg.threshold_mode)
    decisions = fuse_decisions(matrix, ranking, thresholds, cfg.aggregator,
                               cfg.committee_size)
    _ensure_dirs(out, "reports")
    _log_config(out, "predict", cfg)
    path = out / "reports" / "predictions.csv"
    lines = ["image," + ",".join(matrix.attribute_names)]
    for name, row in zip(matrix.image_names, decisions):
        lines.append(name + "," + ",".join("1" if v else "-1" for v in row))
    path.write_text("\n".join(lines) + "\n")
    print(f"predictions ({cfg.aggregator}, {cfg.threshold_mode} thresholds): "
          f"{path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _ensure_dirs(out, "reports")

    if args.method == "prior":
        annotations = _load_annotations(args, cfg)
        if annotations.splits is None:
            raise MissingInput("prior evaluation needs a split manifest; "
                               "pass --split-file or a dataset with split.txt")
        per_attribute, mean = prior_baseline(annotations)
        report = EvaluationReport(
            dataset_id=args.dataset_id, threshold_mode="fixed",
            attribute_names=tuple(annotations.attribute_names),
            methods=("Prior",), accuracies=per_attribute[None, :],
            means=np.array([mean]))
        path = emit_report(report, "csv", out / "reports" / "prior_report.csv")
        print(f"prior report: {path}")
        print(f"Prior mean accuracy: {mean:.6f}")
        return 0

    source = _load_source(cfg)
    model, _ = checkpoint_load(_require(out / FINAL_CKPT, "run `train` first"))
    ranking = load_ranking_csv(
        _require(out / RANKING_CSV, "run `train` first"))
    matrix, labels = collect_scores(model, source, SPLIT_TEST,
                                    batch_size=cfg.batch_size, tau=cfg.tau)
    table = _load_thresholds(out, cfg.threshold_mode, matrix.mask_table(),
                             matrix.attribute_names)
    priors = compute_priors(source.annotations, split=SPLIT_TRAIN)
    report = evaluate_report(matrix, labels, ranking, table, priors,
                             threshold_mode=cfg.threshold_mode,
                             committee_size=cfg.committee_size,
                             dataset_id=args.dataset_id
                             or Path(cfg.dataset_dir).name)
    _ensure_dirs(out, "tables")
    _log_config(out, "eval", cfg)
    save_score_matrix(matrix, out / "tables" / "test_scores.csv",
                      out / "tables" / "test_visibility.csv")
    csv_path = emit_report(report, "csv", out / "reports" / "report.csv")
    md_path = emit_report(report, "markdown", out / "reports" / "report.md")
    grid = build_ranking_table(ranking, model.masks)
    write_ranking_grid(out / "reports" / "ranking_grid.csv", grid)
    for method in ("HRP", "NSA-product", "NSA-median", "Prior"):
        mean = report.means[report.methods.index(method)]
        print(f"{method} mean accuracy: {mean:.6f}")
    print(f"report: {csv_path}")
    print(f"report: {md_path}")
    return 0


# ---------------------------------------------------------------------------
# inspection commands


def cmd_cam(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    source = _load_source(cfg)
    model, _ = checkpoint_load(_require(out / FINAL_CKPT, "run `train` first"))
    try:
        predictor = SegmentId[args.predictor].value
    except KeyError:
        choices = ", ".join(p.name for p in PREDICTORS)
        raise ConfigError(
            f"unknown predictor {args.predictor!r}; choose from {choices}")
    names = list(source.annotations.attribute_names)
    if args.attribute not in names:
        raise ConfigError(f"unknown attribute {args.attribute!r}; "
                          f"choose from {', '.join(names)}")
    attribute = names.index(args.attribute)

    annotations = source.annotations
    if args.image is not None:
        name = args.image
        if name not in annotations.image_names:
            raise MissingInput(f"image {name} not in the dataset annotations")
    else:
        rows = annotations.split_indices(SPLIT_TEST)
        if rows.size == 0:
            raise EmptyInput("test split contains no images")
        name = annotations.image_names[int(rows[0])]
    if name not in source.landmarks:
        raise MissingInput(f"no landmarks for image {name}")
    image = load_pixels(source.image_dir, name)
    h, w = image.shape[:2]
    rec = source.landmarks[name]
    fids = rec if isinstance(rec, FiducialSet) else rec.to_fiducials(w, h)
    face, segments, visibility = sample_tensors(image, fids,
                                                BatchConfig(tau=cfg.tau))
    if predictor == SegmentId.FULL.value:
        crop = face
    else:
        if not visibility[predictor - 1]:
            raise MissingInput(f"segment {args.predictor} is not visible in "
                               f"{name}; choose another image or predictor")
        crop = segments[predictor - 1]

    amap = compute_cam(model, predictor, attribute, crop)
    _ensure_dirs(out, "heatmaps")
    base = out / "heatmaps" / (
        f"{Path(name).stem}_{args.predictor}_{args.attribute}")
    pgm_path, ppm_path = export_heatmap(amap, crop, base)
    print(f"heatmap: {pgm_path}")
    print(f"overlay: {ppm_path}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    worst, per_tensor = run_gradcheck(width_scale=args.width_scale,
                                      seed=args.seed)
    print(f"max relative gradient error: {worst:.3e} "
          f"over {len(per_tensor)} tensors")
    if worst < DEFAULT_TOLERANCE:
        print("gradient check passed")
        return 0
    print(f"gradient check failed (tolerance {DEFAULT_TOLERANCE:.0e})",
          file=sys.stderr)
    return 1


def cmd_report(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    matrix = load_score_matrix(
        _require(out / "tables" / "test_scores.csv", "run `eval` first"),
        _require(out / "tables" / "test_visibility.csv", "run `eval` first"))
    ranking = load_ranking_csv(
        _require(out / RANKING_CSV, "run `train` first"))
    table = _load_thresholds(out, cfg.threshold_mode, matrix.mask_table(),
                             matrix.attribute_names)
    annotations = _load_annotations(args, cfg)
    index = {name: i for i, name in enumerate(annotations.image_names)}
    missing = [n for n in matrix.image_names if n not in index]
    if missing:
        raise MissingInput(f"{len(missing)} scored images lack annotations "
                           f"(first: {missing[0]})")
    rows = np.array([index[n] for n in matrix.image_names], dtype=np.int64)
    labels = annotations.labels[rows].astype(np.float64)
    priors = compute_priors(annotations, split=SPLIT_TRAIN)
    dataset_id = args.dataset_id or (Path(cfg.dataset_dir).name
                                     if cfg.dataset_dir else "")
    report = evaluate_report(matrix, labels, ranking, table, priors,
                             threshold_mode=cfg.threshold_mode,
                             committee_size=cfg.committee_size,
                             dataset_id=dataset_id)
    _ensure_dirs(out, "reports")
    csv_path = emit_report(report, "csv", out / "reports" / "report.csv")
    md_path = emit_report(report, "markdown", out / "reports" / "report.md")
    masks = prune_masks(ranking, cfg.keep_per_attribute)
    write_ranking_grid(out / "reports" / "ranking_grid.csv",
                       build_ranking_table(ranking, masks))
    print(f"report: {csv_path}")
    print(f"report: {md_path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(parser: argparse.ArgumentParser, *, data: bool = True) -> None:
    parser.add_argument("--config", default=None, metavar="FILE",
                        help="key = value config file")
    parser.add_argument("--out", default="out", metavar="DIR",
                        help="output directory root (default: out)")
    if data:
        parser.add_argument("--data", default=None, metavar="DIR",
                            help="dataset directory (overrides config)")
    parser.add_argument("--seed", type=int, default=None,
                        help="random seed (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faceparts",
        description="Facial-segment attribute pipeline: fiducial-driven "
                    "segment extraction, multi-branch training, and "
                    "threshold-calibrated committee fusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", default="out", metavar="DIR")
    p.add_argument("--train", type=int, default=200, metavar="N")
    p.add_argument("--val", type=int, default=50, metavar="N")
    p.add_argument("--test", type=int, default=50, metavar="N")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=IMAGE_SIZE,
                   help="square image side in pixels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gen-partial",
                       help="write an occluded copy of a dataset")
    _add_common(p)
    p.add_argument("--variant", required=True, metavar="NAME",
                   help="occlusion variant, e.g. P-U12")
    p.set_defaults(func=cmd_gen_partial)

    p = sub.add_parser("train", help="train the multi-branch model")
    _add_common(p)
    p.add_argument("--width-scale", type=float, default=None,
                   help="channel width multiplier (overrides config)")
    p.add_argument("--stage", choices=("1", "2", "auto"), default="auto",
                   help="run stage 1, stage 2 (from stage1.ckpt), or both")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate",
                       help="fit decision thresholds on the validation split")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict",
                       help="write fused test-split decisions")
    _add_common(p)
    p.add_argument("--threshold-mode", choices=("optimal", "fixed"),
                   default=None)
    p.add_argument("--aggregator", choices=("hrp", "product", "median"),
                   default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score every method on the test split")
    _add_common(p)
    p.add_argument("--method", choices=("all", "prior"), default="all")
    p.add_argument("--threshold-mode", choices=("optimal", "fixed"),
                   default=None)
    p.add_argument("--attr-file", default=None, metavar="FILE",
                   help="attribute annotation file (prior method)")
    p.add_argument("--split-file", default=None, metavar="FILE",
                   help="split manifest (prior method)")
    p.add_argument("--dataset-id", default="", metavar="NAME",
                   help="dataset label recorded in the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cam", help="export a class-activation heatmap")
    _add_common(p)
    p.add_argument("--predictor", required=True, metavar="NAME",
                   help="predictor name, e.g. FULL or NS")
    p.add_argument("--attribute", required=True, metavar="NAME")
    p.add_argument("--image", default=None, metavar="NAME",
                   help="image file name (default: first test image)")
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of backpropagation")
    p.add_argument("--width-scale", type=float, default=1 / 32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report",
                       help="re-emit reports from saved score tables")
    _add_common(p)
    p.add_argument("--threshold-mode", choices=("optimal", "fixed"),
                   default=None)
    p.add_argument("--attr-file", default=None, metavar="FILE")
    p.add_argument("--split-file", default=None, metavar="FILE")
    p.add_argument("--dataset-id", default="", metavar="NAME")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FacepartsError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
