"""Command line entry point: ``rdslide <verb> [--config PATH] [--seed N] [--out DIR]``.

A run directory (``--out``) holds everything one experiment produces::

    config.ini                 resolved run configuration
    dataset/manifest.tsv       one line per patch
    dataset/slides/*.rdhm      slide images and lesion masks
    dataset/patches/...        patch rasters
    teacher.npz                frozen pretrained teacher
    checkpoint.npz             best-validation RD model
    train_log.csv              epoch, loss, val_accuracy, val_threshold
    heatmaps/*.rdhm            stitched slide heatmaps
    patch_scores.csv, slide_scores.csv, metrics.csv, froc_curve.csv
    ablation.csv

Failures exit with status 1 and print one JSON line on stderr.
"""

import argparse
import configparser
import io
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import config as config_mod
from . import storage
from .config import RunConfig
from .inference import score_patches
from .metrics import (
    accuracy,
    auroc,
    calibrate_miou_threshold,
    calibrate_threshold,
    froc,
    lesion_set,
    nms_candidates,
    pixel_auroc,
    pooled_miou,
)
from .model import build_model
from .slides import SPLITS, TUMOR, build_dataset, slide_score
from .training import LOG_FIELDS, SplitCache, TrainingDiverged, train_rd

log = logging.getLogger("rdslide")


class CliError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def _apply_override(cfg, text):
    key, sep, value = text.partition("=")
    section, dot, name = key.partition(".")
    if not sep or not dot:
        raise CliError(f"--set expects section.key=value, got {text!r}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(config_mod.dumps(cfg))
    if not cp.has_option(section, name):
        raise CliError(f"unknown config key {key!r}")
    cp.set(section, name, value)
    buf = io.StringIO()
    cp.write(buf)
    return config_mod.loads(buf.getvalue())


def resolve_config(args):
    out = args.out
    cfg_path = args.config
    if cfg_path is None and out and os.path.exists(os.path.join(out, "config.ini")):
        cfg_path = os.path.join(out, "config.ini")
    cfg = config_mod.load(cfg_path) if cfg_path else RunConfig()
    for item in args.set or []:
        cfg = _apply_override(cfg, item)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if out:
        cfg.out_dir = out
    return cfg.validate()


def _run_dir(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------


def _slide_paths(root, sid):
    return os.path.join(root, "slides", f"{sid}.image.rdhm"), os.path.join(root, "slides", f"{sid}.mask.rdhm")


def write_dataset(dataset, root):
    os.makedirs(os.path.join(root, "slides"), exist_ok=True)
    for split in SPLITS:
        os.makedirs(os.path.join(root, "patches", split), exist_ok=True)
        for r in dataset.splits[split]:
            storage.write_rdhm(os.path.join(root, storage.patch_path(r)), r.image)
    for sid, slide in dataset.slides.items():
        img_p, mask_p = _slide_paths(root, sid)
        storage.write_rdhm(img_p, slide.image)
        storage.write_rdhm(mask_p, slide.lesion_mask)
    with open(os.path.join(root, "manifest.tsv"), "w", encoding="utf-8") as fh:
        fh.write(storage.manifest_text(dataset))


def read_split(root, split):
    rows = [r for r in storage.read_manifest(os.path.join(root, "manifest.tsv")) if r["split"] == split]
    if not rows:
        return rows, np.zeros((0, 1, 1, 3), np.uint8), np.zeros(0, np.int64)
    images = np.stack([storage.read_rdhm(os.path.join(root, r["path"])) for r in rows])
    labels = np.array([r["label"] for r in rows], dtype=np.int64)
    return rows, images, labels


def _dataset_root(cfg):
    root = os.path.join(cfg.out_dir, "dataset")
    if not os.path.exists(os.path.join(root, "manifest.tsv")):
        raise CliError(f"no dataset at {root}; run build-dataset first")
    return root


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_build_dataset(cfg, args):
    out = _run_dir(cfg)
    dataset = build_dataset(cfg.dataset)
    write_dataset(dataset, os.path.join(out, "dataset"))
    config_mod.save(cfg, os.path.join(out, "config.ini"))
    for split, (n_norm, n_tum) in dataset.counts().items():
        slides = len({r.slide_id for r in dataset.splits[split]})
        print(f"{split}: normal={n_norm} tumor={n_tum} slides={slides}")
    return 0


def _teacher(cfg, out):
    from .pipeline import prepare_teacher

    path = os.path.join(out, "teacher.npz")
    if os.path.exists(path):
        teacher, meta = storage.load_teacher(path)
        return teacher, meta["teacher_seed"]
    teacher = prepare_teacher(cfg)
    storage.save_teacher(path, teacher, cfg.seed)
    return teacher, cfg.seed


def cmd_pretrain_teacher(cfg, args):
    from .pipeline import prepare_teacher

    out = _run_dir(cfg)
    teacher = prepare_teacher(cfg)
    path = os.path.join(out, "teacher.npz")
    storage.save_teacher(path, teacher, cfg.seed)
    print(f"teacher: {path} seed={cfg.seed}")
    return 0


def cmd_train(cfg, args):
    out = _run_dir(cfg)
    root = _dataset_root(cfg)
    teacher, teacher_seed = _teacher(cfg, out)
    model = build_model(teacher, seed=cfg.seed, teacher_seed=teacher_seed)
    _, tr_img, tr_lab = read_split(root, "train")
    _, va_img, va_lab = read_split(root, "val")
    train = SplitCache.build(model, tr_img, tr_lab)
    val = SplitCache.build(model, va_img, va_lab)
    log_path = os.path.join(out, "train_log.csv")
    ckpt = os.path.join(out, "checkpoint.npz")
    rows = []

    def on_epoch(row):
        rows.append(row)
        storage.write_csv(log_path, LOG_FIELDS, rows)

    try:
        result = train_rd(
            model, train, val, cfg.loss, cfg.optim, cfg.seed, cfg.threshold_mode, cfg.fixed_threshold, on_epoch
        )
    except TrainingDiverged:
        if rows:
            best = max(rows, key=lambda r: r[2])
            storage.save_model(ckpt, model, cfg, epoch=int(best[0]), val_accuracy=best[2], val_threshold=best[3])
        raise
    storage.save_model(
        ckpt,
        model,
        cfg,
        epoch=result.best_epoch,
        val_accuracy=result.best_val_accuracy,
        val_threshold=result.best_threshold,
        alpha=result.loss_config.alpha,
    )
    config_mod.save(cfg, os.path.join(out, "config.ini"))
    print(
        f"best epoch {result.best_epoch} val_accuracy {result.best_val_accuracy:.4f} "
        f"threshold {result.best_threshold:.6f} alpha {result.loss_config.alpha:.4f}"
    )
    return 0


def cmd_infer(cfg, args):
    from .inference import infer_slide

    out = _run_dir(cfg)
    model, meta = storage.load_model(args.checkpoint or os.path.join(out, "checkpoint.npz"))
    heat_dir = os.path.join(out, "heatmaps")
    if args.slides is not None:
        slides = {os.path.basename(p).split(".")[0]: p for p in args.slides}
        patch_rows = []
        root = None
    else:
        root = _dataset_root(cfg)
        manifest = storage.read_manifest(os.path.join(root, "manifest.tsv"))
        ids = [
            p[: -len(".image.rdhm")]
            for p in os.listdir(os.path.join(root, "slides"))
            if p.endswith(".image.rdhm") and p.split("-")[0] in ("val", "test")
        ]
        slides = {sid: _slide_paths(root, sid)[0] for sid in sorted(set(ids))}
        patch_rows = [r for r in manifest if r["split"] in ("val", "test")]
    if not slides and not patch_rows:
        print("no slides to score")
        return 0
    os.makedirs(heat_dir, exist_ok=True)
    slide_rows = []
    for sid, path in slides.items():
        image = storage.read_rdhm(path)
        heat, origins, scores = infer_slide(model, image, cfg.infer_stride)
        storage.write_rdhm(os.path.join(heat_dir, f"{sid}.rdhm"), heat.astype(np.float32))
        if args.png:
            storage.export_png(os.path.join(heat_dir, f"{sid}.png"), heat)
        slide_rows.append((sid, slide_score(scores), len(scores)))
    storage.write_csv(os.path.join(out, "slide_scores.csv"), ("slide_id", "score", "n_tiles"), slide_rows)
    if patch_rows:
        images = np.stack([storage.read_rdhm(os.path.join(root, r["path"])) for r in patch_rows])
        scores = score_patches(model, images)
        storage.write_csv(
            os.path.join(out, "patch_scores.csv"),
            ("split", "slide_id", "x", "y", "label", "score"),
            [(r["split"], r["slide_id"], r["x"], r["y"], r["label"], float(s)) for r, s in zip(patch_rows, scores)],
        )
    print(f"scored {len(slides)} slides, {len(patch_rows)} patches")
    return 0


def evaluate_outputs(out, root, seed, val_threshold=None, patch=64):
    """Metric rows from inference outputs; missing inputs skip a metric with a warning."""
    rows = []
    patch_path = os.path.join(out, "patch_scores.csv")
    if os.path.exists(patch_path):
        pr = storage.read_csv(patch_path)
        val = [r for r in pr if r["split"] == "val"]
        test = [r for r in pr if r["split"] == "test"]
        if val_threshold is None and val:
            val_threshold, _ = calibrate_threshold(
                [float(r["score"]) for r in val], [int(r["label"]) == TUMOR for r in val]
            )
        if test:
            s = np.array([float(r["score"]) for r in test])
            t = np.array([int(r["label"]) == TUMOR for r in test])
            if val_threshold is not None:
                rows.append(("patch_accuracy", "test", accuracy(s > val_threshold, t), val_threshold, seed))
            if t.any() and not t.all():
                rows.append(("patch_auroc", "test", auroc(s, t), "", seed))
    else:
        warnings.warn("patch_scores.csv missing; patch metrics skipped")

    slide_path = os.path.join(out, "slide_scores.csv")
    if not os.path.exists(slide_path) or root is None:
        warnings.warn("slide scores or ground-truth masks missing; slide metrics skipped")
        return rows
    scores = {r["slide_id"]: float(r["score"]) for r in storage.read_csv(slide_path)}
    masks, heats = {}, {}
    for sid in sorted(scores):
        mask_p = _slide_paths(root, sid)[1]
        heat_p = os.path.join(out, "heatmaps", f"{sid}.rdhm")
        if os.path.exists(mask_p) and os.path.exists(heat_p):
            masks[sid] = storage.read_rdhm(mask_p)
            heats[sid] = storage.read_rdhm(heat_p)
        else:
            warnings.warn(f"ground truth or heatmap missing for {sid}; slide skipped")
    test_ids = [s for s in sorted(masks) if s.startswith("test-")]
    val_ids = [s for s in sorted(masks) if s.startswith("val-")]
    truth = [bool(masks[s].any()) for s in test_ids]
    if any(truth) and not all(truth):
        rows.append(("slide_auroc", "test", auroc([scores[s] for s in test_ids], truth), "", seed))
    else:
        warnings.warn("slide AUROC needs both lesion and lesion-free test slides; skipped")
    lesions = lesion_set([masks[s] for s in test_ids])
    if lesions.total:
        cands = [nms_candidates(heats[s], patch) for s in test_ids]
        result = froc(cands, lesions)
        storage.write_csv(
            os.path.join(out, "froc_curve.csv"),
            ("threshold", "avg_fps", "sensitivity"),
            zip(result.thresholds, result.fps, result.sensitivity),
        )
        rows.append(("froc_score", "test", result.score, "", seed))
        for f, sens in zip(result.fp_targets, result.at_targets):
            rows.append((f"froc_sensitivity@{f:g}", "test", float(sens), f, seed))
        rows.append(("pixel_auroc", "test", pixel_auroc([heats[s] for s in test_ids], [masks[s] for s in test_ids]), "", seed))
        if any(masks[s].any() for s in val_ids):
            thr, _ = calibrate_miou_threshold([heats[s] for s in val_ids], [masks[s] for s in val_ids])
            rows.append(
                ("miou_2class", "test", pooled_miou([heats[s] for s in test_ids], [masks[s] for s in test_ids], thr), thr, seed)
            )
        else:
            warnings.warn("no lesion on validation slides; mIoU skipped")
    else:
        warnings.warn("no lesions in test ground truth; FROC, pixel AUROC and mIoU skipped")
    return rows


def cmd_eval(cfg, args):
    out = _run_dir(cfg)
    root = os.path.join(out, "dataset")
    root = root if os.path.exists(os.path.join(root, "manifest.tsv")) else None
    val_threshold = None
    ckpt = os.path.join(out, "checkpoint.npz")
    if os.path.exists(ckpt):
        val_threshold = storage.load_checkpoint(ckpt)[1].get("val_threshold")
    rows = evaluate_outputs(out, root, cfg.seed, val_threshold, cfg.dataset.patch_size)
    storage.write_csv(os.path.join(out, "metrics.csv"), ("metric", "split", "value", "threshold", "seed"), rows)
    for r in rows:
        print(f"{r[0]:<24} {r[1]:<5} {r[2]:.4f}")
    return 0


def cmd_ablate(cfg, args):
    from .pipeline import ABLATION_FIELDS, run_ablation, summarize_ablation

    out = _run_dir(cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed, cfg.seed + 1, cfg.seed + 2]
    counts = tuple(int(k) for k in args.counts.split(",")) if args.counts else (0, 5, 10, 50, 100)
    rows = []
    path = os.path.join(out, "ablation.csv")

    def on_cell(cell):
        rows.append(cell.row())
        storage.write_csv(path, ABLATION_FIELDS, rows)
        log.info("cell %s seed %d: %s acc=%.4f", cell.cell, cell.seed, cell.status, cell.test_accuracy)

    results = run_ablation(cfg, seeds, counts, on_cell=on_cell)
    summary = summarize_ablation(results)
    storage.write_csv(
        os.path.join(out, "ablation_summary.csv"),
        ("cell", "mean_accuracy", "min_accuracy", "max_accuracy", "n_seeds"),
        [(c, *v) for c, v in summary.items()],
    )
    for cell, (mean, lo, hi, n) in summary.items():
        print(f"{cell:<16} {mean:.4f}  [{lo:.4f}, {hi:.4f}]  n={n}")
    return 0


VERBS = {
    "build-dataset": cmd_build_dataset,
    "pretrain-teacher": cmd_pretrain_teacher,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


class _Parser(argparse.ArgumentParser):
    """Usage errors also come out as a single JSON line."""

    def error(self, message):
        print(json.dumps({"error": "UsageError", "verb": self.prog.split()[-1] if " " in self.prog else None, "message": message}), file=sys.stderr)
        self.exit(2)


def build_parser():
    parser = _Parser(prog="rdslide", description="Reverse-distillation anomaly detection on synthetic slides.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="run directory")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        p.add_argument("-v", "--verbose", action="store_true")
        if verb == "infer":
            p.add_argument("--checkpoint")
            p.add_argument("--slides", nargs="*", help="slide RDHM images (default: val/test slides of the dataset)")
            p.add_argument("--png", action="store_true", help="also write 8-bit PNG previews")
        if verb == "ablate":
            p.add_argument("--seeds", help="comma-separated seeds (default: seed, seed+1, seed+2)")
            p.add_argument("--counts", help="comma-separated tumor-patch counts")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return VERBS[args.verb](cfg, args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "verb": args.verb, "message": str(exc)}), file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
