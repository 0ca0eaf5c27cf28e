"""End-to-end experiment: dataset, teacher, training, inference, metrics, ablations."""

from dataclasses import dataclass, field, replace
import logging

import numpy as np

from .config import RunConfig
from .inference import infer_slide
from .loss import LossConfig
from .metrics import (
    auroc,
    calibrate_miou_threshold,
    froc,
    lesion_set,
    nms_candidates,
    pixel_auroc,
    pooled_miou,
)
from .model import build_model, pretrain_teacher
from .slides import NORMAL, TUMOR, build_dataset, slide_score, subset_normal, subset_tumor, texture_corpus
from .training import SplitCache, alpha_for_counts, evaluate_split, train_rd

log = logging.getLogger(__name__)

METRIC_FIELDS = ("metric", "split", "value", "threshold", "seed")


def prepare_teacher(config, seed=None):
    pc = config.pretrain
    seed = config.seed if seed is None else seed
    images, labels = texture_corpus(pc.n_per_class, pc.texture_size, seed=seed)
    return pretrain_teacher(
        images, labels, config.encoder, seed=seed, epochs=pc.epochs, batch_size=pc.batch_size, lr=pc.lr
    )


@dataclass
class SlideEval:
    heatmaps: dict = field(default_factory=dict)  # slide_id -> (H, W) float32
    tile_scores: dict = field(default_factory=dict)  # slide_id -> (origins, scores)
    slide_scores: dict = field(default_factory=dict)


def infer_slides(model, slides, stride=None):
    out = SlideEval()
    for sid in sorted(slides):
        heat, origins, scores = infer_slide(model, slides[sid].image, stride)
        out.heatmaps[sid] = heat
        out.tile_scores[sid] = (origins, scores)
        out.slide_scores[sid] = slide_score(scores)
    return out


def slide_metrics(slides, val_eval, test_eval, patch_size, seed):
    """Slide AUROC, FROC, pixel AUROC and mIoU rows for the test slides."""
    rows = []
    test_ids = sorted(test_eval.heatmaps)
    truth = [slides[s].has_lesion for s in test_ids]
    if any(truth) and not all(truth):
        rows.append(("slide_auroc", "test", auroc([test_eval.slide_scores[s] for s in test_ids], truth), "", seed))
    masks = [slides[s].lesion_mask for s in test_ids]
    heats = [test_eval.heatmaps[s] for s in test_ids]
    lesions = lesion_set(masks)
    if lesions.total:
        cands = [nms_candidates(h, patch_size) for h in heats]
        rows.append(("froc_score", "test", froc(cands, lesions).score, "", seed))
        rows.append(("pixel_auroc", "test", pixel_auroc(heats, masks), "", seed))
    val_ids = sorted(val_eval.heatmaps)
    val_heats = [val_eval.heatmaps[s] for s in val_ids]
    val_masks = [slides[s].lesion_mask for s in val_ids]
    if any(m.any() for m in val_masks) and lesions.total:
        thr, _ = calibrate_miou_threshold(val_heats, val_masks)
        rows.append(("miou_2class", "test", pooled_miou(heats, masks, thr), thr, seed))
    return rows


@dataclass
class ExperimentResult:
    config: RunConfig
    model: object
    train: object
    metrics: list
    test_scores: np.ndarray = None
    val_eval: SlideEval = None
    test_eval: SlideEval = None


def run_experiment(config, dataset=None, teacher=None, caches=None, train_subset=None, evaluate_slides=True):
    """Train one model and evaluate it.

    ``caches`` may carry prebuilt SplitCache objects keyed by split (they
    depend only on the frozen teacher). ``train_subset`` selects train rows
    by index into the train cache.
    """
    config.validate()
    seed = config.seed
    dataset = dataset if dataset is not None else build_dataset(config.dataset)
    teacher = teacher if teacher is not None else prepare_teacher(config)
    model = build_model(teacher, seed=seed, teacher_seed=seed)
    if caches is None:
        caches = {s: SplitCache.build(model, *dataset.arrays(s)) for s in ("train", "val", "test")}
    train_cache = caches["train"] if train_subset is None else caches["train"].take(train_subset)
    result = train_rd(
        model,
        train_cache,
        caches["val"],
        config.loss,
        config.optim,
        seed=seed,
        threshold_mode=config.threshold_mode,
        fixed_threshold=config.fixed_threshold,
    )
    thr = result.best_threshold
    scores, _, acc = evaluate_split(model, caches["test"], thr)
    truths = caches["test"].labels == TUMOR
    rows = [
        ("patch_accuracy", "val", result.best_val_accuracy, thr, seed),
        ("patch_accuracy", "test", acc, thr, seed),
        ("patch_auroc", "test", auroc(scores, truths), "", seed),
    ]
    out = ExperimentResult(config, model, result, rows, scores)
    if evaluate_slides:
        val_slides = {s: dataset.slides[s] for s in dataset.slides if s.startswith("val-")}
        test_slides = {s: dataset.slides[s] for s in dataset.slides if s.startswith("test-")}
        out.val_eval = infer_slides(model, val_slides, config.infer_stride)
        out.test_eval = infer_slides(model, test_slides, config.infer_stride)
        rows += slide_metrics(dataset.slides, out.val_eval, out.test_eval, config.dataset.patch_size, seed)
    return out


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

DEFAULT_COUNTS = (0, 5, 10, 50, 100)
ABLATION_FIELDS = ("cell", "seed", "n_normal", "n_tumor", "alpha", "gamma", "status", "test_accuracy", "test_auroc")


@dataclass
class CellResult:
    cell: str
    seed: int
    n_normal: int
    n_tumor: int
    alpha: float
    gamma: float
    status: str = "ok"
    test_accuracy: float = float("nan")
    test_auroc: float = float("nan")

    def row(self):
        return (
            self.cell,
            self.seed,
            self.n_normal,
            self.n_tumor,
            self.alpha,
            self.gamma,
            self.status,
            self.test_accuracy,
            self.test_auroc,
        )


def ablation_cells(config, counts=DEFAULT_COUNTS, weighting=True, balanced=True):
    """(name, n_tumor, n_normal or None for all, alpha, gamma) for every sweep cell."""
    n_norm = config.dataset.n_normal_train
    main_k = config.dataset.n_tumor_train
    gamma = config.loss.gamma
    cells = [(f"tumor_{k}", k, None, alpha_for_counts(n_norm, k), gamma) for k in counts]
    if weighting and main_k > 0:
        cells.append((f"unweighted_{main_k}", main_k, None, 0.5, 0.0))
    if balanced and main_k > 0:
        cells.append((f"balanced_{main_k}", main_k, main_k, alpha_for_counts(main_k, main_k), gamma))
    return cells


def run_ablation(config, seeds=(0, 1, 2), counts=DEFAULT_COUNTS, weighting=True, balanced=True, on_cell=None):
    """Patch-accuracy sweep over tumor counts, loss weighting and normal downsampling.

    Per seed one base dataset is built holding the largest tumor count; each
    cell keeps every normal patch (or a seeded subset for the balanced cell)
    and a seeded subset of the tumor patches, so cells differ only in what
    the sweep varies. A failing cell is recorded and the sweep continues.
    """
    cells = ablation_cells(config, counts, weighting, balanced)
    k_max = max([config.dataset.n_tumor_train] + [c[1] for c in cells])
    results = []
    for seed in seeds:
        cfg = config.with_seed(seed)
        base = replace(cfg, dataset=replace(cfg.dataset, n_tumor_train=k_max))
        dataset = build_dataset(base.dataset)
        teacher = prepare_teacher(cfg)
        probe = build_model(teacher, seed=seed)
        caches = {s: SplitCache.build(probe, *dataset.arrays(s)) for s in ("train", "val", "test")}
        records = dataset.splits["train"]
        index = {id(r): i for i, r in enumerate(records)}
        for name, k, n_norm, alpha, gamma in cells:
            n_normal = n_norm if n_norm is not None else cfg.dataset.n_normal_train
            cell = CellResult(name, seed, n_normal, k, alpha, gamma)
            try:
                subset = subset_tumor(records, k, seed)
                if n_norm is not None:
                    subset = subset_normal(subset, n_norm, seed)
                idx = [index[id(r)] for r in subset]
                cell_cfg = replace(cfg, loss=LossConfig(alpha=alpha, gamma=gamma, eps_s=cfg.loss.eps_s))
                res = run_experiment(
                    cell_cfg, dataset, teacher, caches, train_subset=idx, evaluate_slides=False
                )
                cell.test_accuracy = res.metrics[1][2]
                cell.test_auroc = res.metrics[2][2]
            except Exception as exc:  # a failed cell must not stop the sweep
                log.exception("ablation cell %s seed %d failed", name, seed)
                cell.status = f"failed: {type(exc).__name__}: {exc}"
            results.append(cell)
            if on_cell:
                on_cell(cell)
    return results


def summarize_ablation(results):
    """Per cell: (mean accuracy, min, max, n ok seeds)."""
    summary = {}
    for cell in dict.fromkeys(r.cell for r in results):
        accs = [r.test_accuracy for r in results if r.cell == cell and r.status == "ok"]
        if accs:
            summary[cell] = (float(np.mean(accs)), float(np.min(accs)), float(np.max(accs)), len(accs))
        else:
            summary[cell] = (float("nan"), float("nan"), float("nan"), 0)
    return summary


def baseline_indices(dataset):
    """Train indices of the normal patches only (the RD-baseline training set)."""
    return [i for i, r in enumerate(dataset.splits["train"]) if r.label == NORMAL]

