"""Patch accuracy, AUROC, lesion-level FROC and two-class mIoU.

Metric truth convention: 1 = anomalous (tumor), 0 = normal. Patch labels
use the opposite convention (1 = normal); convert with ``1 - label``.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

FP_TARGETS = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


def accuracy(predictions, truths):
    p = np.asarray(predictions).ravel()
    t = np.asarray(truths).ravel()
    if p.shape != t.shape:
        raise ValueError(f"accuracy: {p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(p == t))


def auroc(scores, truths):
    """Mann-Whitney AUROC: P(s+ > s-) + 0.5 P(s+ == s-), via tie-averaged ranks."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truths).ravel().astype(bool)
    if s.shape != t.shape:
        raise ValueError(f"auroc: {s.size} scores vs {t.size} truths")
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs at least one item of each class")
    if not np.all(np.isfinite(s)):
        raise ValueError("auroc scores must be finite")
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    # tie groups: [start, end) index ranges of equal scores
    bounds = np.flatnonzero(np.diff(ss)) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [ss.size]))
    avg_rank = (starts + ends + 1) / 2.0  # 1-based average rank of each group
    ranks = np.repeat(avg_rank, ends - starts)
    rank_pos = ranks[t[order]].sum()
    u = rank_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (float(n_pos) * float(n_neg)))


def pixel_auroc(heatmaps, masks):
    """AUROC over the pooled pixels of one or many maps; NaN pixels are excluded."""
    if isinstance(heatmaps, np.ndarray) and heatmaps.ndim == 2:
        heatmaps, masks = [heatmaps], [masks]
    scores, truths = [], []
    for h, m in zip(heatmaps, masks):
        h = np.asarray(h, dtype=np.float64)
        m = np.asarray(m)
        if h.shape != m.shape:
            raise ValueError(f"heatmap {h.shape} and mask {m.shape} differ in shape")
        keep = np.isfinite(h)
        scores.append(h[keep])
        truths.append(m[keep] > 0)
    s = np.concatenate(scores)
    t = np.concatenate(truths)
    if t.all() or not t.any():
        raise ValueError("pixel_auroc needs both lesion and non-lesion pixels")
    return auroc(s, t)


def miou_2class(pred_mask, truth_mask):
    """Mean IoU of the anomaly and normal classes; a class absent from both counts as 1."""
    p = np.asarray(pred_mask).astype(bool)
    t = np.asarray(truth_mask).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"miou: prediction {p.shape} vs truth {t.shape}")
    ious = []
    for a, b in ((p, t), (~p, ~t)):
        union = np.count_nonzero(a | b)
        ious.append(1.0 if union == 0 else np.count_nonzero(a & b) / union)
    return float(np.mean(ious))


# ---------------------------------------------------------------------------
# FROC
# ---------------------------------------------------------------------------

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class LesionSet:
    labels: list  # per slide: int array, 0 = background, 1..k = lesion id
    counts: list  # per slide: number of lesions

    @property
    def total(self):
        return int(sum(self.counts))


def lesion_set(masks):
    """8-connected components of every slide mask."""
    labels, counts = [], []
    for m in masks:
        lab, k = ndimage.label(np.asarray(m) > 0, structure=_EIGHT)
        labels.append(lab)
        counts.append(int(k))
    return LesionSet(labels, counts)


def nms_candidates(heatmap, radius, max_candidates=100):
    """Greedy non-maximum suppression: (x, y, score) rows, highest first.

    Each pick suppresses the square window of half-width ``radius``.
    NaN pixels are never picked.
    """
    h = np.array(heatmap, dtype=np.float64)
    h[~np.isfinite(h)] = -np.inf
    out = []
    for _ in range(max_candidates):
        idx = int(np.argmax(h))
        y, x = divmod(idx, h.shape[1])
        v = h[y, x]
        if v == -np.inf:
            break
        out.append((x, y, v))
        h[max(0, y - radius) : y + radius + 1, max(0, x - radius) : x + radius + 1] = -np.inf
    return np.array(out, dtype=np.float64).reshape(-1, 3)


@dataclass
class FrocResult:
    fps: np.ndarray  # average false positives per slide, one per threshold
    sensitivity: np.ndarray
    thresholds: np.ndarray
    at_targets: np.ndarray  # sensitivity at each FP target
    fp_targets: tuple
    score: float  # mean of at_targets


def froc(per_slide_candidates, lesions, fp_targets=FP_TARGETS):
    """Lesion-level FROC.

    ``per_slide_candidates`` holds one (k, 3) array of (x, y, score) rows per
    slide; ``lesions`` is a LesionSet (or a list of masks). Sweeping the
    threshold down through every distinct candidate score, a lesion counts
    as detected once any candidate at or above the threshold lies inside it;
    candidates outside every lesion are false positives. Sensitivity at a
    target is the best sensitivity reached with at most that many FPs/slide.
    """
    if not isinstance(lesions, LesionSet):
        lesions = lesion_set(lesions)
    n_slides = len(lesions.labels)
    if len(per_slide_candidates) != n_slides:
        raise ValueError(f"{len(per_slide_candidates)} candidate lists for {n_slides} slides")
    if lesions.total == 0:
        raise ValueError("FROC is undefined without any lesion")

    rows = []  # (score, slide, lesion id or 0)
    for s, cands in enumerate(per_slide_candidates):
        cands = np.asarray(cands, dtype=np.float64).reshape(-1, 3)
        lab = lesions.labels[s]
        for x, y, score in cands:
            rows.append((score, s, int(lab[int(y), int(x)])))
    rows.sort(key=lambda r: -r[0])

    fps, sens, thr = [0.0], [0.0], [np.inf]
    hit = set()
    n_fp = 0
    i = 0
    while i < len(rows):
        t = rows[i][0]
        while i < len(rows) and rows[i][0] == t:
            _, s, lid = rows[i]
            if lid == 0:
                n_fp += 1
            else:
                hit.add((s, lid))
            i += 1
        fps.append(n_fp / n_slides)
        sens.append(len(hit) / lesions.total)
        thr.append(t)
    fps = np.array(fps)
    sens = np.array(sens)
    at = np.array([sens[fps <= f].max() for f in fp_targets])
    return FrocResult(fps, sens, np.array(thr), at, tuple(fp_targets), float(at.mean()))


# ---------------------------------------------------------------------------
# threshold calibration
# ---------------------------------------------------------------------------


def quantile_thresholds(values, n=101):
    return np.quantile(np.asarray(values, dtype=np.float64).ravel(), np.linspace(0.0, 1.0, n))


def calibrate_threshold(scores, truths, n=101):
    """Best-accuracy threshold among ``n`` score quantiles; ties go to the lower one.

    ``truths`` use the metric convention (1 = anomalous); a score strictly
    above the threshold is an anomaly call. Returns (threshold, accuracy).
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truths).astype(bool)
    best_t, best_acc = None, -1.0
    for th in quantile_thresholds(s, n):
        acc = float(np.mean((s > th) == t))
        if acc > best_acc:
            best_t, best_acc = float(th), acc
    return best_t, best_acc


def calibrate_miou_threshold(heatmaps, masks, n=101):
    """Threshold maximizing pooled two-class mIoU on validation maps; ties go lower."""
    vals = np.concatenate([np.asarray(h)[np.isfinite(h)] for h in heatmaps])
    best_t, best = None, -1.0
    for th in quantile_thresholds(vals, n):
        score = pooled_miou(heatmaps, masks, th)
        if score > best:
            best_t, best = float(th), score
    return best_t, best


def pooled_miou(heatmaps, masks, threshold):
    """mIoU over the pooled valid pixels of several maps at one threshold."""
    preds, truths = [], []
    for h, m in zip(heatmaps, masks):
        h = np.asarray(h)
        keep = np.isfinite(h)
        preds.append(h[keep] > threshold)
        truths.append(np.asarray(m)[keep] > 0)
    return miou_2class(np.concatenate(preds), np.concatenate(truths))
