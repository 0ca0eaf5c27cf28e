"""Anomaly maps, multi-scale fusion, patch scores and slide scoring."""

import numpy as np

from . import _kernels
from .autodiff import Tensor
from .loss import cosine_similarity_map
from .slides import stitch_heatmap, tile_origins


def anomaly_maps(sim_maps):
    """A_n = 1 - S_n for every scale."""
    return [1.0 - np.asarray(s.data if isinstance(s, Tensor) else s) for s in sim_maps]


def fuse_maps(a_maps, patch_size):
    """Bilinearly upsample each (n, h, w) or (h, w) map to patch size and sum."""
    fused = None
    for a in a_maps:
        a = np.asarray(a, dtype=np.float64)
        squeeze = a.ndim == 2
        if squeeze:
            a = a[None]
        if a.shape[1:] != (patch_size, patch_size):
            a = _kernels.upsample_bilinear(a, patch_size, patch_size)
        if squeeze:
            a = a[0]
        fused = a if fused is None else fused + a
    return fused


def patch_score(fused):
    """(sum, mean) of the fused map; leading axes are treated as a batch."""
    fused = np.asarray(fused, dtype=np.float64)
    if fused.ndim == 2:
        return float(fused.sum()), float(fused.mean())
    flat = fused.reshape(fused.shape[0], -1)
    return flat.sum(axis=1), flat.mean(axis=1)


def detect(score, threshold):
    """Tumor call: strictly above the threshold."""
    return np.asarray(score) > threshold


def model_maps(model, x, teacher_feats=None):
    """Raw similarity maps for a normalized batch x (n, 3, p, p)."""
    feats = teacher_feats if teacher_feats is not None else model.teacher(Tensor(x))
    feats = [f if isinstance(f, Tensor) else Tensor(f) for f in feats]
    student = model.student(model.bottleneck(feats))
    return [cosine_similarity_map(f, fp, clamped=False).data for f, fp in zip(feats, student)]


def score_batch(model, x, teacher_feats=None):
    """Fused anomaly maps (n, p, p) and mean scores (n,) for a normalized batch."""
    sims = model_maps(model, x, teacher_feats)
    fused = fuse_maps(anomaly_maps(sims), model.config.input_size)
    return fused, patch_score(fused)[1]


def teacher_features(model, x, batch_size=64):
    """Precompute frozen teacher features for a normalized array."""
    model.teacher.eval()
    chunks = [[], [], []]
    for s in range(0, len(x), batch_size):
        for i, f in enumerate(model.teacher(Tensor(x[s : s + batch_size]))):
            chunks[i].append(f.data)
    return [np.concatenate(c) for c in chunks]


def score_patches(model, images, batch_size=64, keep_maps=False, teacher_feats=None):
    """Score uint8 patches (N, p, p, 3). Returns mean scores, plus fused maps if asked."""
    model.eval()
    n = len(teacher_feats[0]) if teacher_feats is not None else len(images)
    scores = np.zeros(n)
    maps = np.zeros((n, model.config.input_size, model.config.input_size), np.float32) if keep_maps else None
    for s in range(0, n, batch_size):
        sl = slice(s, s + batch_size)
        tf = [f[sl] for f in teacher_feats] if teacher_feats is not None else None
        x = None if tf is not None else model.preprocess(images[sl])
        fused, sc = score_batch(model, x, tf)
        scores[sl] = sc
        if keep_maps:
            maps[sl] = fused
    return (scores, maps) if keep_maps else scores


def infer_slide(model, image, stride=None, batch_size=64):
    """Tile a slide, score every tile and stitch the fused maps.

    Returns (heatmap (H, W) float32 with NaN where uncovered, origins (m, 2),
    tile mean-scores (m,)).
    """
    p = model.config.input_size
    h, w = image.shape[:2]
    origins = tile_origins(h, w, p, stride or p // 2)
    tiles = np.stack([image[y : y + p, x : x + p] for x, y in origins])
    scores, maps = score_patches(model, tiles, batch_size, keep_maps=True)
    heatmap = stitch_heatmap((origins, maps), (h, w))
    return heatmap, origins, scores
