"""Cosine similarity maps and the focal-weighted distillation loss.

Label convention: ``y = 1`` marks a normal patch, ``y = 0`` a tumor patch.
For a normal patch the student should reproduce the teacher (similarity
towards 1); for a tumor patch it should not (similarity towards 0).
"""

from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import Tensor, clamp, make_node

NORM_FLOOR = 1e-8


@dataclass
class LossConfig:
    alpha: float = 0.1
    gamma: float = 2.0
    eps_s: float = 1e-4

    def validate(self):
        # alpha == 1 is the normals-only case: the tumor branch gets weight 0
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.eps_s < 0.5:
            raise ValueError(f"eps_s must lie in (0, 0.5), got {self.eps_s}")
        return self

    def to_dict(self):
        return asdict(self)


def raw_cosine(f, g):
    """Per-position cosine over the channel axis: (n, c, h, w) x 2 -> (n, h, w)."""
    if f.shape != g.shape:
        raise ValueError(f"cosine similarity needs equal shapes, got {f.shape} and {g.shape}")
    fd, gd = f.data, g.data
    dot = (fd * gd).sum(axis=1)
    nf = np.sqrt((fd * fd).sum(axis=1))
    ng = np.sqrt((gd * gd).sum(axis=1))
    df = np.maximum(nf, NORM_FLOOR)
    dg = np.maximum(ng, NORM_FLOOR)
    s = dot / (df * dg)

    def bwd(grad):
        gs = grad[:, None]
        inv = (1.0 / (df * dg))[:, None]
        s_ = s[:, None]
        gf = gg = None
        if f.requires_grad:
            # the norm only enters the denominator where it exceeds the floor
            rf = ((nf > NORM_FLOOR) / (np.maximum(nf, NORM_FLOOR) * df))[:, None]
            gf = gs * (gd * inv - s_ * fd * rf)
        if g.requires_grad:
            rg = ((ng > NORM_FLOOR) / (np.maximum(ng, NORM_FLOOR) * dg))[:, None]
            gg = gs * (fd * inv - s_ * gd * rg)
        return gf, gg

    return make_node(s.astype(f.dtype), (f, g), bwd)


def cosine_similarity_map(f, f_prime, eps_s=1e-4, clamped=True):
    """Similarity map between teacher and student features at one scale.

    With ``clamped`` the values are clipped to [eps_s, 1 - eps_s] so the
    loss logarithm stays finite; inference uses the raw cosine.
    """
    f = f if isinstance(f, Tensor) else Tensor(f)
    f_prime = f_prime if isinstance(f_prime, Tensor) else Tensor(f_prime)
    s = raw_cosine(f, f_prime)
    return clamp(s, eps_s, 1.0 - eps_s) if clamped else s


def _focal_scale(s, labels, alpha, gamma):
    """Mean over pixels of the focal term, per sample: (n, h, w) -> (n,)."""
    y = np.asarray(labels).reshape(-1, 1, 1)
    sd = s.data
    st = np.where(y == 1, sd, 1.0 - sd)
    at = np.where(y == 1, alpha, 1.0 - alpha)
    one_m = 1.0 - st
    logst = np.log(st)
    term = -at * one_m**gamma * logst
    hw = sd.shape[1] * sd.shape[2]
    out = term.reshape(term.shape[0], -1).mean(axis=1)

    def bwd(grad):
        # d/dst of -(1 - st)^gamma log st
        if gamma == 0:
            dst = -1.0 / st
        else:
            dst = gamma * one_m ** (gamma - 1.0) * logst - one_m**gamma / st
        sign = np.where(y == 1, 1.0, -1.0)
        return (grad[:, None, None] * at * dst * sign / hw,)

    return make_node(out.astype(s.dtype), (s,), bwd)


def focal_distill_loss(maps, labels, config=None):
    """Focal-weighted distillation loss over a list of clamped similarity maps.

    Each map is (n, h, w). The per-pixel term is averaged within a scale,
    summed over scales and averaged over the batch. Returns a scalar Tensor.
    """
    config = (config or LossConfig()).validate()
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary (1 = normal, 0 = tumor)")
    per_sample = None
    for s in maps:
        s = s if isinstance(s, Tensor) else Tensor(s)
        if s.data.min() <= 0.0 or s.data.max() >= 1.0:
            raise ValueError("similarity maps must be clamped into (0, 1) before the loss")
        term = _focal_scale(s, labels, config.alpha, config.gamma)
        per_sample = term if per_sample is None else per_sample + term
    n = len(labels)
    return make_node(
        np.asarray(per_sample.data.mean(), dtype=per_sample.dtype),
        (per_sample,),
        lambda g: (np.full(n, g / n),),
    )


def distill_loss(teacher_feats, student_feats, labels, config=None):
    """Similarity maps at every scale followed by the focal loss."""
    config = (config or LossConfig()).validate()
    maps = [cosine_similarity_map(f, fp, config.eps_s) for f, fp in zip(teacher_feats, student_feats)]
    return focal_distill_loss(maps, labels, config), maps
