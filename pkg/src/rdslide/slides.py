"""Synthetic slides with lesion masks, patch sampling and heatmap stitching."""

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from . import _kernels

NORMAL = 1
TUMOR = 0

SPLITS = ("train", "val", "test")
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}


@dataclass
class SlideParams:
    size: int = 1024
    lesion_count: tuple = (1, 3)
    lesion_fraction: tuple = (0.01, 0.05)
    min_lesion_radius: float = 8.0
    tissue_sigmas: tuple = (12.0, 5.0, 2.5)
    lesion_sigmas: tuple = (3.0, 1.5)
    nuclei_sigma: float = 1.2
    tissue_nuclei_threshold: float = 1.9
    lesion_nuclei_threshold: float = 0.9
    lesion_color_shift: float = 0.10

    def validate(self):
        lo, hi = self.lesion_fraction
        if not 0 < lo <= hi <= 0.5:
            raise ValueError(f"lesion_fraction band {self.lesion_fraction} must satisfy 0 < lo <= hi <= 0.5")
        if self.lesion_count[0] < 0 or self.lesion_count[0] > self.lesion_count[1]:
            raise ValueError(f"invalid lesion_count range {self.lesion_count}")
        area = float(self.size) ** 2
        smallest = np.pi * self.min_lesion_radius**2
        if self.lesion_count[1] > 0 and hi * area < smallest:
            raise ValueError(
                f"lesion fraction {hi} of a {self.size}px slide is below one lesion of radius "
                f"{self.min_lesion_radius}px"
            )
        # every lesion must fit inside the slide with its margin
        if self.lesion_count[1] > 0:
            r_max = np.sqrt(hi * area / np.pi)
            if 2.8 * r_max >= self.size:
                raise ValueError(f"lesion fraction {hi} cannot fit in a {self.size}px slide")


@dataclass
class SyntheticSlide:
    image: np.ndarray  # (H, W, 3) uint8
    lesion_mask: np.ndarray  # (H, W) uint8 in {0, 1}
    slide_id: str
    seed: int
    params: SlideParams = field(default_factory=SlideParams)

    @property
    def lesion_fraction(self):
        return float(self.lesion_mask.mean())

    @property
    def has_lesion(self):
        return bool(self.lesion_mask.any())


@dataclass
class PatchRecord:
    image: np.ndarray  # (p, p, 3) uint8
    label: int  # 1 = normal, 0 = tumor
    slide_id: str
    origin: tuple  # (x, y) top-left corner in slide pixels
    split: str = ""


# ---------------------------------------------------------------------------
# texture synthesis
# ---------------------------------------------------------------------------


def smooth_noise(rng, shape, sigma):
    """Gaussian-filtered white noise rescaled to zero mean, unit std."""
    if np.ndim(sigma) == 0:
        sigma = float(sigma)
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (n - n.mean()) / (n.std() + 1e-12)


def _octaves(rng, shape, sigmas):
    total = np.zeros(shape)
    for i, s in enumerate(sigmas):
        total += smooth_noise(rng, shape, s) / (i + 1)
    return total / np.sqrt(sum(1.0 / (i + 1) ** 2 for i in range(len(sigmas))))


def _palette(rng):
    """Slide-specific eosin / hematoxylin-like colors."""
    eosin = np.array([0.90, 0.62, 0.76]) + rng.uniform(-0.05, 0.05, 3)
    hema = np.array([0.50, 0.30, 0.62]) + rng.uniform(-0.05, 0.05, 3)
    nuclei = np.array([0.28, 0.15, 0.42]) + rng.uniform(-0.03, 0.03, 3)
    return eosin, hema, nuclei


def _render(field_, nuclei, eosin, hema, nuclear_color):
    mix = 1.0 / (1.0 + np.exp(-1.5 * field_))
    rgb = eosin * (1.0 - mix)[..., None] + hema * mix[..., None]
    return np.where(nuclei[..., None], nuclear_color, rgb)


def _lesion_mask(rng, size, count, target, min_radius):
    """Union of perturbed disks whose pixel fraction lands in the target."""
    area = float(size) ** 2
    shares = rng.dirichlet(np.ones(count)) if count > 1 else np.ones(1)
    radii = np.maximum(np.sqrt(target * area * shares / np.pi), min_radius)
    margin = 1.4 * radii.max()
    centers = rng.uniform(margin, size - margin, size=(count, 2))
    harmonics = rng.uniform(-0.12, 0.12, size=(count, 3))
    phases = rng.uniform(0, 2 * np.pi, size=(count, 3))
    yy, xx = np.mgrid[0:size, 0:size]
    scale = 1.0
    mask = None
    for _ in range(12):
        mask = np.zeros((size, size), dtype=bool)
        for i in range(count):
            r0 = radii[i] * scale
            cx, cy = centers[i]
            ext = int(np.ceil(r0 * 1.5)) + 1
            y0, y1 = max(int(cy) - ext, 0), min(int(cy) + ext + 1, size)
            x0, x1 = max(int(cx) - ext, 0), min(int(cx) + ext + 1, size)
            dy = yy[y0:y1, x0:x1] - cy
            dx = xx[y0:y1, x0:x1] - cx
            theta = np.arctan2(dy, dx)
            wobble = 1.0 + sum(harmonics[i, k] * np.cos((k + 2) * theta + phases[i, k]) for k in range(3))
            mask[y0:y1, x0:x1] |= np.hypot(dx, dy) <= r0 * wobble
        frac = mask.mean()
        if abs(frac - target) <= 0.05 * target:
            break
        scale *= np.sqrt(target / max(frac, 1e-9))
    return mask


def generate_slide(seed, params=None, lesion_count=None, slide_id=None):
    """Generate one slide deterministically from ``seed``.

    ``lesion_count`` overrides the random draw from ``params.lesion_count``;
    0 yields a lesion-free slide.
    """
    params = params or SlideParams()
    params.validate()
    rng = np.random.default_rng(seed)
    size = params.size
    if lesion_count is None:
        lesion_count = int(rng.integers(params.lesion_count[0], params.lesion_count[1] + 1))
    lo, hi = params.lesion_fraction

    eosin, hema, nuclear = _palette(rng)
    tissue = _octaves(rng, (size, size), params.tissue_sigmas)
    tissue_nuc = smooth_noise(rng, (size, size), params.nuclei_sigma) > params.tissue_nuclei_threshold
    img = _render(tissue, tissue_nuc, eosin, hema, nuclear)

    mask = np.zeros((size, size), dtype=bool)
    if lesion_count > 0:
        for _ in range(20):
            target = rng.uniform(lo, hi)
            mask = _lesion_mask(rng, size, lesion_count, target, params.min_lesion_radius)
            if lo <= mask.mean() <= hi:
                break
        else:
            raise RuntimeError(f"could not place lesions within fraction band {params.lesion_fraction}")
        lesion = _octaves(rng, (size, size), params.lesion_sigmas) + 0.8
        lesion_nuc = smooth_noise(rng, (size, size), params.nuclei_sigma) > params.lesion_nuclei_threshold
        shift = np.array([-1.0, -0.6, -0.2]) * params.lesion_color_shift
        lesion_img = _render(lesion, lesion_nuc, eosin + shift, hema + shift, nuclear)
        img = np.where(mask[..., None], lesion_img, img)

    img = img + rng.normal(0.0, 0.02, img.shape)
    image = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return SyntheticSlide(
        image=image,
        lesion_mask=mask.astype(np.uint8),
        slide_id=slide_id or f"slide-{seed}",
        seed=int(seed),
        params=params,
    )


TEXTURE_CLASSES = ("coarse", "fine", "dotted", "striped")


def texture_corpus(n_per_class, size=32, classes=TEXTURE_CLASSES, seed=0):
    """Generic texture-classification images for teacher pretraining.

    Returns (images uint8 (N, size, size, 3), labels int64 (N,)). Colors are
    drawn per image so class identity is carried by texture, not palette.
    """
    if len(set(classes)) < 2:
        raise ValueError("texture corpus needs at least two distinct classes")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    pad = 16
    shape = (size + 2 * pad, size + 2 * pad)
    for label, name in enumerate(classes):
        for _ in range(n_per_class):
            eosin, hema, nuclear = _palette(rng)
            jitter = rng.uniform(-0.15, 0.15, 3)
            if name == "coarse":
                f = smooth_noise(rng, shape, rng.uniform(6, 10))
                nuc = smooth_noise(rng, shape, 1.2) > 2.2
            elif name == "fine":
                f = smooth_noise(rng, shape, rng.uniform(1.0, 2.0))
                nuc = smooth_noise(rng, shape, 1.2) > 2.2
            elif name == "dotted":
                f = smooth_noise(rng, shape, rng.uniform(4, 8)) * 0.5
                nuc = smooth_noise(rng, shape, rng.uniform(0.9, 1.5)) > rng.uniform(0.6, 1.2)
            elif name == "striped":
                sig = (rng.uniform(0.8, 1.5), rng.uniform(6, 10))
                if rng.random() < 0.5:
                    sig = sig[::-1]
                f = smooth_noise(rng, shape, sig)
                nuc = smooth_noise(rng, shape, 1.2) > 2.2
            else:
                raise ValueError(f"unknown texture class {name!r}")
            img = _render(f, nuc, eosin + jitter, hema + jitter, nuclear)[pad:-pad, pad:-pad]
            img = img + rng.normal(0.0, 0.02, img.shape)
            images.append(np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8))
            labels.append(label)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------


def window_lesion_counts(mask, patch_size, step):
    """Lesion-pixel count in every patch window on the origin grid.

    Returns (counts (gy, gx), ys, xs) where ys/xs are the grid coordinates.
    """
    h, w = mask.shape
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1)
    ys = np.arange(0, h - patch_size + 1, step)
    xs = np.arange(0, w - patch_size + 1, step)
    y0, x0 = ys[:, None], xs[None, :]
    y1, x1 = y0 + patch_size, x0 + patch_size
    counts = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
    return counts, ys, xs


def extract_patches(
    slide, n_normal, n_tumor, patch_size=64, rng=None, grid_step=4, tau_lesion=0.05, split=""
):
    """Sample labelled patches from ``slide`` without replacement on the origin grid.

    Normal crops have zero lesion overlap; tumor crops have a lesion-pixel
    fraction of at least ``tau_lesion``. ``rng`` may be a Generator or a
    pair of Generators (normal, tumor) so that the two classes draw from
    independent streams.
    """
    h, w = slide.lesion_mask.shape
    if patch_size > min(h, w):
        raise ValueError(f"patch size {patch_size} exceeds slide {slide.slide_id} of shape {(h, w)}")
    if isinstance(rng, (tuple, list)):
        rng_normal, rng_tumor = rng
    else:
        rng_normal = rng_tumor = rng if rng is not None else np.random.default_rng(0)
    counts, ys, xs = window_lesion_counts(slide.lesion_mask, patch_size, grid_step)
    min_lesion = int(np.ceil(tau_lesion * patch_size * patch_size))
    out = []
    for label, n, rng_c, ok in (
        (NORMAL, n_normal, rng_normal, counts == 0),
        (TUMOR, n_tumor, rng_tumor, counts >= min_lesion),
    ):
        if n == 0:
            continue
        cand_y, cand_x = np.nonzero(ok)
        if len(cand_y) < n:
            kind = "normal" if label == NORMAL else "tumor"
            raise ValueError(
                f"slide {slide.slide_id}: requested {n} {kind} patches but only {len(cand_y)} "
                f"candidate origins (lesion fraction {slide.lesion_fraction:.4f}, tau {tau_lesion})"
            )
        pick = np.sort(rng_c.choice(len(cand_y), size=n, replace=False))
        for idx in pick:
            y, x = int(ys[cand_y[idx]]), int(xs[cand_x[idx]])
            crop = slide.image[y : y + patch_size, x : x + patch_size].copy()
            out.append(PatchRecord(crop, label, slide.slide_id, (x, y), split))
    return out


def _spread(total, parts):
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


@dataclass
class DatasetSpec:
    n_normal_train: int = 500
    n_tumor_train: int = 50
    n_val: int = 200
    n_test: int = 1000
    n_train_slides: int = 10
    n_test_normal_slides: int = 8
    n_test_tumor_slides: int = 5
    patch_size: int = 64
    grid_step: int = 4
    tau_lesion: float = 0.05
    seed: int = 0
    slide: SlideParams = field(default_factory=SlideParams)

    def validate(self):
        for name in ("n_normal_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_tumor_train < 0:
            raise ValueError("n_tumor_train must be >= 0")
        if self.n_train_slides < 1 or self.n_test_tumor_slides < 1:
            raise ValueError(
                "need at least one train slide and one tumor test slide to keep the splits slide-disjoint"
            )
        if self.n_test_normal_slides < 0:
            raise ValueError("n_test_normal_slides must be >= 0")
        if self.patch_size > self.slide.size:
            raise ValueError(f"patch size {self.patch_size} exceeds slide size {self.slide.size}")
        self.slide.validate()

    def to_dict(self):
        return asdict(self)


def slide_layout(spec):
    """Slide ids per split with their tumor flag, in generation order."""
    layout = {"train": [(f"train-tumor-{i:02d}", True) for i in range(spec.n_train_slides)]}
    layout["val"] = [("val-normal-00", False), ("val-tumor-00", True)]
    layout["test"] = [(f"test-normal-{i:02d}", False) for i in range(spec.n_test_normal_slides)] + [
        (f"test-tumor-{i:02d}", True) for i in range(spec.n_test_tumor_slides)
    ]
    return layout


def _stream(seed, split, index, purpose):
    return np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_CODE[split], index, purpose]))


def slide_seed(seed, split, index):
    return int(np.random.SeedSequence([seed, _SPLIT_CODE[split], index, 99]).generate_state(1)[0])


@dataclass
class Dataset:
    spec: DatasetSpec
    slides: dict  # slide_id -> SyntheticSlide
    splits: dict  # split -> list[PatchRecord]

    def slide_ids(self, split):
        return sorted({p.slide_id for p in self.splits[split]} | {s for s in self.slides if s.startswith(split)})

    def arrays(self, split):
        """(images uint8 (N, p, p, 3), labels int64 (N,)) for a split."""
        recs = self.splits[split]
        if not recs:
            p = self.spec.patch_size
            return np.zeros((0, p, p, 3), np.uint8), np.zeros(0, np.int64)
        return np.stack([r.image for r in recs]), np.array([r.label for r in recs], dtype=np.int64)

    def counts(self):
        return {
            s: (sum(r.label == NORMAL for r in self.splits[s]), sum(r.label == TUMOR for r in self.splits[s]))
            for s in SPLITS
        }


def build_dataset(spec=None):
    """Generate slides and sample the train / val / test patch splits.

    Train slides all carry lesions; val uses one normal and one tumor slide;
    test uses ``n_test_normal_slides`` + ``n_test_tumor_slides``. Normal
    patches are spread over every slide of a split, tumor patches over the
    tumor slides only. Normal and tumor draws use separate RNG streams, so
    the normal set does not depend on the tumor count.
    """
    spec = spec or DatasetSpec()
    spec.validate()
    layout = slide_layout(spec)
    counts = {
        "train": (spec.n_normal_train, spec.n_tumor_train),
        "val": (spec.n_val, spec.n_val),
        "test": (spec.n_test, spec.n_test),
    }
    slides, splits = {}, {}
    for split in SPLITS:
        entries = layout[split]
        n_norm, n_tum = counts[split]
        tumor_idx = [i for i, (_, t) in enumerate(entries) if t]
        norm_share = _spread(n_norm, len(entries))
        tum_share = dict(zip(tumor_idx, _spread(n_tum, len(tumor_idx))))
        records = []
        for i, (sid, is_tumor) in enumerate(entries):
            slide = generate_slide(
                slide_seed(spec.seed, split, i), spec.slide, lesion_count=None if is_tumor else 0, slide_id=sid
            )
            slides[sid] = slide
            records += extract_patches(
                slide,
                norm_share[i],
                tum_share.get(i, 0),
                spec.patch_size,
                rng=(_stream(spec.seed, split, i, NORMAL), _stream(spec.seed, split, i, TUMOR)),
                grid_step=spec.grid_step,
                tau_lesion=spec.tau_lesion,
                split=split,
            )
        splits[split] = records
    return Dataset(spec, slides, splits)


def subset_tumor(records, k, seed):
    """Keep every normal patch and a seeded size-``k`` subset of the tumor patches."""
    tumor = [i for i, r in enumerate(records) if r.label == TUMOR]
    if k > len(tumor):
        raise ValueError(f"requested {k} tumor patches, only {len(tumor)} available")
    keep = set(np.random.default_rng(seed).permutation(tumor)[:k].tolist())
    return [r for i, r in enumerate(records) if r.label == NORMAL or i in keep]


def subset_normal(records, k, seed):
    """Keep every tumor patch and a seeded size-``k`` subset of the normal patches."""
    normal = [i for i, r in enumerate(records) if r.label == NORMAL]
    if k > len(normal):
        raise ValueError(f"requested {k} normal patches, only {len(normal)} available")
    keep = set(np.random.default_rng(seed).permutation(normal)[:k].tolist())
    return [r for i, r in enumerate(records) if r.label == TUMOR or i in keep]


# ---------------------------------------------------------------------------
# inference tiling and stitching
# ---------------------------------------------------------------------------


def tile_origins(height, width, patch_size, stride=None):
    """Regular (x, y) grid covering the slide; the last row/column is flush with the edge."""
    stride = stride or patch_size // 2

    def axis(n):
        pos = list(range(0, n - patch_size + 1, stride))
        if pos[-1] != n - patch_size:
            pos.append(n - patch_size)
        return pos

    return np.array([(x, y) for y in axis(height) for x in axis(width)], dtype=np.int64)


def stitch_heatmap(patch_maps, slide_size):
    """Average overlapping patch maps onto the slide canvas.

    ``patch_maps`` is either a list of ((x, y), map) pairs or a tuple of
    (origins (m, 2), maps (m, p, p)). Uncovered pixels are NaN.
    """
    if isinstance(slide_size, (int, np.integer)):
        slide_size = (int(slide_size), int(slide_size))
    height, width = slide_size
    if isinstance(patch_maps, tuple) and len(patch_maps) == 2 and isinstance(patch_maps[0], np.ndarray):
        origins, tiles = patch_maps
    else:
        if not patch_maps:
            return np.full((height, width), np.nan, dtype=np.float32)
        origins = np.array([o for o, _ in patch_maps], dtype=np.int64)
        tiles = np.stack([np.asarray(m) for _, m in patch_maps])
    origins = np.asarray(origins, dtype=np.int64)
    tiles = np.asarray(tiles, dtype=np.float64)
    th, tw = tiles.shape[1:]
    bad = (
        (origins[:, 0] < 0) | (origins[:, 1] < 0) | (origins[:, 0] + tw > width) | (origins[:, 1] + th > height)
    )
    if bad.any():
        x, y = origins[np.argmax(bad)]
        raise ValueError(f"patch at origin ({x}, {y}) of size {th}x{tw} extends beyond slide {height}x{width}")
    total, count = _kernels.stitch_accumulate(tiles, origins, height, width)
    out = np.full((height, width), np.nan)
    covered = count > 0
    out[covered] = total[covered] / count[covered]
    return out.astype(np.float32)


def slide_score(patch_scores):
    """Slide-level anomaly score: the largest patch mean-score."""
    scores = np.asarray(patch_scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("slide_score needs at least one scored patch")
    return float(scores.max())
