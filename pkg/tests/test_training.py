import numpy as np
import pytest

from rdslide.autodiff import AdamState, Tensor
from rdslide.config import OptimConfig
from rdslide.loss import LossConfig
from rdslide.model import EncoderConfig, build_model, random_teacher
from rdslide.slides import NORMAL, TUMOR
from rdslide.training import (
    SplitCache,
    TrainingDiverged,
    alpha_for_counts,
    effective_loss_config,
    train_rd,
    train_step,
)

from _oracles import focal_loss_oracle

TINY = EncoderConfig(channels=(4, 8, 16), input_size=16, bottleneck_width=8)


def _np_cosine(f, g):
    num = (f * g).sum(axis=1)
    den = np.maximum(np.linalg.norm(f, axis=1), 1e-8) * np.maximum(np.linalg.norm(g, axis=1), 1e-8)
    return num / den


def _cache(model, n, seed, tumor_every=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (n, 16, 16, 3), dtype=np.uint8)
    if tumor_every:
        labels = np.where(np.arange(n) % tumor_every == 0, TUMOR, NORMAL)
        # give tumor patches a visible offset so the task is learnable
        images[labels == TUMOR] = np.clip(images[labels == TUMOR].astype(int) // 2 + 120, 0, 255)
    else:
        labels = np.full(n, NORMAL)
    return SplitCache.build(model, images, labels)


def test_alpha_for_counts():
    assert alpha_for_counts(500, 0) == 1.0
    assert alpha_for_counts(500, 50) == pytest.approx(50 / 550)
    assert alpha_for_counts(50, 50) == 0.5


def test_effective_config_switches_to_normal_branch():
    cfg = LossConfig(alpha=0.1, gamma=2.0)
    assert effective_loss_config(cfg, [NORMAL] * 4).alpha == 1.0
    assert effective_loss_config(cfg, [NORMAL, TUMOR]).alpha == 0.1


@pytest.mark.parametrize("seed", range(5))
def test_zero_tumor_batch_loss_is_normal_branch(seed):
    model = build_model(random_teacher(TINY, seed, np.float64), seed).train()
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 3, 16, 16))
    feats = [f.data for f in model.teacher(Tensor(x))]
    labels = np.full(6, NORMAL)
    cfg = effective_loss_config(LossConfig(alpha=0.1, gamma=2.0), labels)
    # oracle from a separate forward pass on the same weights
    student = [s.data for s in model.student(model.bottleneck([Tensor(f) for f in feats]))]
    sims = [np.clip(_np_cosine(f, s), 1e-4, 1 - 1e-4) for f, s in zip(feats, student)]
    branch = np.mean([sum(np.mean(-((1 - m[i]) ** 2) * np.log(m[i])) for m in sims) for i in range(6)])
    assert abs(branch - focal_loss_oracle(sims, labels, 1.0, 2.0)) < 1e-12
    params = [p for _, p in model.trainable()]
    got = train_step(model, params, AdamState.for_params(params), feats, labels, cfg)
    assert abs(got - branch) < 1e-9


def test_train_rd_logs_and_restores_best():
    model = build_model(random_teacher(TINY, 0), 0)
    train, val = _cache(model, 24, 0, tumor_every=4), _cache(model, 16, 1, tumor_every=2)
    rows = []
    res = train_rd(model, train, val, LossConfig(), OptimConfig(lr=3e-3, batch_size=8, epochs=3), seed=0,
                   on_epoch=rows.append)
    assert [r[0] for r in rows] == [1, 2, 3] and rows == res.log
    assert res.best_val_accuracy == max(r[2] for r in rows)
    assert res.best_epoch == 1 + [r[2] for r in rows].index(res.best_val_accuracy)
    for k, v in model.state_dict().items():
        assert np.array_equal(v, res.best_state[k])


def test_training_is_deterministic():
    def run():
        model = build_model(random_teacher(TINY, 0), 0)
        train, val = _cache(model, 24, 0, tumor_every=4), _cache(model, 16, 1, tumor_every=2)
        res = train_rd(model, train, val, LossConfig(), OptimConfig(batch_size=8, epochs=2), seed=5)
        return res.log, model.state_dict()

    (la, sa), (lb, sb) = run(), run()
    assert la == lb
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_fixed_threshold_mode():
    model = build_model(random_teacher(TINY, 0), 0)
    train, val = _cache(model, 16, 0), _cache(model, 16, 1, tumor_every=2)
    res = train_rd(model, train, val, optim=OptimConfig(batch_size=8, epochs=1), threshold_mode="fixed",
                   fixed_threshold=2.0)
    assert res.best_threshold == 2.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_restores_best_weights():
    model = build_model(random_teacher(TINY, 0), 0)
    train, val = _cache(model, 16, 0), _cache(model, 16, 1, tumor_every=2)
    snaps = []

    def poison(row):
        snaps.append({k: v.copy() for k, v in model.state_dict().items()})
        train.feats[2][:] = np.nan

    with pytest.raises(TrainingDiverged, match="epoch 2"):
        train_rd(model, train, val, optim=OptimConfig(batch_size=8, epochs=3), on_epoch=poison)
    for k, v in model.state_dict().items():
        assert np.array_equal(v, snaps[0][k], equal_nan=True)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_in_first_epoch():
    model = build_model(random_teacher(TINY, 0), 0)
    train, val = _cache(model, 16, 0), _cache(model, 16, 1, tumor_every=2)
    train.feats[0][:] = np.inf
    with pytest.raises(TrainingDiverged):
        train_rd(model, train, val, optim=OptimConfig(batch_size=8, epochs=1))


def test_normal_only_training_raises_train_similarity():
    from rdslide.inference import model_maps
    from rdslide.slides import SlideParams, generate_slide

    model = build_model(random_teacher(TINY, 0), 0)
    slide = generate_slide(0, SlideParams(size=128), lesion_count=0)
    images = np.stack([slide.image[y : y + 16, x : x + 16] for y in range(0, 112, 8) for x in range(0, 112, 8)])
    train = SplitCache.build(model, images, np.full(len(images), NORMAL))
    val = _cache(model, 16, 1, tumor_every=2)
    means = []

    def record(row):
        sims = model_maps(model, None, train.feats)
        means.append(float(np.mean([s.mean() for s in sims])))

    train_rd(model, train, val, optim=OptimConfig(lr=3e-3, batch_size=16, epochs=6), on_epoch=record)
    # allow single-epoch noise, require the overall trend
    assert means[-1] > means[0] + 0.05
    assert sum(b > a for a, b in zip(means, means[1:])) >= len(means) - 2
