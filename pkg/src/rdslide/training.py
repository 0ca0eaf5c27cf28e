"""Distillation training with validation-based checkpoint selection."""

from dataclasses import dataclass, field, replace
import logging

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, backward
from .inference import score_patches, teacher_features
from .loss import LossConfig, distill_loss
from .metrics import accuracy, calibrate_threshold
from .slides import TUMOR

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "loss", "val_accuracy", "val_threshold")


class TrainingDiverged(FloatingPointError):
    pass


def alpha_for_counts(n_normal, n_tumor):
    """Normal-class weight following the tumor share; 1.0 when there are no tumor patches."""
    if n_tumor == 0:
        return 1.0
    return n_tumor / (n_tumor + n_normal)


def effective_loss_config(loss, labels):
    """Without tumor patches only the normal branch exists, weighted 1."""
    if not np.any(np.asarray(labels) == TUMOR):
        return replace(loss, alpha=1.0)
    return loss


@dataclass
class SplitCache:
    """Normalized inputs and frozen teacher features for one split."""

    labels: np.ndarray
    feats: list
    images: np.ndarray = None

    @classmethod
    def build(cls, model, images, labels, batch_size=64):
        x = model.preprocess(images) if len(images) else np.zeros((0, 3, 1, 1), model.dtype)
        feats = teacher_features(model, x, batch_size) if len(images) else [np.zeros((0,))] * 3
        return cls(np.asarray(labels, dtype=np.int64), feats, images)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return SplitCache(self.labels[idx], [f[idx] for f in self.feats], None)

    def __len__(self):
        return len(self.labels)


@dataclass
class TrainResult:
    best_epoch: int
    best_val_accuracy: float
    best_threshold: float
    best_state: dict
    log: list = field(default_factory=list)
    loss_config: LossConfig = None


def evaluate_split(model, cache, threshold=None):
    """Mean scores on a cached split; calibrates the threshold when none is given."""
    scores = score_patches(model, None, teacher_feats=cache.feats) if len(cache) else np.zeros(0)
    truths = cache.labels == TUMOR
    if threshold is None:
        threshold, acc = calibrate_threshold(scores, truths)
    else:
        acc = accuracy(scores > threshold, truths)
    return scores, threshold, acc


def train_step(model, params, state, feats, labels, loss_config, names=None):
    tf = [Tensor(f) for f in feats]
    student = model.student(model.bottleneck(tf))
    loss, _ = distill_loss(tf, student, labels, loss_config)
    for p in params:
        p.grad = None
    backward(loss)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite training loss {value}")
    adam_step(params, [p.grad for p in params], state, names)
    return value


def train_rd(
    model,
    train,
    val,
    loss_config=None,
    optim=None,
    seed=0,
    threshold_mode="calibrated",
    fixed_threshold=2.0,
    on_epoch=None,
):
    """Train bottleneck + student on cached splits; keep the best validation epoch.

    ``train`` and ``val`` are SplitCache objects. The model ends up holding
    the best-epoch weights. If the loss diverges the best weights so far are
    restored before TrainingDiverged propagates.
    """
    from .config import OptimConfig

    optim = optim or OptimConfig()
    loss_config = effective_loss_config(loss_config or LossConfig(), train.labels).validate()
    params = [p for _, p in model.trainable()]
    names = [n for n, _ in model.trainable()]
    state = AdamState.for_params(params, lr=optim.lr, betas=(optim.beta1, optim.beta2))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    n = len(train)
    best = TrainResult(-1, -1.0, float("nan"), None, [], loss_config)
    for epoch in range(1, optim.epochs + 1):
        model.train()
        order = rng.permutation(n)
        total, seen = 0.0, 0
        try:
            for s in range(0, n, optim.batch_size):
                idx = order[s : s + optim.batch_size]
                batch = [f[idx] for f in train.feats]
                total += train_step(model, params, state, batch, train.labels[idx], loss_config, names) * len(idx)
                seen += len(idx)
        except (TrainingDiverged, FloatingPointError) as exc:
            if best.best_state is not None:
                model.load_state_dict(best.best_state)
            model.eval()
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        model.eval()
        thr = fixed_threshold if threshold_mode == "fixed" else None
        _, thr, acc = evaluate_split(model, val, thr)
        row = (epoch, total / max(seen, 1), acc, thr)
        best.log.append(row)
        log.info("epoch %d loss %.5f val_acc %.4f thr %.5f", *row)
        if on_epoch:
            on_epoch(row)
        if acc > best.best_val_accuracy:
            best.best_epoch, best.best_val_accuracy, best.best_threshold = epoch, acc, thr
            best.best_state = {k: v.copy() for k, v in model.state_dict().items()}
    model.load_state_dict(best.best_state)
    model.eval()
    return best
