"""Teacher encoder, one-class bottleneck and mirrored student decoder."""

from dataclasses import dataclass, asdict, field
import hashlib
import logging

import numpy as np

from .autodiff import (
    AdamState,
    ConvBlock,
    Conv2d,
    Module,
    Tensor,
    UpBlock,
    adam_step,
    backward,
    concat,
    cross_entropy,
    global_avg_pool,
)

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    num_blocks: int = 3
    channels: tuple = (16, 32, 64)
    input_size: int = 64
    in_channels: int = 3
    bottleneck_width: int = 64

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)

    def validate(self):
        if self.num_blocks != 3 or len(self.channels) != 3:
            raise ValueError(f"the encoder has exactly three blocks, got {self.num_blocks} / {self.channels}")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must be strictly increasing, got {self.channels}")
        if self.input_size % 8:
            raise ValueError(f"input_size must be divisible by 8, got {self.input_size}")

    def to_dict(self):
        return asdict(self)


def preprocess(images, mean, std, dtype=np.float32):
    """uint8 (N, H, W, 3) -> normalized float (N, 3, H, W)."""
    x = np.asarray(images, dtype=np.float64) / 255.0
    x = (x - mean) / std
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2)).astype(dtype)


class Teacher(Module):
    """Three blocks of (3x3 conv block, 1x1 stride-2 conv block)."""

    def __init__(self, config, rng, dtype=np.float32):
        config.validate()
        self.config = config
        c_prev = config.in_channels
        self.blocks = []
        for c in config.channels:
            self.blocks.append(
                _Seq(
                    ConvBlock(c_prev, c, 3, 1, 1, rng=rng, dtype=dtype),
                    ConvBlock(c, c, 1, 2, 0, rng=rng, dtype=dtype),
                )
            )
            c_prev = c
        self.norm_mean = np.zeros(config.in_channels, dtype=np.float64)
        self.norm_std = np.ones(config.in_channels, dtype=np.float64)

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class _Seq(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Bottleneck(Module):
    """Bring every scale to the coarsest grid with 1x1 stride-2 convs, concat, fuse."""

    def __init__(self, config, rng, dtype=np.float32):
        c1, c2, c3 = config.channels
        self.down1 = _Seq(ConvBlock(c1, c2, 1, 2, rng=rng, dtype=dtype), ConvBlock(c2, c3, 1, 2, rng=rng, dtype=dtype))
        self.down2 = ConvBlock(c2, c3, 1, 2, rng=rng, dtype=dtype)
        self.fuse = ConvBlock(3 * c3, config.bottleneck_width, 3, 1, 1, rng=rng, dtype=dtype)

    def forward(self, feats):
        f1, f2, f3 = feats
        return self.fuse(concat([self.down1(f1), self.down2(f2), f3], axis=1))


class Student(Module):
    """Mirror decoder: features are emitted deepest first, then reversed."""

    def __init__(self, config, rng, dtype=np.float32):
        c1, c2, c3 = config.channels
        w = config.bottleneck_width
        self.refine3 = ConvBlock(w, c3, 3, 1, 1, rng=rng, dtype=dtype)
        self.head3 = Conv2d(c3, c3, 1, rng=rng, dtype=dtype)
        self.up2 = UpBlock(c3, c2, rng=rng, dtype=dtype)
        self.refine2 = ConvBlock(c2, c2, 3, 1, 1, rng=rng, dtype=dtype)
        self.head2 = Conv2d(c2, c2, 1, rng=rng, dtype=dtype)
        self.up1 = UpBlock(c2, c1, rng=rng, dtype=dtype)
        self.refine1 = ConvBlock(c1, c1, 3, 1, 1, rng=rng, dtype=dtype)
        self.head1 = Conv2d(c1, c1, 1, rng=rng, dtype=dtype)

    def forward(self, psi):
        h3 = self.refine3(psi)
        h2 = self.refine2(self.up2(h3))
        h1 = self.refine1(self.up1(h2))
        return [self.head1(h1), self.head2(h2), self.head3(h3)]


@dataclass
class RdModel:
    config: EncoderConfig
    teacher: Teacher
    bottleneck: Bottleneck
    student: Student
    seed: int = 0
    teacher_seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.teacher.blocks[0].layers[0].conv.weight.dtype

    def trainable(self):
        return self.bottleneck.trainable() + self.student.trainable()

    def train(self, mode=True):
        self.bottleneck.train(mode)
        self.student.train(mode)
        self.teacher.eval()
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        state = self.teacher.state_dict("teacher.")
        state.update(self.bottleneck.state_dict("bottleneck."))
        state.update(self.student.state_dict("student."))
        return state

    def load_state_dict(self, state):
        self.teacher.load_state_dict(state, "teacher.")
        self.bottleneck.load_state_dict(state, "bottleneck.")
        self.student.load_state_dict(state, "student.")

    def preprocess(self, images):
        return preprocess(images, self.teacher.norm_mean, self.teacher.norm_std, self.dtype)


def teacher_checksum(teacher):
    h = hashlib.sha256()
    for name, arr in sorted(teacher.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def pretrain_teacher(
    images, labels, config=None, seed=0, epochs=6, batch_size=32, lr=2e-3, dtype=np.float32, return_head=False
):
    """Train the encoder as a small texture classifier, drop the head and freeze.

    ``images`` are uint8 (N, s, s, 3); the texture size need not match the
    patch size because the encoder is fully convolutional. Per-channel
    normalization statistics of the corpus are stored on the teacher.
    """
    config = config or EncoderConfig()
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("teacher pretraining needs at least two texture classes")
    rng = np.random.default_rng(seed)
    teacher = Teacher(config, rng, dtype)
    head = Conv2d(config.channels[-1], int(classes.max()) + 1, 1, rng=rng, dtype=dtype)
    pix = np.asarray(images, dtype=np.float64).reshape(-1, 3) / 255.0
    teacher.norm_mean = pix.mean(axis=0)
    teacher.norm_std = pix.std(axis=0) + 1e-6
    x_all = preprocess(images, teacher.norm_mean, teacher.norm_std, dtype)

    params = [p for _, p in teacher.trainable() + head.trainable()]
    state = AdamState.for_params(params, lr=lr, betas=(0.9, 0.999))
    teacher.train()
    n = len(labels)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            feats = teacher(Tensor(x_all[idx]))
            logits = head(global_avg_pool(feats[-1]))
            loss = cross_entropy(logits, labels[idx])
            for p in params:
                p.grad = None
            backward(loss)
            adam_step(params, [p.grad for p in params], state)
            total += float(loss.data) * len(idx)
        log.info("teacher pretrain epoch %d loss %.4f", epoch, total / n)
    teacher.eval()
    teacher.freeze()
    if return_head:
        head.freeze()
        return teacher, head
    return teacher


def teacher_accuracy(teacher, head, images, labels, batch_size=128):
    preds = []
    x = preprocess(images, teacher.norm_mean, teacher.norm_std, teacher.blocks[0].layers[0].conv.weight.dtype)
    teacher.eval()
    for s in range(0, len(x), batch_size):
        logits = head(global_avg_pool(teacher(Tensor(x[s : s + batch_size]))[-1]))
        preds.append(logits.data.reshape(logits.shape[0], -1).argmax(axis=1))
    return float(np.mean(np.concatenate(preds) == np.asarray(labels)))


def build_model(teacher, seed=0, teacher_seed=0):
    """Attach a fresh bottleneck and student (seeded) to a frozen teacher."""
    config = teacher.config
    dtype = teacher.blocks[0].layers[0].conv.weight.dtype
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    teacher.eval()
    teacher.freeze()
    return RdModel(config, teacher, Bottleneck(config, rng, dtype), Student(config, rng, dtype), seed, teacher_seed)


def random_teacher(config=None, seed=0, dtype=np.float32):
    """An untrained frozen teacher; used by tests that only need shapes and gradients."""
    config = config or EncoderConfig()
    teacher = Teacher(config, np.random.default_rng(seed), dtype)
    teacher.eval()
    return teacher.freeze()


def teacher_forward(model, patch):
    """Frozen multi-scale teacher features [f1, f2, f3] in eval mode."""
    teacher = model.teacher if isinstance(model, RdModel) else model
    x = patch if isinstance(patch, Tensor) else Tensor(patch)
    cfg = teacher.config
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.input_size, cfg.input_size):
        raise ValueError(
            f"teacher expects (n, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}) input, got {x.shape}"
        )
    teacher.eval()
    return teacher(x)


def bottleneck_forward(model, features):
    return model.bottleneck(features)


def student_forward(model, psi):
    return model.student(psi)
