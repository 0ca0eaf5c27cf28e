"""Run configuration and its INI-style text form.

Sections map one-to-one onto the nested dataclasses::

    [run]       seed, threshold_mode, fixed_threshold, infer_stride, out_dir
    [dataset]   DatasetSpec counts and sampling options
    [slide]     SlideParams (tuples are comma separated)
    [encoder]   EncoderConfig
    [loss]      LossConfig (alpha, gamma, eps_s)
    [optim]     learning rate, betas, batch size, epochs
    [pretrain]  teacher pretraining corpus and schedule

Unknown keys are rejected; missing keys keep their defaults.
"""

import configparser
import dataclasses
from dataclasses import dataclass, field
import io

from .loss import LossConfig
from .model import EncoderConfig
from .slides import DatasetSpec, SlideParams


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 20


@dataclass
class PretrainConfig:
    n_per_class: int = 200
    texture_size: int = 32
    epochs: int = 6
    lr: float = 2e-3
    batch_size: int = 32


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    threshold_mode: str = "calibrated"
    fixed_threshold: float = 2.0
    infer_stride: int = 32
    seed: int = 0
    out_dir: str = "runs/default"

    def validate(self):
        self.dataset.validate()
        self.encoder.validate()
        self.loss.validate()
        if self.threshold_mode not in ("calibrated", "fixed"):
            raise ValueError(f"threshold_mode must be 'calibrated' or 'fixed', got {self.threshold_mode!r}")
        if self.encoder.input_size != self.dataset.patch_size:
            raise ValueError(
                f"encoder input_size {self.encoder.input_size} != dataset patch_size {self.dataset.patch_size}"
            )
        if self.optim.batch_size < 2 or self.optim.epochs < 1:
            raise ValueError("optim needs batch_size >= 2 and epochs >= 1")
        return self

    def with_seed(self, seed):
        """Copy with every seed (run and dataset) set to ``seed``."""
        cfg = dataclasses.replace(self, seed=int(seed))
        cfg.dataset = dataclasses.replace(self.dataset, seed=int(seed))
        return cfg


_RUN_KEYS = ("seed", "threshold_mode", "fixed_threshold", "infer_stride", "out_dir")


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text, default):
    text = text.strip()
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [t for t in (s.strip() for s in text.split(",")) if t]
        proto = default[0] if default else 0.0
        return tuple(_parse(t, proto) for t in items)
    return text


def _section(obj, skip=()):
    return {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.name not in skip}


def dumps(config):
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {k: _fmt(getattr(config, k)) for k in _RUN_KEYS}
    cp["dataset"] = _section(config.dataset, skip=("slide",))
    cp["slide"] = _section(config.dataset.slide)
    cp["encoder"] = _section(config.encoder)
    cp["loss"] = _section(config.loss)
    cp["optim"] = _section(config.optim)
    cp["pretrain"] = _section(config.pretrain)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _fill(obj, items, section):
    names = {f.name for f in dataclasses.fields(obj)}
    for key, text in items:
        if key not in names or key == "slide":
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        setattr(obj, key, _parse(text, getattr(obj, key)))


def loads(text):
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    config = RunConfig()
    config.dataset.slide = SlideParams()
    targets = {
        "dataset": config.dataset,
        "slide": config.dataset.slide,
        "encoder": config.encoder,
        "loss": config.loss,
        "optim": config.optim,
        "pretrain": config.pretrain,
    }
    for section in cp.sections():
        if section == "run":
            for key, text_ in cp.items("run"):
                if key not in _RUN_KEYS:
                    raise ValueError(f"unknown key {key!r} in section [run]")
                setattr(config, key, _parse(text_, getattr(config, key)))
        elif section in targets:
            _fill(targets[section], cp.items(section), section)
        else:
            raise ValueError(f"unknown config section [{section}]")
    config.encoder.channels = tuple(config.encoder.channels)
    return config


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def save(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(config))
