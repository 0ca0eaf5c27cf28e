"""On-disk formats: RDHM rasters, checkpoints, manifests and CSV reports.

RDHM layout (little endian)::

    magic     4 bytes  b"RDHM"
    version   u16      1
    dtype     u8       0 = uint8, 1 = float32
    height    u32
    width     u32
    channels  u32
    payload   height * width * channels values, row-major (H, W, C)
"""

import csv
import io
import json
import struct

import numpy as np

from . import config as config_mod
from .model import Bottleneck, EncoderConfig, RdModel, Student, Teacher

RDHM_MAGIC = b"RDHM"
RDHM_VERSION = 1
_HEADER = struct.Struct("<4sHBIII")
_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}
_TAGS = {np.dtype("uint8"): 0, np.dtype("float32"): 1}

CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def encode_rdhm(array):
    a = np.asarray(array)
    if a.dtype not in _TAGS:
        raise FormatError(f"RDHM stores uint8 or float32, got {a.dtype}")
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise FormatError(f"RDHM stores (H, W) or (H, W, C) arrays, got shape {a.shape}")
    h, w, c = a.shape
    header = _HEADER.pack(RDHM_MAGIC, RDHM_VERSION, _TAGS[a.dtype], h, w, c)
    return header + np.ascontiguousarray(a, dtype=_DTYPES[_TAGS[a.dtype]]).tobytes()


def decode_rdhm(blob, squeeze=True):
    if len(blob) < _HEADER.size:
        raise FormatError("RDHM blob shorter than its header")
    magic, version, tag, h, w, c = _HEADER.unpack_from(blob)
    if magic != RDHM_MAGIC:
        raise FormatError(f"bad RDHM magic {magic!r}")
    if version != RDHM_VERSION:
        raise FormatError(f"unsupported RDHM version {version}")
    if tag not in _DTYPES:
        raise FormatError(f"unknown RDHM dtype tag {tag}")
    dt = _DTYPES[tag]
    expected = h * w * c * dt.itemsize
    payload = blob[_HEADER.size :]
    if len(payload) != expected:
        raise FormatError(f"RDHM payload has {len(payload)} bytes, header implies {expected}")
    a = np.frombuffer(payload, dtype=dt).reshape(h, w, c).astype(dt.newbyteorder("="))
    return a[:, :, 0] if squeeze and c == 1 else a


def write_rdhm(path, array):
    with open(path, "wb") as fh:
        fh.write(encode_rdhm(array))


def read_rdhm(path, squeeze=True):
    with open(path, "rb") as fh:
        return decode_rdhm(fh.read(), squeeze)


def export_png(path, array):
    """8-bit preview; float maps are min-max scaled and NaN drawn black."""
    from PIL import Image

    a = np.asarray(array)
    if a.dtype != np.uint8:
        a = a.astype(np.float64)
        finite = np.isfinite(a)
        lo, hi = (a[finite].min(), a[finite].max()) if finite.any() else (0.0, 1.0)
        a = np.where(finite, (a - lo) / (hi - lo + 1e-12), 0.0)
        a = np.round(a * 255).astype(np.uint8)
    Image.fromarray(a).save(path)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, tensors, meta):
    """Named arrays plus a JSON metadata record in one uncompressed npz."""
    meta = dict(meta, format_version=CHECKPOINT_VERSION)
    arrays = {k: np.asarray(v) for k, v in tensors.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise FormatError(f"{path}: not a checkpoint (no metadata)")
        meta = json.loads(z["__meta__"].tobytes().decode())
        version = meta.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: checkpoint version {version} != supported {CHECKPOINT_VERSION}")
        tensors = {k: z[k] for k in z.files if k != "__meta__"}
    return tensors, meta


def save_teacher(path, teacher, seed):
    save_checkpoint(
        path,
        teacher.state_dict("teacher."),
        {"kind": "teacher", "encoder": teacher.config.to_dict(), "teacher_seed": int(seed)},
    )


def load_teacher(path):
    tensors, meta = load_checkpoint(path)
    cfg = EncoderConfig(**meta["encoder"])
    dtype = tensors["teacher.blocks.0.layers.0.conv.weight"].dtype
    teacher = Teacher(cfg, np.random.default_rng(0), dtype)
    teacher.load_state_dict(tensors, "teacher.")
    teacher.eval()
    teacher.freeze()
    return teacher, meta


def save_model(path, model, run_config=None, **meta):
    record = {
        "kind": "rd-model",
        "encoder": model.config.to_dict(),
        "teacher_seed": int(model.teacher_seed),
        "seed": int(model.seed),
    }
    if run_config is not None:
        record["run_config"] = config_mod.dumps(run_config)
    record.update(meta)
    save_checkpoint(path, model.state_dict(), record)


def load_model(path):
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "rd-model":
        raise FormatError(f"{path}: expected an rd-model checkpoint, found {meta.get('kind')!r}")
    cfg = EncoderConfig(**meta["encoder"])
    dtype = tensors["teacher.blocks.0.layers.0.conv.weight"].dtype
    rng = np.random.default_rng(0)
    model = RdModel(
        cfg,
        Teacher(cfg, rng, dtype),
        Bottleneck(cfg, rng, dtype),
        Student(cfg, rng, dtype),
        seed=meta.get("seed", 0),
        teacher_seed=meta.get("teacher_seed", 0),
    )
    model.load_state_dict(tensors)
    model.teacher.freeze()
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# manifests and CSV
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = ("split", "slide_id", "x", "y", "label", "path")


def patch_path(record):
    x, y = record.origin
    return f"patches/{record.split}/{record.slide_id}_{x}_{y}.rdhm"


def manifest_text(dataset):
    buf = io.StringIO()
    buf.write("\t".join(MANIFEST_FIELDS) + "\n")
    for split in ("train", "val", "test"):
        for r in dataset.splits[split]:
            x, y = r.origin
            buf.write(f"{split}\t{r.slide_id}\t{x}\t{y}\t{r.label}\t{patch_path(r)}\n")
    return buf.getvalue()


def read_manifest(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != MANIFEST_FIELDS:
            raise FormatError(f"{path}: unexpected manifest header {header}")
        for line in fh:
            split, sid, x, y, label, p = line.rstrip("\n").split("\t")
            rows.append({"split": split, "slide_id": sid, "x": int(x), "y": int(y), "label": int(label), "path": p})
    return rows


def fmt_float(v):
    if v is None or v == "":
        return ""
    return repr(float(v))


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
