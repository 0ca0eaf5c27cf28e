"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--end-to-end]

Kernel shapes match the default model (64 px patches, 16/32/64 channels,
batch 16) and one 1024 px slide tiled at stride 32. Each row also reports
the largest absolute difference between the two backends. ``--end-to-end``
additionally times a training step and a slide inference in subprocesses
with RDSLIDE_BACKEND set to each value.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from rdslide import _kernels as K


def best_of(fn, repeat):
    fn()  # warm up (and JIT compile)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    x = rng.standard_normal((16, 16, 66, 66)).astype(np.float32)
    cols = rng.standard_normal((16, 16 * 9, 64 * 64)).astype(np.float32)
    maps = rng.random((64, 16, 16))
    tiles = rng.random((961, 64, 64)).astype(np.float32)
    origins = np.array([(x_, y_) for y_ in range(0, 961, 32) for x_ in range(0, 961, 32)], dtype=np.int64)
    return {
        "im2col 16x16x66x66 k3": (K.im2col_numpy, K.im2col_numba, (x, 3, 1, 64, 64)),
        "col2im 16x144x4096 k3": (K.col2im_numpy, K.col2im_numba, (cols, 16, 66, 66, 3, 1, 64, 64)),
        "upsample 64x16x16->64": (K.upsample_bilinear_numpy, K.upsample_bilinear_numba, (maps, 64, 64)),
        "stitch 961 tiles 1024^2": (K.stitch_accumulate_numpy, K.stitch_accumulate_numba, (tiles, origins, 1024, 1024)),
    }


def max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(u, np.float64) - np.asarray(v, np.float64)))) for u, v in zip(a, b))


_E2E = """
import time, numpy as np
from rdslide import _kernels
from rdslide.model import build_model, random_teacher, EncoderConfig
from rdslide.training import SplitCache, train_step
from rdslide.inference import infer_slide
from rdslide.loss import LossConfig
from rdslide.autodiff import AdamState
from rdslide.slides import generate_slide, SlideParams
rng = np.random.default_rng(0)
model = build_model(random_teacher(EncoderConfig(), 0), seed=0)
imgs = rng.integers(0, 255, (16, 64, 64, 3), dtype=np.uint8)
labels = np.array([1] * 14 + [0] * 2)
cache = SplitCache.build(model, imgs, labels)
params = [p for _, p in model.trainable()]
state = AdamState.for_params(params, lr=1e-3)
model.train()
train_step(model, params, state, cache.feats, labels, LossConfig())
t = time.perf_counter()
for _ in range(5):
    train_step(model, params, state, cache.feats, labels, LossConfig())
step = (time.perf_counter() - t) / 5
slide = generate_slide(0, SlideParams(size=512))
model.eval()
infer_slide(model, slide.image[:128, :128])
best = float("inf")
for _ in range(3):
    t = time.perf_counter()
    infer_slide(model, slide.image)
    best = min(best, time.perf_counter() - t)
print(_kernels.BACKEND, step, best)
"""


def end_to_end():
    print()
    print(f"{'backend':<8} {'train step (b=16)':>18} {'infer 512^2 slide':>18}")
    for backend in ("numpy", "numba"):
        env = dict(os.environ, RDSLIDE_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", _E2E], env=env, capture_output=True, text=True, check=True)
        name, step, infer = out.stdout.split()
        print(f"{name:<8} {float(step) * 1e3:>15.1f} ms {float(infer):>16.2f} s")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        sys.exit("numba is not importable; nothing to compare")
    print(f"numba threads: {K.numba_threads()}")
    print(f"{'kernel':<26} {'numpy':>10} {'numba':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, (f_np, f_nb, fargs) in cases(np.random.default_rng(0)).items():
        t_np = best_of(lambda: f_np(*fargs), args.repeat)
        t_nb = best_of(lambda: f_nb(*fargs), args.repeat)
        diff = max_diff(f_np(*fargs), f_nb(*fargs))
        print(f"{name:<26} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms {t_np / t_nb:>7.1f}x {diff:>11.2e}")
    if args.end_to_end:
        end_to_end()


if __name__ == "__main__":
    main()
