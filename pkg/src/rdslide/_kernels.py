"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time from ``RDSLIDE_BACKEND``
(``numba`` or ``numpy``). When the variable is unset numba is used if it
imports, numpy otherwise. Both backends are always importable by name so
tests and the benchmark can compare them directly.

Under the numba backend only the scatter-add kernels (``col2im``,
``stitch_accumulate``) dispatch to jitted code; ``im2col`` and upsampling
stay on numpy, which measures faster for them. The jitted versions of all
four remain available by name for the benchmark.

Accumulating kernels (``col2im``, ``stitch_accumulate``) add contributions
in the same order on both paths, so their outputs agree bit for bit.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the bundled TBB is often too old; omp/workqueue are fine for these loops
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _select_backend():
    requested = os.environ.get("RDSLIDE_BACKEND", "").strip().lower()
    if requested in ("", "auto"):
        return "numba" if HAVE_NUMBA else "numpy"
    if requested not in ("numba", "numpy"):
        raise ValueError(f"RDSLIDE_BACKEND must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numba" and not HAVE_NUMBA:
        raise ImportError("RDSLIDE_BACKEND=numba but numba is not importable")
    return requested


BACKEND = _select_backend()


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def im2col_numpy(x, k, stride, out_h, out_w):
    """(n, c, H, W) padded input -> (n, c*k*k, out_h*out_w) column matrix."""
    n, c = x.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    # (n, c, oh, ow, k, k) -> (n, c, k, k, oh, ow)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, out_h * out_w)


def col2im_numpy(cols, c, h, w, k, stride, out_h, out_w):
    """Adjoint of ``im2col``: scatter-add columns back into an (n, c, h, w) image."""
    n = cols.shape[0]
    cols = cols.reshape(n, c, k, k, out_h, out_w)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    he = (out_h - 1) * stride + 1
    we = (out_w - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + he : stride, j : j + we : stride] += cols[:, :, i, j]
    return out


def bilinear_weights(n_in, n_out, dtype=np.float64):
    """Interpolation matrix (n_out, n_in) for align-corners bilinear resampling."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def upsample_bilinear_numpy(maps, out_h, out_w):
    """(n, h, w) -> (n, out_h, out_w), align-corners bilinear."""
    n, h, w = maps.shape
    wy = bilinear_weights(h, out_h, maps.dtype)
    wx = bilinear_weights(w, out_w, maps.dtype)
    return np.matmul(np.matmul(wy, maps), wx.T)


def stitch_accumulate_numpy(tiles, origins, height, width):
    """Sum tile values and coverage counts onto a (height, width) canvas.

    ``origins`` holds (x, y) top-left corners, one row per tile.
    """
    total = np.zeros((height, width), dtype=np.float64)
    count = np.zeros((height, width), dtype=np.int64)
    th, tw = tiles.shape[1:]
    for t in range(tiles.shape[0]):
        x, y = int(origins[t, 0]), int(origins[t, 1])
        total[y : y + th, x : x + tw] += tiles[t]
        count[y : y + th, x : x + tw] += 1
    return total, count


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _im2col_nb(x, k, stride, out_h, out_w):
        n, c = x.shape[0], x.shape[1]
        cols = np.empty((n, c * k * k, out_h * out_w), dtype=x.dtype)
        # each (sample, channel) pair owns a disjoint block of rows
        for nc in prange(n * c):
            b = nc // c
            ch = nc % c
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for oh in range(out_h):
                        src = oh * stride + i
                        for ow in range(out_w):
                            cols[b, row, oh * out_w + ow] = x[b, ch, src, ow * stride + j]
        return cols

    @njit(cache=True, parallel=True)
    def _col2im_nb(cols, c, h, w, k, stride, out_h, out_w):
        n = cols.shape[0]
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        # same (i, j) accumulation order as the numpy path
        for nc in prange(n * c):
            b = nc // c
            ch = nc % c
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for oh in range(out_h):
                        dst = oh * stride + i
                        for ow in range(out_w):
                            out[b, ch, dst, ow * stride + j] += cols[b, row, oh * out_w + ow]
        return out

    @njit(cache=True, parallel=True)
    def _upsample_bilinear_nb(maps, out_h, out_w):
        n, h, w = maps.shape
        out = np.empty((n, out_h, out_w), dtype=maps.dtype)
        sy = (h - 1) / (out_h - 1) if out_h > 1 else 0.0
        sx = (w - 1) / (out_w - 1) if out_w > 1 else 0.0
        for b in prange(n):
            for y in range(out_h):
                py = y * sy
                y0 = min(int(np.floor(py)), max(h - 2, 0))
                fy = py - y0
                y1 = min(y0 + 1, h - 1)
                for x in range(out_w):
                    px = x * sx
                    x0 = min(int(np.floor(px)), max(w - 2, 0))
                    fx = px - x0
                    x1 = min(x0 + 1, w - 1)
                    top = maps[b, y0, x0] * (1.0 - fx) + maps[b, y0, x1] * fx
                    bot = maps[b, y1, x0] * (1.0 - fx) + maps[b, y1, x1] * fx
                    out[b, y, x] = top * (1.0 - fy) + bot * fy
        return out

    @njit(cache=True)
    def _stitch_accumulate_nb(tiles, origins, height, width):
        total = np.zeros((height, width), dtype=np.float64)
        count = np.zeros((height, width), dtype=np.int64)
        th, tw = tiles.shape[1], tiles.shape[2]
        for t in range(tiles.shape[0]):
            x0 = origins[t, 0]
            y0 = origins[t, 1]
            for y in range(th):
                for x in range(tw):
                    total[y0 + y, x0 + x] += tiles[t, y, x]
                    count[y0 + y, x0 + x] += 1
        return total, count

    def im2col_numba(x, k, stride, out_h, out_w):
        return _im2col_nb(np.ascontiguousarray(x), k, stride, out_h, out_w)

    def col2im_numba(cols, c, h, w, k, stride, out_h, out_w):
        return _col2im_nb(np.ascontiguousarray(cols), c, h, w, k, stride, out_h, out_w)

    def upsample_bilinear_numba(maps, out_h, out_w):
        return _upsample_bilinear_nb(np.ascontiguousarray(maps), out_h, out_w)

    def stitch_accumulate_numba(tiles, origins, height, width):
        return _stitch_accumulate_nb(
            np.ascontiguousarray(tiles), np.ascontiguousarray(origins, dtype=np.int64), height, width
        )

    def numba_threads():
        return numba.get_num_threads()


if BACKEND == "numba":
    # im2col and upsampling are bulk strided copies that numpy already does at
    # memory speed; the jitted loops measure slower, so only the scatter-add
    # kernels switch (see benchmarks/bench_kernels.py)
    im2col = im2col_numpy
    col2im = col2im_numba
    upsample_bilinear = upsample_bilinear_numpy
    stitch_accumulate = stitch_accumulate_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    upsample_bilinear = upsample_bilinear_numpy
    stitch_accumulate = stitch_accumulate_numpy
