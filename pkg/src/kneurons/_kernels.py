"""Loop-heavy kernels with an optional numba path.

Set ``KNEURONS_NUMBA=0`` to force the pure Python/numpy path. Both paths
must agree: the loop kernels are the same source (interpreted vs. compiled)
and ``bilinear_resize`` has a vectorized numpy twin.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit as _numba_njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional
    _HAS_NUMBA = False

USE_NUMBA = _HAS_NUMBA and os.environ.get("KNEURONS_NUMBA", "1") not in ("0", "false", "no")


def _identity(fn):
    return fn


njit = _numba_njit(cache=True, nogil=True) if USE_NUMBA else _identity

KNOWN, BAND, INSIDE = 0, 1, 2
_BIG = 1.0e6


# ---------------------------------------------------------------------------
# binary min-heap keyed on (distance, flat index)
# ---------------------------------------------------------------------------


@njit
def _heap_less(ht, hi, a, b):
    return ht[a] < ht[b] or (ht[a] == ht[b] and hi[a] < hi[b])


@njit
def _heap_push(ht, hi, n, t, idx):
    ht[n] = t
    hi[n] = idx
    c = n
    while c > 0:
        parent = (c - 1) // 2
        if _heap_less(ht, hi, c, parent):
            ht[c], ht[parent] = ht[parent], ht[c]
            hi[c], hi[parent] = hi[parent], hi[c]
            c = parent
        else:
            break
    return n + 1


@njit
def _heap_pop(ht, hi, n):
    t, idx = ht[0], hi[0]
    n -= 1
    ht[0] = ht[n]
    hi[0] = hi[n]
    c = 0
    while True:
        left = 2 * c + 1
        right = left + 1
        m = c
        if left < n and _heap_less(ht, hi, left, m):
            m = left
        if right < n and _heap_less(ht, hi, right, m):
            m = right
        if m == c:
            break
        ht[c], ht[m] = ht[m], ht[c]
        hi[c], hi[m] = hi[m], hi[c]
        c = m
    return t, idx, n


# ---------------------------------------------------------------------------
# Telea fast-marching inpainting
# ---------------------------------------------------------------------------


@njit
def _solve_pair(T, flags, H, W, i1, j1, i2, j2):
    ok1 = 0 <= i1 < H and 0 <= j1 < W and flags[i1, j1] != INSIDE
    ok2 = 0 <= i2 < H and 0 <= j2 < W and flags[i2, j2] != INSIDE
    if ok1 and ok2:
        t1 = T[i1, j1]
        t2 = T[i2, j2]
        d = 2.0 - (t1 - t2) * (t1 - t2)
        if d > 0.0:
            r = np.sqrt(d)
            s = (t1 + t2 - r) / 2.0
            if s >= t1 and s >= t2:
                return s
            s += r
            if s >= t1 and s >= t2:
                return s
        return 1.0 + min(t1, t2)
    if ok1:
        return 1.0 + T[i1, j1]
    if ok2:
        return 1.0 + T[i2, j2]
    return _BIG


@njit
def _eikonal(T, flags, H, W, i, j):
    a = _solve_pair(T, flags, H, W, i - 1, j, i, j - 1)
    b = _solve_pair(T, flags, H, W, i + 1, j, i, j + 1)
    c = _solve_pair(T, flags, H, W, i - 1, j, i, j + 1)
    d = _solve_pair(T, flags, H, W, i + 1, j, i, j - 1)
    return min(min(a, b), min(c, d))


@njit
def _grad_t(T, flags, H, W, i, j):
    gi = 0.0
    gj = 0.0
    up = i - 1 >= 0 and flags[i - 1, j] != INSIDE
    dn = i + 1 < H and flags[i + 1, j] != INSIDE
    lf = j - 1 >= 0 and flags[i, j - 1] != INSIDE
    rt = j + 1 < W and flags[i, j + 1] != INSIDE
    if up and dn:
        gi = (T[i + 1, j] - T[i - 1, j]) * 0.5
    elif dn:
        gi = T[i + 1, j] - T[i, j]
    elif up:
        gi = T[i, j] - T[i - 1, j]
    if lf and rt:
        gj = (T[i, j + 1] - T[i, j - 1]) * 0.5
    elif rt:
        gj = T[i, j + 1] - T[i, j]
    elif lf:
        gj = T[i, j] - T[i, j - 1]
    return gi, gj


@njit
def _fill_pixel(img, T, flags, H, W, i, j, radius):
    C = img.shape[2]
    gi, gj = _grad_t(T, flags, H, W, i, j)
    gn = np.sqrt(gi * gi + gj * gj)
    acc = np.zeros(C)
    wsum = 0.0
    plain = np.zeros(C)
    count = 0
    r2 = radius * radius
    for di in range(-radius, radius + 1):
        ii = i + di
        if ii < 0 or ii >= H:
            continue
        for dj in range(-radius, radius + 1):
            jj = j + dj
            if jj < 0 or jj >= W or (di == 0 and dj == 0):
                continue
            if flags[ii, jj] == INSIDE:
                continue
            d2 = di * di + dj * dj
            if d2 > r2:
                continue
            dist = np.sqrt(d2)
            # r points from the neighbor to the pixel being filled
            ri = -di / dist
            rj = -dj / dist
            if gn > 0.0:
                w_dir = abs(ri * gi + rj * gj) / gn
            else:
                w_dir = 1.0
            w_dir = max(w_dir, 1e-6)
            w_dst = 1.0 / d2
            w_lev = 1.0 / (1.0 + abs(T[ii, jj] - T[i, j]))
            w = w_dir * w_dst * w_lev
            for c in range(C):
                acc[c] += w * img[ii, jj, c]
                plain[c] += img[ii, jj, c]
            wsum += w
            count += 1
    if wsum > 0.0:
        for c in range(C):
            img[i, j, c] = acc[c] / wsum
    elif count > 0:
        for c in range(C):
            img[i, j, c] = plain[c] / count


@njit
def telea_fill(img, mask, radius):
    """Fill ``mask`` pixels of float image ``img`` (H, W, C) in place.

    Pixels are visited in fast-marching order of their distance to the known
    region; each takes a weighted mean of known pixels within ``radius``.
    """
    H, W = mask.shape
    flags = np.zeros((H, W), dtype=np.int8)
    T = np.zeros((H, W))
    cap = 4 * H * W + 4
    ht = np.empty(cap)
    hi = np.empty(cap, dtype=np.int64)
    n = 0
    for i in range(H):
        for j in range(W):
            if mask[i, j]:
                flags[i, j] = INSIDE
                T[i, j] = _BIG
    for i in range(H):
        for j in range(W):
            if flags[i, j] != KNOWN:
                continue
            touches = False
            if i > 0 and flags[i - 1, j] == INSIDE:
                touches = True
            if i + 1 < H and flags[i + 1, j] == INSIDE:
                touches = True
            if j > 0 and flags[i, j - 1] == INSIDE:
                touches = True
            if j + 1 < W and flags[i, j + 1] == INSIDE:
                touches = True
            if touches:
                flags[i, j] = BAND
                n = _heap_push(ht, hi, n, 0.0, i * W + j)
    while n > 0:
        t, idx, n = _heap_pop(ht, hi, n)
        i = idx // W
        j = idx % W
        if flags[i, j] == KNOWN:
            continue
        flags[i, j] = KNOWN
        for k in range(4):
            ii = i + (-1 if k == 0 else (1 if k == 1 else 0))
            jj = j + (-1 if k == 2 else (1 if k == 3 else 0))
            if ii < 0 or ii >= H or jj < 0 or jj >= W:
                continue
            if flags[ii, jj] != INSIDE:
                continue
            T[ii, jj] = _eikonal(T, flags, H, W, ii, jj)
            _fill_pixel(img, T, flags, H, W, ii, jj, radius)
            flags[ii, jj] = BAND
            n = _heap_push(ht, hi, n, T[ii, jj], ii * W + jj)
    return img


# ---------------------------------------------------------------------------
# longest common subsequence
# ---------------------------------------------------------------------------


@njit
def lcs_length(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.zeros(m + 1, dtype=np.int64)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        for j in range(m + 1):
            prev[j] = cur[j]
            cur[j] = 0
    return prev[m]


# ---------------------------------------------------------------------------
# bilinear resize (align_corners=False, edge clamped)
# ---------------------------------------------------------------------------


@njit
def _bilinear_loop(grid, H, W):
    r, c = grid.shape
    out = np.empty((H, W))
    sy = r / H
    sx = c / W
    for y in range(H):
        fy = min(max((y + 0.5) * sy - 0.5, 0.0), r - 1.0)
        y0 = int(np.floor(fy))
        y1 = min(y0 + 1, r - 1)
        wy = fy - y0
        for x in range(W):
            fx = min(max((x + 0.5) * sx - 0.5, 0.0), c - 1.0)
            x0 = int(np.floor(fx))
            x1 = min(x0 + 1, c - 1)
            wx = fx - x0
            top = grid[y0, x0] * (1.0 - wx) + grid[y0, x1] * wx
            bot = grid[y1, x0] * (1.0 - wx) + grid[y1, x1] * wx
            out[y, x] = top * (1.0 - wy) + bot * wy
    return out


def _bilinear_numpy(grid: np.ndarray, H: int, W: int) -> np.ndarray:
    r, c = grid.shape
    fy = np.clip((np.arange(H) + 0.5) * (r / H) - 0.5, 0.0, r - 1.0)
    fx = np.clip((np.arange(W) + 0.5) * (c / W) - 0.5, 0.0, c - 1.0)
    y0 = np.floor(fy).astype(np.int64)
    x0 = np.floor(fx).astype(np.int64)
    y1 = np.minimum(y0 + 1, r - 1)
    x1 = np.minimum(x0 + 1, c - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]
    top = grid[y0][:, x0] * (1.0 - wx) + grid[y0][:, x1] * wx
    bot = grid[y1][:, x0] * (1.0 - wx) + grid[y1][:, x1] * wx
    return top * (1.0 - wy) + bot * wy


def bilinear_resize(grid: np.ndarray, H: int, W: int) -> np.ndarray:
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    if USE_NUMBA:
        return _bilinear_loop(grid, H, W)
    return _bilinear_numpy(grid, H, W)


# ---------------------------------------------------------------------------
# tanh-approximated GELU: forward value and local derivative
# ---------------------------------------------------------------------------

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def _gelu_numpy(x):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    out = 0.5 * x * (1.0 + t)
    deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return out, deriv


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU(x) alone, in a few in-place passes.

    numpy's vectorized tanh beats a scalar numba loop here (see
    benchmarks/bench_kernels.py), so GELU never goes through numba and model
    numerics do not depend on the KNEURONS_NUMBA flag.
    """
    x = np.asarray(x, dtype=np.float64)
    y = x * x
    y *= _GELU_C * _GELU_A
    y += _GELU_C
    y *= x
    np.tanh(y, out=y)
    y += 1.0
    y *= x
    y *= 0.5
    return y


def gelu_with_grad(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """GELU(x) and dGELU/dx elementwise."""
    return _gelu_numpy(np.asarray(x, dtype=np.float64))
