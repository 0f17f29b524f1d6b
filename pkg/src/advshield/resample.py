"""Separable resampling weight matrices.

Every resampler here is a linear map, so a resize of x[c,h,w] to (h',w')
factors into two small matrices: out = R @ x @ C.T with R of shape
[h',h] and C of shape [w',w]. The builders are cached; callers must not
mutate the returned arrays.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


def _frozen(m: np.ndarray) -> np.ndarray:
    m.setflags(write=False)
    return m


@lru_cache(maxsize=1024)
def nearest_matrix(src: int, dst: int) -> np.ndarray:
    """Nearest-neighbor gather: destination row i reads source row (i*src)//dst."""
    if src < 1 or dst < 1:
        raise ValueError(f"nearest_matrix: sizes must be >= 1, got src={src} dst={dst}")
    m = np.zeros((dst, src))
    for i in range(dst):
        m[i, (i * src) // dst] = 1.0
    return _frozen(m)


@lru_cache(maxsize=1024)
def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """Bilinear weights, align-corners=false, clamped at the edges."""
    if src < 1 or dst < 1:
        raise ValueError(f"bilinear_matrix: sizes must be >= 1, got src={src} dst={dst}")
    m = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        pos = (i + 0.5) * scale - 0.5
        pos = min(max(pos, 0.0), src - 1.0)
        lo = int(np.floor(pos))
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return _frozen(m)


@lru_cache(maxsize=1024)
def box_matrix(src: int, dst: int) -> np.ndarray:
    """Exact area-overlap (box filter) weights with integer interval math.

    Destination cell i covers [i*src, (i+1)*src) and source pixel j covers
    [j*dst, (j+1)*dst) on a common integer grid, so each weight is a
    rational overlap / src. Rows sum to 1 exactly up to division rounding.
    """
    if src < 1 or dst < 1:
        raise ValueError(f"box_matrix: sizes must be >= 1, got src={src} dst={dst}")
    m = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = i * src, (i + 1) * src
        # source pixels j with [j*dst, (j+1)*dst) intersecting [lo, hi)
        j0 = lo // dst
        j1 = (hi - 1) // dst
        for j in range(j0, j1 + 1):
            overlap = min((j + 1) * dst, hi) - max(j * dst, lo)
            if overlap > 0:
                m[i, j] = overlap / src
    return _frozen(m)


@lru_cache(maxsize=1024)
def pool_matrix(n: int, k: int, s: int, ceil_mode: bool = False) -> np.ndarray:
    """Average-pooling weights along one axis.

    Strict mode requires (n - k) divisible by s; ceil mode admits one
    trailing partial window averaged over its valid cells only.
    """
    if n < 1 or k < 1 or s < 1:
        raise ValueError(f"pool_matrix: sizes must be >= 1, got n={n} k={k} s={s}")
    if ceil_mode:
        count = 1 if n <= k else (n - k + s - 1) // s + 1
    else:
        if k > n or (n - k) % s:
            raise ValueError(f"pool_matrix: kernel {k} stride {s} does not tile length {n}")
        count = (n - k) // s + 1
    m = np.zeros((count, n))
    for i in range(count):
        start = i * s
        end = min(start + k, n)
        m[i, start:end] = 1.0 / (end - start)
    return _frozen(m)
