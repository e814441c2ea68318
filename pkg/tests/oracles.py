"""Independent test-side oracles.

These deliberately re-derive expected behaviour through a different route
than the library (atan2 sectors instead of coordinate comparisons, loop
convolutions instead of im2col, finite differences instead of tape rules)
so that shared bugs are unlikely.
"""

from __future__ import annotations

import math

import numpy as np

from sgctx.scenegraph import BoundingBox, SpatialPredicate


def predicate_by_angle(subject: BoundingBox, obj: BoundingBox) -> SpatialPredicate:
    """Brute-force spatial predicate straight from the angle definition."""
    s_in_o = (
        obj.x0 <= subject.x0 and obj.y0 <= subject.y0
        and obj.x1 >= subject.x1 and obj.y1 >= subject.y1
    )
    o_in_s = (
        subject.x0 <= obj.x0 and subject.y0 <= obj.y0
        and subject.x1 >= obj.x1 and subject.y1 >= obj.y1
    )
    if o_in_s:
        return SpatialPredicate.SURROUNDING
    if s_in_o:
        return SpatialPredicate.INSIDE
    dx = 0.5 * (obj.x0 + obj.x1) - 0.5 * (subject.x0 + subject.x1)
    dy = 0.5 * (obj.y0 + obj.y1) - 0.5 * (subject.y0 + subject.y1)
    theta = math.atan2(dy, dx)
    if abs(theta) <= math.pi / 4:
        return SpatialPredicate.LEFT_OF
    if math.pi / 4 < theta <= 3 * math.pi / 4:
        return SpatialPredicate.ABOVE
    if -3 * math.pi / 4 < theta < -math.pi / 4:
        return SpatialPredicate.BELOW
    return SpatialPredicate.RIGHT_OF


def conv2d_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct six-loop same-padding stride-1 true convolution
    (out[y,x] = sum_k w[k] * x[y-ky+ph, x-kx+pw])."""
    n, cin, h, wd = x.shape
    cout, cin2, kh, kw = w.shape
    assert cin == cin2
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, cout, h, wd))
    for bi in range(n):
        for co in range(cout):
            for y in range(h):
                for xx in range(wd):
                    acc = b[co]
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                sy, sx = y - ky + ph, xx - kx + pw
                                if 0 <= sy < h and 0 <= sx < wd:
                                    acc += x[bi, ci, sy, sx] * w[co, ci, ky, kx]
                    out[bi, co, y, xx] = acc
    return out


def bilinear_at(img: np.ndarray, sy: float, sx: float) -> np.ndarray:
    """Edge-clamped bilinear sample of a C,H,W array at pixel coords (sy, sx)."""
    c, h, w = img.shape
    y0 = math.floor(sy)
    x0 = math.floor(sx)
    fy = sy - y0
    fx = sx - x0

    def px(yy, xx):
        return img[:, min(max(yy, 0), h - 1), min(max(xx, 0), w - 1)]

    return (
        px(y0, x0) * (1 - fy) * (1 - fx)
        + px(y0, x0 + 1) * (1 - fy) * fx
        + px(y0 + 1, x0) * fy * (1 - fx)
        + px(y0 + 1, x0 + 1) * fy * fx
    )


def numeric_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar-valued f at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def numeric_gradient_at(f, x: np.ndarray, flat_indices, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences at selected flat coordinates only."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    out = np.zeros(len(flat_indices))
    for k, i in enumerate(flat_indices):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        out[k] = (fp - fm) / (2 * eps)
    return out


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a-n| / max(1, |a|, |n|), the usual gradcheck ratio."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
