"""Dense float64 tensors with reverse-mode differentiation and Adam.

Ops build a define-by-run graph: each Tensor keeps references to its parent
tensors and a backward rule, so the recorded graph *is* the tape (acyclic by
construction, inputs always precede consumers).  ``backward`` replays it in
reverse topological order.  There is no global state, so evaluations of
disjoint graphs are safe to run concurrently.

Broadcasting is deliberately limited to scalar*tensor; everything else goes
through explicit reshape/tile/concat ops to keep the correctness surface
small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class AdamNanError(RuntimeError):
    """Raised instead of applying an update when gradients contain NaN."""


def _shape_check(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {[tuple(s) for s in shapes]}")


class Tensor:
    """Graph node: value plus (optionally) parents and a backward rule.

    ``backward_rule(out_grad)`` returns one gradient array (or None) per
    parent.  Leaves created with requires_grad=True are trainable parameters;
    gradient computation is pruned below subgraphs that contain none.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_rule", "name")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        backward_rule: Optional[Callable] = None,
        requires_grad: Optional[bool] = None,
        name: Optional[str] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_rule = backward_rule
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every reachable tensor's .grad.

    Parameters not on the tape keep grad None (read as zeros by the
    optimizer).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_rule is None or node.grad is None:
            continue
        parent_grads = node.backward_rule(node.grad)
        for p, g in zip(node.parents, parent_grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                # copy: rules may hand back views of shared buffers
                p.grad = np.array(g, dtype=np.float64)
            else:
                p.grad += g


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    _shape_check(a.shape == b.shape, "add", a.shape, b.shape)
    return Tensor(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _shape_check(a.shape == b.shape, "sub", a.shape, b.shape)
    return Tensor(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _shape_check(a.shape == b.shape, "mul", a.shape, b.shape)
    return Tensor(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data + c, (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _shape_check(
        a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0],
        "matmul", a.shape, b.shape,
    )
    return Tensor(
        a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g)
    )


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (N,D) @ w (D,M) + row bias b (M,)."""
    _shape_check(
        x.data.ndim == 2 and w.data.ndim == 2 and x.shape[1] == w.shape[0]
        and b.shape == (w.shape[1],),
        "linear", x.shape, w.shape, b.shape,
    )
    return Tensor(
        x.data @ w.data + b.data,
        (x, w, b),
        lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return Tensor(out, (x,), lambda g: (g * (x.data > 0),))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    out = np.where(x.data > 0, x.data, alpha * x.data)
    return Tensor(out, (x,), lambda g: (g * np.where(x.data > 0, 1.0, alpha),))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor(out, (x,), lambda g: (g * (1.0 - out * out),))


def log(x: Tensor) -> Tensor:
    return Tensor(np.log(x.data), (x,), lambda g: (g / x.data,))


def absval(x: Tensor) -> Tensor:
    return Tensor(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor(out, (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions / rearrangement


def sum_all(x: Tensor) -> Tensor:
    return Tensor(x.data.sum(), (x,), lambda g: (np.full_like(x.data, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return Tensor(
        x.data.sum() / n, (x,), lambda g: (np.full_like(x.data, float(g) / n),)
    )


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return Tensor(out, (x,), rule)


def sum_rows_exact(x: Tensor) -> Tensor:
    """Column sums of a (N, D) matrix via math.fsum.

    fsum is correctly rounded, so the result is independent of row order --
    this is what makes sum-pooled context embeddings exactly permutation
    invariant.
    """
    _shape_check(x.data.ndim == 2, "sum_rows_exact", x.shape)
    out = np.array([math.fsum(col) for col in x.data.T])
    return Tensor(
        out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),)
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Tensor(
        x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),)
    )


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, tuple(parts), rule)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather; doubles as embedding lookup."""
    idx = np.asarray(idx, dtype=np.int64)

    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor(x.data[idx], (x,), rule)


def scatter_mean(rows: Tensor, dst: np.ndarray, num_rows: int) -> Tensor:
    """Average rows (E, D) into destination rows (num_rows, D) by index."""
    dst = np.asarray(dst, dtype=np.int64)
    _shape_check(rows.data.ndim == 2 and dst.shape == (rows.shape[0],),
                 "scatter_mean", rows.shape, dst.shape)
    counts = np.bincount(dst, minlength=num_rows).astype(np.float64)
    if (counts == 0).any():
        missing = np.nonzero(counts == 0)[0][:5]
        raise ShapeError(
            f"scatter_mean: destination rows {missing.tolist()} receive no "
            "contributions (node without incident edges?)"
        )
    out = np.zeros((num_rows, rows.shape[1]))
    np.add.at(out, dst, rows.data)
    out /= counts[:, None]

    def rule(g):
        return ((g / counts[:, None])[dst],)

    return Tensor(out, (rows,), rule)


def tile_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Broadcast (N, C) feature rows to an (N, C, h, w) map."""
    _shape_check(x.data.ndim == 2, "tile_spatial", x.shape)
    out = np.broadcast_to(x.data[:, :, None, None], x.shape + (h, w)).copy()
    return Tensor(out, (x,), lambda g: (g.sum(axis=(2, 3)),))


def vec_times_map(v: Tensor, m: Tensor) -> Tensor:
    """Outer product of a (D,) vector with a (1, H, W) map -> (D, H, W)."""
    _shape_check(
        v.data.ndim == 1 and m.data.ndim == 3 and m.shape[0] == 1,
        "vec_times_map", v.shape, m.shape,
    )
    out = v.data[:, None, None] * m.data[0]

    def rule(g):
        return (
            (g * m.data[0]).sum(axis=(1, 2)),
            (g * v.data[:, None, None]).sum(axis=0, keepdims=True),
        )

    return Tensor(out, (v, m), rule)


# ---------------------------------------------------------------------------
# convolution and friends


def _xcorr_raw(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1, odd-kernel, zero-padded same-size cross-correlation."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (n,cin,h,w,kh,kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, cin * kh * kw)
    out = cols @ w.reshape(cout, -1).T
    return out.reshape(n, h, wd, cout).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-size true convolution with fused channel bias.

    x: (N, Cin, H, W), w: (Cout, Cin, kh, kw) with odd kh/kw, b: (Cout,).
    Convolution, not cross-correlation: a delta input reproduces the kernel
    unflipped.  (With learned kernels the two are equivalent up to a flip.)
    """
    _shape_check(
        x.data.ndim == 4 and w.data.ndim == 4 and x.shape[1] == w.shape[1]
        and w.shape[2] % 2 == 1 and w.shape[3] % 2 == 1
        and b.shape == (w.shape[0],),
        "conv2d", x.shape, w.shape, b.shape,
    )
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    wf = w.data[:, :, ::-1, ::-1]  # convolution = correlation with flipped kernel
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, cin * kh * kw)
    out = (cols @ wf.reshape(cout, -1).T + b.data).reshape(n, h, wd, cout)
    out = out.transpose(0, 3, 1, 2)

    def rule(g):
        dw = db = dx = None
        if w.requires_grad or b.requires_grad:
            gmat = g.transpose(0, 2, 3, 1).reshape(n * h * wd, cout)
            dwf = (gmat.T @ cols).reshape(w.shape)
            dw = dwf[:, :, ::-1, ::-1]
            db = gmat.sum(axis=0)
        if x.requires_grad:
            # with the flip folded in, dX reduces to a same-size correlation
            # of g against the channel-transposed raw kernel
            dx = _xcorr_raw(g, w.data.transpose(1, 0, 2, 3))
        return (dx, dw, db)

    return Tensor(out, (x, w, b), rule)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-batch statistics over (N, H, W) for each channel, learned affine."""
    _shape_check(
        x.data.ndim == 4 and gamma.shape == (x.shape[1],)
        and beta.shape == (x.shape[1],),
        "batch_norm", x.shape, gamma.shape, beta.shape,
    )
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def rule(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data[None, :, None, None]
        dx = (
            inv / m
            * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        )
        return (dx, dgamma, dbeta)

    return Tensor(out, (x, gamma, beta), rule)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling of (N, C, H, W)."""
    _shape_check(x.data.ndim == 4, "upsample2", x.shape)
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def rule(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return Tensor(out, (x,), rule)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 average pooling (even spatial dims required)."""
    _shape_check(
        x.data.ndim == 4 and x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0,
        "avgpool2", x.shape,
    )
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def rule(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return Tensor(out, (x,), rule)


# ---------------------------------------------------------------------------
# bilinear warping


def _gather_bilinear(src: np.ndarray, sy: np.ndarray, sx: np.ndarray):
    """Edge-clamped bilinear gather from (C, h, w) at fractional pixel
    coordinates; returns sampled values plus corner indices/weights."""
    h, w = src.shape[-2:]
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = sy - y0
    fx = sx - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    vals = (
        src[:, y0c, x0c] * w00
        + src[:, y0c, x1c] * w01
        + src[:, y1c, x0c] * w10
        + src[:, y1c, x1c] * w11
    )
    return vals, (y0c, y1c, x0c, x1c, w00, w01, w10, w11)


def _scatter_bilinear(shape, g, corners):
    y0c, y1c, x0c, x1c, w00, w01, w10, w11 = corners
    out = np.zeros(shape)
    for c in range(shape[0]):
        np.add.at(out[c], (y0c, x0c), g[c] * w00)
        np.add.at(out[c], (y0c, x1c), g[c] * w01)
        np.add.at(out[c], (y1c, x0c), g[c] * w10)
        np.add.at(out[c], (y1c, x1c), g[c] * w11)
    return out


def grid_sample_into_box(
    src: Tensor,
    box: tuple[float, float, float, float],
    out_h: int,
    out_w: int,
    box_tensor: Optional[Tensor] = None,
) -> Tensor:
    """Stretch a (C, h, w) source into the box region of an (C, out_h, out_w)
    canvas; zeros outside the box, edge-clamped bilinear inside.

    Gradients flow into the source.  They flow into the box coordinates only
    when ``box_tensor`` (a 4-vector Tensor holding the same values) is given;
    box-coordinate gradients are off by default because box placement is
    trained with a direct coordinate loss.
    """
    _shape_check(src.data.ndim == 3, "grid_sample_into_box", src.shape)
    x0, y0, x1, y1 = (float(v) for v in (box if box_tensor is None else box_tensor.data))
    c, sh, sw = src.shape
    u = (np.arange(out_w) + 0.5) / out_w
    v = (np.arange(out_h) + 0.5) / out_h
    uu, vv = np.meshgrid(u, v)
    inside = (uu >= x0) & (uu < x1) & (vv >= y0) & (vv < y1)
    iy, ix = np.nonzero(inside)
    out = np.zeros((c, out_h, out_w))
    if iy.size == 0:
        if box_tensor is None:
            return Tensor(out, (src,), lambda g: (np.zeros_like(src.data),))
        return Tensor(
            out,
            (src, box_tensor),
            lambda g: (np.zeros_like(src.data), np.zeros(4)),
        )

    lu = (uu[iy, ix] - x0) / (x1 - x0)
    lv = (vv[iy, ix] - y0) / (y1 - y0)
    sx = lu * sw - 0.5
    sy = lv * sh - 0.5
    vals, corners = _gather_bilinear(src.data, sy, sx)
    out[:, iy, ix] = vals

    if box_tensor is None:

        def rule(g):
            return (_scatter_bilinear(src.shape, g[:, iy, ix], corners),)

        return Tensor(out, (src,), rule)

    def rule_with_box(g):
        gv = g[:, iy, ix]  # (C, P)
        dsrc = _scatter_bilinear(src.shape, gv, corners)
        y0c, y1c, x0c, x1c, w00, w01, w10, w11 = corners
        fy = w10 + w11
        fx = w01 + w11
        s = src.data
        dval_dsy = (
            (s[:, y1c, x0c] - s[:, y0c, x0c]) * (1 - fx)
            + (s[:, y1c, x1c] - s[:, y0c, x1c]) * fx
        )
        dval_dsx = (
            (s[:, y0c, x1c] - s[:, y0c, x0c]) * (1 - fy)
            + (s[:, y1c, x1c] - s[:, y1c, x0c]) * fy
        )
        g_sy = (gv * dval_dsy).sum(axis=0)
        g_sx = (gv * dval_dsx).sum(axis=0)
        upix = uu[iy, ix]
        vpix = vv[iy, ix]
        # sx = (u - x0)/(x1 - x0) * sw - 0.5
        dsx_dx0 = (upix - x1) / (x1 - x0) ** 2 * sw
        dsx_dx1 = -(upix - x0) / (x1 - x0) ** 2 * sw
        dsy_dy0 = (vpix - y1) / (y1 - y0) ** 2 * sh
        dsy_dy1 = -(vpix - y0) / (y1 - y0) ** 2 * sh
        dbox = np.array(
            [
                (g_sx * dsx_dx0).sum(),
                (g_sy * dsy_dy0).sum(),
                (g_sx * dsx_dx1).sum(),
                (g_sy * dsy_dy1).sum(),
            ]
        )
        return (dsrc, dbox)

    return Tensor(out, (src, box_tensor), rule_with_box)


def crop_box_bilinear(
    src: Tensor, box: tuple[float, float, float, float], out_h: int, out_w: int
) -> Tensor:
    """Resample the box region of a (C, H, W) source to (C, out_h, out_w)."""
    _shape_check(src.data.ndim == 3, "crop_box_bilinear", src.shape)
    x0, y0, x1, y1 = (float(v) for v in box)
    c, h, w = src.shape
    u = x0 + (np.arange(out_w) + 0.5) / out_w * (x1 - x0)
    v = y0 + (np.arange(out_h) + 0.5) / out_h * (y1 - y0)
    uu, vv = np.meshgrid(u, v)
    sx = uu * w - 0.5
    sy = vv * h - 0.5
    vals, corners = _gather_bilinear(src.data, sy.ravel(), sx.ravel())
    out = vals.reshape(c, out_h, out_w)

    def rule(g):
        return (_scatter_bilinear(src.shape, g.reshape(c, -1), corners),)

    return Tensor(out, (src,), rule)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of (N, K) logits against integer labels (N,)."""
    labels = np.asarray(labels, dtype=np.int64)
    _shape_check(
        logits.data.ndim == 2 and labels.shape == (logits.shape[0],),
        "softmax_cross_entropy", logits.shape, labels.shape,
    )
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    out = nll.mean()

    def rule(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1.0
        return (gl * (float(g) / n),)

    return Tensor(out, (logits,), rule)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    return mean_all(absval(sub(a, b)))


def binary_cross_entropy(p: Tensor, target: Tensor, eps: float = 1e-7) -> Tensor:
    """Pixel-wise cross entropy on probabilities, clamped to [eps, 1-eps].

    Exact predictions therefore bottom out at -log(1-eps) per pixel rather
    than zero.
    """
    pc = clamp(p, eps, 1.0 - eps)
    one_minus = add_scalar(scale(pc, -1.0), 1.0)
    t_one_minus = add_scalar(scale(target, -1.0), 1.0)
    ll = add(mul(target, log(pc)), mul(t_one_minus, log(one_minus)))
    return scale(mean_all(ll), -1.0)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Bias-corrected Adam with per-parameter moment tensors."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One in-place update.  Missing gradients count as zeros; NaN gradients
    refuse the whole step so a bad batch cannot poison the parameters."""
    grads = {}
    for p in params:
        if p.name is None:
            raise ValueError("Adam parameters must be named")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if np.isnan(g).any():
            raise AdamNanError(f"NaN gradient for parameter {p.name!r}; step refused")
        grads[p.name] = g

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p in params:
        g = grads[p.name]
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
