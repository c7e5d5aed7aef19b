"""Differentiable operations.

Elementwise ops accept tensor-tensor (equal shape) or tensor-scalar
operands only; there is no general broadcasting. Every op validates its
output for NaN/Inf and records a backward rule on the active tape when any
input requires gradients.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, active_tape, check_finite, AutodiffError

F32 = np.float32


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=F32))


def _result(data, name, inputs, backward_fn):
    """Wrap forward output; record on the active tape when needed."""
    check_finite(data, name)
    tape = active_tape()
    rg = tape is not None and any(
        isinstance(i, Tensor) and i.requires_grad for i in inputs
    )
    out = Tensor(data, requires_grad=rg)
    if rg:
        tape.record(out, inputs, backward_fn)
    return out


def _is_scalar(x):
    return np.isscalar(x) or (isinstance(x, np.ndarray) and x.size == 1) or (
        isinstance(x, Tensor) and x.size == 1
    )


def _ew_pair(a, b, name):
    """Validate the restricted elementwise shape contract."""
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    da = a.data if ta else np.asarray(a, dtype=F32)
    db = b.data if tb else np.asarray(b, dtype=F32)
    if da.shape != db.shape and da.size != 1 and db.size != 1:
        raise AutodiffError(
            f"{name}: shapes {da.shape} and {db.shape} are neither equal nor scalar"
        )
    return da, db


def _reduce_to(g, shape):
    """Collapse a full-shape gradient onto a scalar-shaped operand."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g, dtype=F32).reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    da, db = _ew_pair(a, b, "add")
    out = da + db

    def backward(g):
        return (_reduce_to(g, da.shape), _reduce_to(g, db.shape))

    return _result(out, "add", [a, b], backward)


def sub(a, b):
    da, db = _ew_pair(a, b, "sub")
    out = da - db

    def backward(g):
        return (_reduce_to(g, da.shape), _reduce_to(-g, db.shape))

    return _result(out, "sub", [a, b], backward)


def mul(a, b):
    da, db = _ew_pair(a, b, "mul")
    out = da * db

    def backward(g):
        return (_reduce_to(g * db, da.shape), _reduce_to(g * da, db.shape))

    return _result(out, "mul", [a, b], backward)


def div(a, b):
    da, db = _ew_pair(a, b, "div")
    out = da / db

    def backward(g):
        return (
            _reduce_to(g / db, da.shape),
            _reduce_to(-g * da / (db * db), db.shape),
        )

    return _result(out, "div", [a, b], backward)


def neg(a):
    da = as_tensor(a).data

    def backward(g):
        return (-g,)

    return _result(-da, "neg", [a], backward)


def power(a, p):
    if not np.isscalar(p):
        raise AutodiffError("power: exponent must be a python scalar")
    da = as_tensor(a).data
    out = da ** F32(p)

    def backward(g):
        return (g * F32(p) * da ** F32(p - 1),)

    return _result(out, "power", [a], backward)


def exp(a):
    da = as_tensor(a).data
    out = np.exp(da)

    def backward(g):
        return (g * out,)

    return _result(out, "exp", [a], backward)


def log(a):
    da = as_tensor(a).data
    out = np.log(da)

    def backward(g):
        return (g / da,)

    return _result(out, "log", [a], backward)


def sqrt(a):
    da = as_tensor(a).data
    out = np.sqrt(da)

    def backward(g):
        return (g * F32(0.5) / out,)

    return _result(out, "sqrt", [a], backward)


def absolute(a):
    da = as_tensor(a).data
    s = np.sign(da).astype(F32)

    def backward(g):
        return (g * s,)

    return _result(np.abs(da), "abs", [a], backward)


def relu(a):
    da = as_tensor(a).data
    mask = (da > 0).astype(F32)

    def backward(g):
        return (g * mask,)

    return _result(da * mask, "relu", [a], backward)


def leaky_relu(a, slope=0.2):
    da = as_tensor(a).data
    scale = np.where(da > 0, F32(1.0), F32(slope)).astype(F32)

    def backward(g):
        return (g * scale,)

    return _result(da * scale, "leaky_relu", [a], backward)


def sigmoid(a):
    da = as_tensor(a).data
    out = 1.0 / (1.0 + np.exp(-da.astype(np.float64)))
    out = out.astype(F32)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, "sigmoid", [a], backward)


def tanh(a):
    da = as_tensor(a).data
    out = np.tanh(da)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _result(out, "tanh", [a], backward)


def softplus(a):
    da = as_tensor(a).data
    # stable: log(1+exp(x)) = max(x,0) + log1p(exp(-|x|))
    out = (np.maximum(da, 0) + np.log1p(np.exp(-np.abs(da)))).astype(F32)
    sig = (1.0 / (1.0 + np.exp(-da.astype(np.float64)))).astype(F32)

    def backward(g):
        return (g * sig,)

    return _result(out, "softplus", [a], backward)


def clip(a, lo, hi):
    """Clamp with straight-through gradient inside the bounds."""
    da = as_tensor(a).data
    out = np.clip(da, lo, hi)
    mask = ((da > lo) & (da < hi)).astype(F32)

    def backward(g):
        return (g * mask,)

    return _result(out, "clip", [a], backward)


# ----------------------------------------------------------------- reductions


def sum_all(a):
    da = as_tensor(a).data

    def backward(g):
        return (np.full_like(da, g.reshape(())),)

    return _result(np.sum(da, dtype=F32).reshape(()), "sum", [a], backward)


def mean_all(a):
    da = as_tensor(a).data
    n = F32(da.size)

    def backward(g):
        return (np.full_like(da, g.reshape(()) / n),)

    return _result(np.mean(da, dtype=F32).reshape(()), "mean", [a], backward)


def sum_axis(a, axis, keepdims=False):
    da = as_tensor(a).data
    out = np.sum(da, axis=axis, keepdims=keepdims, dtype=F32)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, da.shape).astype(F32),)

    return _result(out, "sum_axis", [a], backward)


def cumsum(a, axis):
    da = as_tensor(a).data
    out = np.cumsum(da, axis=axis, dtype=F32)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis, dtype=F32), axis),)

    return _result(out, "cumsum", [a], backward)


# -------------------------------------------------------------- shape surgery


def reshape(a, shape):
    da = as_tensor(a).data
    old = da.shape
    out = da.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _result(out, "reshape", [a], backward)


def transpose(a, axes=None):
    da = as_tensor(a).data
    out = np.ascontiguousarray(np.transpose(da, axes))
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _result(out, "transpose", [a], backward)


def concat(parts, axis):
    datas = [as_tensor(p).data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _result(out, "concat", list(parts), backward)


def slice_axis(a, axis, start, stop):
    da = as_tensor(a).data
    idx = [slice(None)] * da.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(da[idx])

    def backward(g):
        full = np.zeros_like(da)
        full[idx] = g
        return (full,)

    return _result(out, "slice_axis", [a], backward)


def gather_rows(a, idx):
    """out[i] = a[idx[i]] along the leading axis; backward scatter-adds."""
    da = as_tensor(a).data
    idx = np.asarray(idx, dtype=np.int64)
    out = da[idx]

    def backward(g):
        full = np.zeros_like(da)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, "gather_rows", [a], backward)


# -------------------------------------------------------------- linear algebra


def matmul(a, b):
    da, db = as_tensor(a).data, as_tensor(b).data
    if da.ndim != 2 or db.ndim != 2 or da.shape[1] != db.shape[0]:
        raise AutodiffError(f"matmul: incompatible shapes {da.shape} x {db.shape}")
    out = da @ db
    need_a = isinstance(a, Tensor) and a.requires_grad
    need_b = isinstance(b, Tensor) and b.requires_grad

    def backward(g):
        return (g @ db.T if need_a else None, da.T @ g if need_b else None)

    return _result(out, "matmul", [a, b], backward)


def bias_add(x, b):
    """x: (..., n) plus row vector b: (n,)."""
    dx, db = as_tensor(x).data, as_tensor(b).data
    if db.ndim != 1 or dx.shape[-1] != db.shape[0]:
        raise AutodiffError(f"bias_add: shapes {dx.shape} and {db.shape}")
    out = dx + db

    def backward(g):
        axes = tuple(range(g.ndim - 1))
        return (g, np.sum(g, axis=axes, dtype=F32))

    return _result(out, "bias_add", [x, b], backward)


def linear(x, w, b=None):
    """x @ w (+ b). x: (m,k), w: (k,n), b: (n,)."""
    y = matmul(x, w)
    if b is not None:
        y = bias_add(y, b)
    return y


# ----------------------------------------------------------------------- conv


def _pad2d(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp, kh, kw, stride):
    """(N,C,H,W) -> columns of shape (C*kh*kw, N*ho*wo).

    The (c, a, b) axes lead so the copy out of the strided view walks the
    image rows contiguously, which is far cheaper than a pixels-first layout.
    """
    n, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, n, ho, wo),
        strides=(s[1], s[2], s[3], s[0], s[2] * stride, s[3] * stride),
        writeable=False,
    )
    cols = np.ascontiguousarray(windows).reshape(c * kh * kw, n * ho * wo)
    return cols, ho, wo


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation. x: (C,H,W) or (N,C,H,W); w: (Cout,Cin,kh,kw)."""
    tx, tw = as_tensor(x), as_tensor(w)
    dx, dw = tx.data, tw.data
    squeeze = dx.ndim == 3
    if squeeze:
        dx = dx[None]
    if dx.ndim != 4 or dw.ndim != 4 or dx.shape[1] != dw.shape[1]:
        raise AutodiffError(f"conv2d: shapes {tx.data.shape} and {dw.shape}")
    if stride < 1:
        raise AutodiffError("conv2d: stride must be >= 1")
    if padding < 0:
        raise AutodiffError("conv2d: padding must be >= 0")
    n, cin, h, wd = dx.shape
    cout, _, kh, kw = dw.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise AutodiffError("conv2d: kernel does not fit padded input")

    xp = _pad2d(dx, padding)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = dw.reshape(cout, cin * kh * kw)
    out = wmat @ cols  # (cout, N*ho*wo)
    if b is not None:
        out = out + as_tensor(b).data[:, None]
    out = np.ascontiguousarray(
        out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    )
    if squeeze:
        out = out[0]

    def backward(g):
        gg = g[None] if squeeze else g
        gcols = np.ascontiguousarray(gg.transpose(1, 0, 2, 3)).reshape(
            cout, n * ho * wo
        )
        grad_w = (gcols @ cols.T).reshape(dw.shape)
        grad_b = None
        if b is not None:
            grad_b = np.sum(gcols, axis=1, dtype=F32)
        # input gradient as a transposed convolution (GEMM, no python loop):
        # dilate g by the stride, pad by k-1-p, correlate with the kernel
        # flipped spatially and swapped in/out channels
        hg = h + 2 * (kh - 1) - kh + 1 - 2 * (kh - 1 - padding)
        wg = wd + 2 * (kw - 1) - kw + 1 - 2 * (kw - 1 - padding)
        gd = np.zeros((n, cout, hg, wg), F32)
        gd[:, :, : (ho - 1) * stride + 1 : stride,
           : (wo - 1) * stride + 1 : stride] = gg
        wflip = np.ascontiguousarray(
            dw[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        ).reshape(cin, cout * kh * kw)
        gdp = np.pad(gd, ((0, 0), (0, 0),
                          (kh - 1 - padding,) * 2, (kw - 1 - padding,) * 2))
        bcols, bho, bwo = _im2col(gdp, kh, kw, 1)
        gx = np.ascontiguousarray(
            (wflip @ bcols).reshape(cin, n, bho, bwo).transpose(1, 0, 2, 3)
        )
        grad_x = gx[0] if squeeze else gx
        return (grad_x, grad_w, grad_b)

    inputs = [x, w, b] if b is not None else [x, w, None]
    return _result(out, "conv2d", inputs, backward)


def channel_bias(x, b):
    """Add a per-channel bias over spatial dims.

    x: (C,H,W) or (N,C,H,W); b: (C,) or, for batched x, (N,C) for a
    per-sample bias.
    """
    dx, db = as_tensor(x).data, as_tensor(b).data
    if dx.ndim == 3 and db.ndim == 1 and db.shape[0] == dx.shape[0]:
        out = dx + db[:, None, None]
        reduce_axes, expand = (1, 2), db.shape
    elif dx.ndim == 4 and db.ndim == 1 and db.shape[0] == dx.shape[1]:
        out = dx + db[None, :, None, None]
        reduce_axes, expand = (0, 2, 3), db.shape
    elif dx.ndim == 4 and db.ndim == 2 and db.shape == dx.shape[:2]:
        out = dx + db[:, :, None, None]
        reduce_axes, expand = (2, 3), db.shape
    else:
        raise AutodiffError(f"channel_bias: shapes {dx.shape} and {db.shape}")

    def backward(g):
        return (g, np.sum(g, axis=reduce_axes, dtype=F32).reshape(expand))

    return _result(out, "channel_bias", [x, b], backward)


def upsample_nearest2x(x):
    """(..., H, W) -> (..., 2H, 2W) by pixel repetition."""
    dx = as_tensor(x).data
    out = np.repeat(np.repeat(dx, 2, axis=-2), 2, axis=-1)

    def backward(g):
        h2, w2 = g.shape[-2], g.shape[-1]
        gr = g.reshape(g.shape[:-2] + (h2 // 2, 2, w2 // 2, 2))
        return (np.sum(gr, axis=(-3, -1), dtype=F32),)

    return _result(out, "upsample_nearest2x", [x], backward)


def avg_pool2d(x, k):
    """(..., H, W) -> (..., H/k, W/k), H and W divisible by k."""
    dx = as_tensor(x).data
    h, w = dx.shape[-2], dx.shape[-1]
    if h % k or w % k:
        raise AutodiffError("avg_pool2d: spatial dims must be divisible by k")
    xr = dx.reshape(dx.shape[:-2] + (h // k, k, w // k, k))
    out = np.mean(xr, axis=(-3, -1), dtype=F32)

    def backward(g):
        gg = g[..., :, None, :, None] / F32(k * k)
        gg = np.broadcast_to(gg, g.shape[:-2] + (h // k, k, w // k, k))
        return (gg.reshape(dx.shape).astype(F32),)

    return _result(out, "avg_pool2d", [x], backward)


# ---------------------------------------------------------------- grid sample


def grid_sample_2d(plane, uv):
    """Bilinear lookup on a feature plane.

    plane: (C, W, H); uv: (N, 2) with coordinates in [-1, 1], clamped to the
    border (align-corners convention: -1 and +1 map to edge texel centers).
    Differentiable w.r.t. both the plane values and the uv coordinates.
    Returns (N, C).
    """
    tp, tuv = as_tensor(plane), as_tensor(uv)
    dp, duv = tp.data, tuv.data
    if dp.ndim != 3 or duv.ndim != 2 or duv.shape[1] != 2:
        raise AutodiffError("grid_sample_2d: plane must be (C,W,H), uv (N,2)")
    c, w, h = dp.shape

    fu = (duv[:, 0] + 1.0) * 0.5 * (w - 1)
    fv = (duv[:, 1] + 1.0) * 0.5 * (h - 1)
    # border clamp; gradient w.r.t. uv vanishes where clamped
    in_u = ((fu > 0.0) & (fu < w - 1)).astype(F32)
    in_v = ((fv > 0.0) & (fv < h - 1)).astype(F32)
    fu = np.clip(fu, 0.0, w - 1)
    fv = np.clip(fv, 0.0, h - 1)

    u0 = np.clip(np.floor(fu).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(fv).astype(np.int64), 0, max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    au = (fu - u0).astype(F32)
    av = (fv - v0).astype(F32)

    p00 = dp[:, u0, v0]  # (C, N)
    p10 = dp[:, u1, v0]
    p01 = dp[:, u0, v1]
    p11 = dp[:, u1, v1]

    w00 = (1 - au) * (1 - av)
    w10 = au * (1 - av)
    w01 = (1 - au) * av
    w11 = au * av
    out = (p00 * w00 + p10 * w10 + p01 * w01 + p11 * w11).T  # (N, C)
    out = np.ascontiguousarray(out)

    def backward(g):
        gt = g.T  # (C, N)
        idx = np.concatenate([u0 * h + v0, u1 * h + v0, u0 * h + v1, u1 * h + v1])
        vals = np.concatenate([gt * w00, gt * w10, gt * w01, gt * w11], axis=1)
        grad_p = np.empty_like(dp)
        flat = grad_p.reshape(c, w * h)
        for ch in range(c):
            flat[ch] = np.bincount(idx, weights=vals[ch], minlength=w * h)

        # d(out)/d(fu) = (1-av)(p10-p00) + av(p11-p01); chain to u via scale
        dfu = (1 - av) * (p10 - p00) + av * (p11 - p01)  # (C, N)
        dfv = (1 - au) * (p01 - p00) + au * (p11 - p10)
        gu = np.sum(gt * dfu, axis=0, dtype=F32) * F32(0.5 * (w - 1)) * in_u
        gv = np.sum(gt * dfv, axis=0, dtype=F32) * F32(0.5 * (h - 1)) * in_v
        grad_uv = np.stack([gu, gv], axis=1)
        return (grad_p, grad_uv)

    return _result(out, "grid_sample_2d", [plane, uv], backward)


# ------------------------------------------------------------- image scatter


def scatter_image(values, flat_idx, height, width, background):
    """Place per-pixel rows into a (H, W, 3) canvas over a constant background.

    values: (N, 3) tensor; flat_idx: int array of N distinct pixel indices.
    """
    dv = as_tensor(values).data
    flat_idx = np.asarray(flat_idx, dtype=np.int64)
    canvas = np.tile(np.asarray(background, dtype=F32), (height * width, 1))
    canvas[flat_idx] = dv
    out = canvas.reshape(height, width, 3)

    def backward(g):
        return (g.reshape(height * width, 3)[flat_idx],)

    return _result(out, "scatter_image", [values], backward)


# ------------------------------------------------------ hash-grid interpolation


def hash_interp(table, xyz, resolution, primes=(1, 2654435761, 805459861)):
    """One level of multiresolution-hash trilinear interpolation.

    table: (T, F) feature tensor; xyz: (N, 3) in [0, 1]; resolution: cells per
    axis. Differentiable w.r.t. table entries (scatter-add) and xyz (through
    the trilinear weights; hashing itself is piecewise constant).
    Returns (N, F).
    """
    tt, tx = as_tensor(table), as_tensor(xyz)
    dt, dx = tt.data, tx.data
    tsize, feat = dt.shape
    pos = np.clip(dx, 0.0, 1.0) * resolution
    cell = np.floor(pos).astype(np.int64)
    cell = np.minimum(cell, resolution - 1)
    frac = (pos - cell).astype(F32)
    inb = ((dx > 0.0) & (dx < 1.0)).astype(F32)  # uv-style border clamp

    corners = np.array(
        [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
    )  # (8,3)
    idx8 = np.empty((8, dx.shape[0]), dtype=np.int64)
    w8 = np.empty((8, dx.shape[0]), dtype=F32)
    dwdf = np.empty((8, 3, dx.shape[0]), dtype=F32)
    for ci, (i, j, k) in enumerate(corners):
        cx = cell[:, 0] + i
        cy = cell[:, 1] + j
        cz = cell[:, 2] + k
        hashed = (
            cx * primes[0] ^ cy * primes[1] ^ cz * primes[2]
        ) % tsize
        idx8[ci] = hashed
        wx = frac[:, 0] if i else 1 - frac[:, 0]
        wy = frac[:, 1] if j else 1 - frac[:, 1]
        wz = frac[:, 2] if k else 1 - frac[:, 2]
        w8[ci] = wx * wy * wz
        sx = F32(1.0) if i else F32(-1.0)
        sy = F32(1.0) if j else F32(-1.0)
        sz = F32(1.0) if k else F32(-1.0)
        dwdf[ci, 0] = sx * wy * wz
        dwdf[ci, 1] = wx * sy * wz
        dwdf[ci, 2] = wx * wy * sz

    feats8 = dt[idx8]  # (8, N, F)
    out = np.einsum("cn,cnf->nf", w8, feats8).astype(F32)

    def backward(g):
        grad_t = np.zeros_like(dt)
        for ci in range(8):
            np.add.at(grad_t, idx8[ci], g * w8[ci][:, None])
        # d out / d frac, chain to xyz with scale `resolution`
        gdotf = np.einsum("nf,cnf->cn", g, feats8)  # (8, N)
        grad_xyz = np.einsum("cn,cdn->nd", gdotf, dwdf).astype(F32)
        grad_xyz *= F32(resolution)
        grad_xyz *= inb
        return (grad_t, grad_xyz)

    return _result(out, "hash_interp", [table, xyz], backward)
