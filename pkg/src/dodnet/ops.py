"""Differentiable volumetric operators.

All functions take and return :class:`~dodnet.tensor.Tensor` and follow the
NCDHW layout.  Backward passes are hand-derived and validated by the central
finite-difference suite in the tests.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import Tensor, _finalize, accumulate_grad

IntOrTriple = Union[int, Tuple[int, int, int]]

# Cap on the transient im2col buffer; larger convolutions run in depth slabs.
_COL_LIMIT_BYTES = 256 * 1024 * 1024


def _triple(v: IntOrTriple, name: str) -> Tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        v = (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"{name} must be an int or a triple, got {v!r}")
    return t


def conv3d_output_shape(spatial, kernel, stride, padding) -> Tuple[int, int, int]:
    """Output extents: floor((D + 2*pad - k) / stride) + 1 per axis."""
    out = []
    for d, k, s, p in zip(spatial, kernel, stride, padding):
        o = (d + 2 * p - k) // s + 1
        if o < 1:
            raise ValueError(
                f"conv3d produces empty output: extent {d} with kernel {k}, "
                f"stride {s}, padding {p}"
            )
        out.append(o)
    return tuple(out)


def _im2col(xp: np.ndarray, kernel, stride, out_spatial) -> np.ndarray:
    """View a padded NCDHW array as (N, C*kd*kh*kw, L) patch columns."""
    n, c = xp.shape[:2]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    do, ho, wo = out_spatial
    sn, sc, s2, s3, s4 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kd, kh, kw, do, ho, wo),
        strides=(sn, sc, s2, s3, s4, s2 * sd, s3 * sh, s4 * sw),
        writeable=False,
    )
    return view.reshape(n, c * kd * kh * kw, do * ho * wo)


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: IntOrTriple = 1,
    padding: IntOrTriple = 0,
) -> Tensor:
    """3-D cross-correlation plus bias.

    Args:
        x: input of shape (N, C_in, D, H, W).
        weight: kernels of shape (C_out, C_in, kd, kh, kw).
        bias: optional (C_out,) offsets added per output channel.
        stride / padding: int or per-axis triple; padding is symmetric zeros.
    """
    if x.ndim != 5:
        raise ValueError(f"conv3d input must be 5-d NCDHW, got shape {x.shape}")
    if weight.ndim != 5:
        raise ValueError(f"conv3d weight must be 5-d, got shape {weight.shape}")
    n, cin, d, h, w = x.shape
    cout, cin_w, kd, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(
            f"conv3d channel mismatch: input has {cin}, weight expects {cin_w}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv3d bias must have shape ({cout},), got {bias.shape}")
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    kernel = (kd, kh, kw)
    out_spatial = conv3d_output_shape((d, h, w), kernel, stride, padding)

    if kernel == (1, 1, 1) and stride == (1, 1, 1) and padding == (0, 0, 0):
        return _pointwise_conv3d(x, weight, bias)

    if any(padding):
        pd, ph, pw = padding
        xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    else:
        xp = x.data
    sd, sh, sw = stride
    do, ho, wo = out_spatial
    ckk = cin * kd * kh * kw
    dtype = np.result_type(xp.dtype, weight.dtype)
    # Patch columns for the whole output can dwarf the input on large
    # volumes, so the output is processed in depth slabs of bounded size.
    slab_bytes = n * ckk * ho * wo * dtype.itemsize
    if slab_bytes * do <= _COL_LIMIT_BYTES:
        z_step = do
    else:
        z_step = max(1, _COL_LIMIT_BYTES // slab_bytes)

    def slab_cols(z0: int, z1: int) -> np.ndarray:
        src = xp[:, :, z0 * sd : (z1 - 1) * sd + kd]
        return _im2col(src, kernel, stride, (z1 - z0, ho, wo))

    w2 = weight.data.reshape(cout, -1)
    out_data = np.empty((n, cout, do, ho, wo), dtype=dtype)
    saved_cols = None
    for z0 in range(0, do, z_step):
        z1 = min(z0 + z_step, do)
        cols = slab_cols(z0, z1)
        out_data[:, :, z0:z1] = np.matmul(w2, cols).reshape(n, cout, z1 - z0, ho, wo)
        if z_step >= do:
            saved_cols = cols
    if bias is not None:
        out_data += bias.data[None, :, None, None, None]
    out = Tensor(out_data)

    def bwd():
        if out.grad is None:
            return
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, out.grad.sum(axis=(0, 2, 3, 4)))
        gw = np.zeros((cout, ckk), dtype=dtype) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for z0 in range(0, do, z_step):
            z1 = min(z0 + z_step, do)
            cols = saved_cols if saved_cols is not None else slab_cols(z0, z1)
            go = out.grad[:, :, z0:z1].reshape(n, cout, -1)
            if gw is not None:
                gw += np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0)
            if gxp is not None:
                gcols = np.matmul(w2.T, go)
                gcols = gcols.reshape(n, cin, kd, kh, kw, z1 - z0, ho, wo)
                for iz in range(kd):
                    for iy in range(kh):
                        for ix in range(kw):
                            zs = z0 * sd + iz
                            gxp[
                                :,
                                :,
                                zs : zs + sd * (z1 - z0) : sd,
                                iy : iy + sh * ho : sh,
                                ix : ix + sw * wo : sw,
                            ] += gcols[:, :, iz, iy, ix]
        if gw is not None:
            accumulate_grad(weight, gw.reshape(weight.shape))
        if gxp is not None:
            if any(padding):
                pd, ph, pw = padding
                accumulate_grad(x, gxp[:, :, pd : pd + d, ph : ph + h, pw : pw + w])
            else:
                accumulate_grad(x, gxp)

    return _finalize(out, (x, weight) if bias is None else (x, weight, bias), bwd)


def _pointwise_conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """Fast path for 1x1x1 kernels: a channel-mixing matmul."""
    n, cin = x.shape[:2]
    spatial = x.shape[2:]
    cout = weight.shape[0]
    w2 = weight.data.reshape(cout, cin)
    xf = x.data.reshape(n, cin, -1)
    out_data = np.matmul(w2, xf)
    if bias is not None:
        out_data += bias.data[:, None]
    out = Tensor(out_data.reshape(n, cout, *spatial))

    def bwd():
        if out.grad is None:
            return
        go = out.grad.reshape(n, cout, -1)
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, go.sum(axis=(0, 2)))
        if weight.requires_grad:
            gw = np.matmul(go, xf.transpose(0, 2, 1)).sum(axis=0)
            accumulate_grad(weight, gw.reshape(weight.shape))
        if x.requires_grad:
            gx = np.matmul(w2.T, go)
            accumulate_grad(x, gx.reshape(x.shape))

    return _finalize(out, (x, weight) if bias is None else (x, weight, bias), bwd)


def group_norm(
    x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> Tensor:
    """Normalize per (sample, channel group) to zero mean / unit variance,
    then apply the per-channel affine (gamma, beta)."""
    if x.ndim != 5:
        raise ValueError(f"group_norm expects NCDHW input, got shape {x.shape}")
    n, c = x.shape[:2]
    if num_groups < 1 or c % num_groups != 0:
        raise ValueError(
            f"channel count {c} is not divisible by num_groups {num_groups}"
        )
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}"
        )
    spatial = x.shape[2:]
    m = (c // num_groups) * int(np.prod(spatial))
    xg = x.data.reshape(n, num_groups, m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv  # (N, G, M)
    xhat_c = xhat.reshape(n, c, -1)
    gslice = gamma.data[None, :, None]
    out = Tensor((xhat_c * gslice + beta.data[None, :, None]).reshape(x.shape))

    def bwd():
        if out.grad is None:
            return
        go = out.grad.reshape(n, c, -1)
        if beta.requires_grad:
            accumulate_grad(beta, go.sum(axis=(0, 2)))
        if gamma.requires_grad:
            accumulate_grad(gamma, (go * xhat_c).sum(axis=(0, 2)))
        if x.requires_grad:
            dxhat = (go * gslice).reshape(n, num_groups, m)
            mean_d = dxhat.mean(axis=2, keepdims=True)
            mean_dx = (dxhat * xhat).mean(axis=2, keepdims=True)
            gx = inv * (dxhat - mean_d - xhat * mean_dx)
            accumulate_grad(x, gx.reshape(x.shape))

    return _finalize(out, (x, gamma, beta), bwd)


def weight_standardize(w: Tensor, eps: float = 1e-5) -> Tensor:
    """Shift/scale each output-channel kernel to zero mean, unit variance.

    The eps guard sits under the square root, so a constant kernel maps to
    exactly zero instead of dividing by zero.
    """
    if w.ndim != 5:
        raise ValueError(f"weight_standardize expects 5-d kernels, got {w.shape}")
    cout = w.shape[0]
    flat = w.data.reshape(cout, -1)
    mu = flat.mean(axis=1, keepdims=True)
    var = flat.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    what = (flat - mu) * inv
    out = Tensor(what.reshape(w.shape))

    def bwd():
        if out.grad is None:
            return
        if not w.requires_grad:
            return
        g = out.grad.reshape(cout, -1)
        mean_g = g.mean(axis=1, keepdims=True)
        mean_gw = (g * what).mean(axis=1, keepdims=True)
        gw = inv * (g - mean_g - what * mean_gw)
        accumulate_grad(w, gw.reshape(w.shape))

    return _finalize(out, (w,), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0  # subgradient 0 at the kink

    def bwd():
        if out.grad is None:
            return
        accumulate_grad(x, out.grad * mask)

    return _finalize(out, (x,), bwd)


def sigmoid_array(d: np.ndarray) -> np.ndarray:
    """Logistic function on a plain array, stable for large |x|."""
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    s[~pos] = ex / (1.0 + ex)
    return s


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_array(x.data)
    out = Tensor(s)

    def bwd():
        if out.grad is None:
            return
        accumulate_grad(x, out.grad * s * (1.0 - s))

    return _finalize(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))

    def bwd():
        if out.grad is None:
            return
        accumulate_grad(x, out.grad / x.data)

    return _finalize(out, (x,), bwd)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ValueError(f"clamp needs lo < hi, got [{lo}, {hi}]")
    out = Tensor(np.clip(x.data, lo, hi))
    mask = (x.data >= lo) & (x.data <= hi)

    def bwd():
        if out.grad is None:
            return
        accumulate_grad(x, out.grad * mask)

    return _finalize(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim:
            raise ValueError("concat rank mismatch")
        for ax, (a, b) in enumerate(zip(ref.shape, t.shape)):
            if ax != axis % ref.ndim and a != b:
                raise ValueError(
                    f"concat shapes {ref.shape} and {t.shape} differ off axis {axis}"
                )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def bwd():
        if out.grad is None:
            return
        offset = 0
        for t, sz in zip(tensors, sizes):
            idx = [slice(None)] * out.ndim
            idx[axis] = slice(offset, offset + sz)
            accumulate_grad(t, out.grad[tuple(idx)])
            offset += sz

    return _finalize(out, tuple(tensors), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, D, H, W) -> (N, C) spatial mean."""
    if x.ndim != 5:
        raise ValueError(f"global_avg_pool expects NCDHW input, got {x.shape}")
    voxels = int(np.prod(x.shape[2:]))
    out = Tensor(x.data.mean(axis=(2, 3, 4)))

    def bwd():
        if out.grad is None:
            return
        g = np.broadcast_to(
            out.grad[:, :, None, None, None] / voxels, x.shape
        ).astype(x.dtype, copy=False)
        accumulate_grad(x, g)

    return _finalize(out, (x,), bwd)


def _upsample_axis_indices(n: int, dtype):
    """Half-pixel source indices/weights for doubling one axis."""
    dst = np.arange(2 * n, dtype=np.float64)
    src = np.clip((dst + 0.5) / 2.0 - 0.5, 0.0, n - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    t = (src - i0).astype(dtype)
    return i0, i1, t


def _upsample_one_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    i0, i1, t = _upsample_axis_indices(n, x.dtype)
    wshape = [1] * x.ndim
    wshape[axis] = 2 * n
    t_b = t.reshape(wshape)
    out = Tensor(
        np.take(x.data, i0, axis=axis) * (1.0 - t_b)
        + np.take(x.data, i1, axis=axis) * t_b
    )

    def bwd():
        if out.grad is None:
            return
        g0 = np.moveaxis(out.grad * (1.0 - t_b), axis, 0)
        g1 = np.moveaxis(out.grad * t_b, axis, 0)
        acc = np.zeros_like(np.moveaxis(x.data, axis, 0))
        np.add.at(acc, i0, g0)
        np.add.at(acc, i1, g1)
        accumulate_grad(x, np.moveaxis(acc, 0, axis))

    return _finalize(out, (x,), bwd)


def upsample_trilinear(x: Tensor) -> Tensor:
    """Double every spatial extent with half-pixel trilinear interpolation.

    Edge samples replicate the border (source coordinates are clamped), so a
    1-d row [a, b] maps to [a, 0.75a + 0.25b, 0.25a + 0.75b, b].
    """
    if x.ndim != 5:
        raise ValueError(f"upsample_trilinear expects NCDHW input, got {x.shape}")
    out = x
    for axis in (2, 3, 4):
        out = _upsample_one_axis(out, axis)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (N, F) @ (O, F)^T + (O,)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(
            f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear feature mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}"
        )
    out = Tensor(x.data @ weight.data.T + bias.data)

    def bwd():
        if out.grad is None:
            return
        if bias.requires_grad:
            accumulate_grad(bias, out.grad.sum(axis=0))
        if weight.requires_grad:
            accumulate_grad(weight, out.grad.T @ x.data)
        if x.requires_grad:
            accumulate_grad(x, out.grad @ weight.data)

    return _finalize(out, (x, weight, bias), bwd)


def batched_pointwise_conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1x1x1 convolution whose kernels differ per batch sample.

    Args:
        x: (N, C_in, D, H, W) features.
        weight: (N, C_out, C_in) per-sample channel mixers.
        bias: (N, C_out) per-sample offsets.
    """
    if x.ndim != 5 or weight.ndim != 3 or bias.ndim != 2:
        raise ValueError(
            "batched_pointwise_conv3d expects x (N,C,D,H,W), weight (N,O,C), bias (N,O); "
            f"got {x.shape}, {weight.shape}, {bias.shape}"
        )
    n, cin = x.shape[:2]
    if weight.shape[0] != n or weight.shape[2] != cin or bias.shape != weight.shape[:2]:
        raise ValueError(
            f"per-sample kernel shapes inconsistent: x {x.shape}, weight {weight.shape}, "
            f"bias {bias.shape}"
        )
    spatial = x.shape[2:]
    cout = weight.shape[1]
    xf = x.data.reshape(n, cin, -1)
    out_data = np.matmul(weight.data, xf) + bias.data[:, :, None]
    out = Tensor(out_data.reshape(n, cout, *spatial))

    def bwd():
        if out.grad is None:
            return
        go = out.grad.reshape(n, cout, -1)
        if bias.requires_grad:
            accumulate_grad(bias, go.sum(axis=2))
        if weight.requires_grad:
            accumulate_grad(weight, np.matmul(go, xf.transpose(0, 2, 1)))
        if x.requires_grad:
            gx = np.matmul(weight.data.transpose(0, 2, 1), go)
            accumulate_grad(x, gx.reshape(x.shape))

    return _finalize(out, (x, weight, bias), bwd)
