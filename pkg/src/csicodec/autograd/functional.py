"""Differentiable operations.

Every op takes :class:`Tensor` (or array-like) inputs and returns a new
:class:`Tensor` whose backward closure maps the output gradient to one
gradient per parent. Images are laid out ``(N, C, H, W)``.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import DTYPE, Tensor, as_tensor, make

# ---------------------------------------------------------------------------
# elementwise arithmetic with numpy broadcasting


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = sigmoid_array(a.data)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus_array(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return make(
        softplus_array(a.data), (a,), lambda g: (g * sigmoid_array(a.data),), "softplus"
    )


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def lower_bound(a, bound: float) -> Tensor:
    """``max(a, bound)`` whose gradient still flows where it would raise ``a``
    back above the bound, so clamped values are not stranded."""
    a = as_tensor(a)

    def backward(g):
        pass_through = (a.data >= bound) | (g < 0)
        return (g * pass_through,)

    return make(np.maximum(a.data, bound), (a,), backward, "lower_bound")


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def backward(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    return make(np.where(cond, a.data, b.data), (a, b), backward, "where")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.shape[i] for i in axes)
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
    )


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return make(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose"
    )


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make(a.data[idx], (a,), backward, "index")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return make(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat"
    )


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# convolution


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """Padding (before, after) so that output extent is ``ceil(size/stride)``."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}"
        )
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got {w.shape[2:]}")
    if stride not in (1, 2, 4):
        raise ValueError(f"conv2d stride must be 1, 2 or 4, got {stride}")


def _fft_correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1 'same' cross-correlation of (N,C,H,W) with (O,C,kh,kw)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    fh, fw = h + kh - 1, wd + kw - 1
    ph, pw = kh // 2, kw // 2
    xf = np.fft.rfft2(x, s=(fh, fw))
    # correlation = convolution with the flipped kernel
    wf = np.fft.rfft2(w[:, :, ::-1, ::-1], s=(fh, fw))
    yf = np.einsum("ncf,ocf->nof", xf.reshape(n, c, -1), wf.reshape(o, c, -1), optimize=True)
    y = np.fft.irfft2(yf.reshape(n, o, fh, -1), s=(fh, fw))
    return np.ascontiguousarray(y[:, :, ph : ph + h, pw : pw + wd])


def _fft_kernel_grad(x: np.ndarray, g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """d(loss)/d(kernel) for a stride-1 'same' correlation."""
    n, c, h, wd = x.shape
    o = g.shape[1]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw)))
    hp, wp = xp.shape[2:]
    xf = np.fft.rfft2(xp)
    gf = np.fft.rfft2(g, s=(hp, wp))
    pf = np.einsum(
        "nof,ncf->ocf", gf.reshape(n, o, -1).conj(), xf.reshape(n, c, -1), optimize=True
    )
    dw = np.fft.irfft2(pf.reshape(o, c, hp, -1), s=(hp, wp))
    return np.ascontiguousarray(dw[:, :, :kh, :kw])


def _strided_views(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    for i in range(kh):
        for j in range(kw):
            yield i, j, xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns ``(C*kh*kw, N*ho*wo)`` of a padded ``(N, C, H, W)`` input."""
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # (N, C, ho, wo, kh, kw) -> (C, kh, kw, N, ho, wo)
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns into a padded input."""
    n, c, hp, wp = shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, hp, wp))
    for i, j, view in _strided_views(out, kh, kw, stride, ho, wo):
        view += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _use_fft(h: int, w: int, kh: int, kw: int) -> bool:
    return kh * kw > 25 and h * w >= 256


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """2-D cross-correlation with 'same' zero padding.

    Output spatial extent is ``ceil(H/stride) x ceil(W/stride)``. Large
    stride-1 layers with big kernels go through the FFT; everything else is
    a single im2col matrix product.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_conv(x.data, w.data, stride)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = -(-h // stride), -(-wd // stride)
    pt, pb = same_padding(h, kh, stride)
    pl, pr = same_padding(wd, kw, stride)
    pad = ((0, 0), (0, 0), (pt, pb), (pl, pr))

    if stride == 1 and kh * kw == 1:
        mode = "pointwise"
        out = np.einsum("oc,nchw->nohw", w.data[:, :, 0, 0], x.data, optimize=True)
    elif stride == 1 and _use_fft(h, wd, kh, kw):
        mode = "fft"
        out = _fft_correlate(x.data, w.data)
    else:
        mode = "im2col"
        xp = np.pad(x.data, pad)
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        out = (w.data.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if mode == "pointwise":
            wk = w.data[:, :, 0, 0]
            if x.requires_grad:
                gx = np.einsum("oc,nohw->nchw", wk, g, optimize=True)
            if w.requires_grad:
                gw = np.einsum("nohw,nchw->oc", g, x.data, optimize=True)[:, :, None, None]
        elif mode == "fft":
            if x.requires_grad:
                # adjoint of a same-padded correlation with odd kernel
                gx = _fft_correlate(g, w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            if w.requires_grad:
                gw = _fft_kernel_grad(x.data, g, kh, kw)
        else:
            gt = g.transpose(1, 0, 2, 3).reshape(o, -1)
            if w.requires_grad:
                gw = (gt @ cols.T).reshape(w.shape)
            if x.requires_grad:
                gcols = w.data.reshape(o, -1).T @ gt
                gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
                gx = np.ascontiguousarray(gxp[:, :, pt : pt + h, pl : pl + wd])
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward, "conv2d")


def _phase_taps(factor: int, kernel: int):
    """Selection tensor ``A[a, u, i]`` = 1 when tap ``i`` of a kernel applied
    to an upsampled signal reads low-resolution offset ``u + lo`` for output
    phase ``a``; returns ``(A, lo)``."""
    half = kernel // 2
    offs = (np.arange(factor)[:, None] + np.arange(kernel)[None, :] - half) // factor
    lo = int(offs.min())
    span = int(offs.max()) - lo + 1
    sel = np.zeros((factor, span, kernel))
    a, i = np.indices(offs.shape)
    sel[a, offs - lo, i] = 1.0
    return sel, lo, span


def upsample_conv2d(x, w, b=None, factor: int = 2) -> Tensor:
    """``conv2d(upsample(x, factor), w, b)`` without materialising the
    upsampled tensor.

    Each of the ``factor**2`` output phases sees the low-resolution input
    through a small folded kernel, so all phases come out of one matrix
    product over low-resolution columns.
    """
    if factor not in (2, 4):
        raise ValueError(f"upsample factor must be 2 or 4, got {factor}")
    x, w = as_tensor(x), as_tensor(w)
    _check_conv(x.data, w.data, 1)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    f = factor
    sel_h, lo_h, uh = _phase_taps(f, kh)
    sel_w, lo_w, uw = _phase_taps(f, kw)
    pt, pb = -lo_h, uh - 1 + lo_h
    pl, pr = -lo_w, uw - 1 + lo_w
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = _im2col(xp, uh, uw, 1, h, wd)
    # folded kernels for every phase: (f, f, O, C, uh, uw)
    folded = np.einsum("aui,bvj,ocij->abocuv", sel_h, sel_w, w.data, optimize=True)
    y = folded.reshape(f * f * o, -1) @ cols
    out = y.reshape(f, f, o, n, h, wd).transpose(3, 2, 4, 0, 5, 1).reshape(n, o, h * f, wd * f)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        gy = g.reshape(n, o, h, f, wd, f).transpose(3, 5, 1, 0, 2, 4).reshape(f * f * o, -1)
        if w.requires_grad:
            gfold = (gy @ cols.T).reshape(f, f, o, c, uh, uw)
            gw = np.einsum("aui,bvj,abocuv->ocij", sel_h, sel_w, gfold, optimize=True)
        if x.requires_grad:
            gcols = folded.reshape(f * f * o, -1).T @ gy
            gxp = _col2im(gcols, xp.shape, uh, uw, 1, h, wd)
            gx = np.ascontiguousarray(gxp[:, :, pt : pt + h, pl : pl + wd])
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward, "upsample_conv2d")


def conv_transpose2d(x, w, b=None, stride: int = 1) -> Tensor:
    """Transposed convolution, the exact adjoint of :func:`conv2d` with the
    same stride, mapping ``(N, C_in, H, W)`` to ``(N, C_out, H*s, W*s)``.

    ``w`` has shape ``(C_in, C_out, kh, kw)``, i.e. the kernel of the
    forward convolution it transposes.
    """
    x, w = as_tensor(x), as_tensor(w)
    n, c, h, wd = x.shape
    ci, o, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv_transpose2d channel mismatch: {c} vs {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv_transpose2d kernel extents must be odd")
    hu, wu = h * stride, wd * stride
    pt, pb = same_padding(hu, kh, stride)
    pl, pr = same_padding(wu, kw, stride)
    xt = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    outp = np.zeros((o, n, hu + pt + pb, wu + pl + pr))
    for i, j, view in _strided_views(outp, kh, kw, stride, h, wd):
        view += (w.data[:, :, i, j].T @ xt).reshape(o, n, h, wd)
    out = outp[:, :, pt : pt + hu, pl : pl + wu].transpose(1, 0, 2, 3)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        gp = np.pad(g, ((0, 0), (0, 0), (pt, pb), (pl, pr))).transpose(1, 0, 2, 3)
        if x.requires_grad:
            acc = np.zeros((c, n * h * wd))
            for i, j, view in _strided_views(gp, kh, kw, stride, h, wd):
                acc += w.data[:, :, i, j] @ view.reshape(o, -1)
            gx = np.ascontiguousarray(acc.reshape(c, n, h, wd).transpose(1, 0, 2, 3))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i, j, view in _strided_views(gp, kh, kw, stride, h, wd):
                gw[:, :, i, j] = xt @ view.reshape(o, -1).T
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward, "conv_transpose2d")


def upsample(x, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing axes."""
    if factor not in (2, 4):
        raise ValueError(f"upsample factor must be 2 or 4, got {factor}")
    x = as_tensor(x)
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(g):
        *lead, hh, ww = g.shape
        g = g.reshape(*lead, hh // factor, factor, ww // factor, factor)
        return (g.sum(axis=(-3, -1)),)

    return make(out, (x,), backward, "upsample")


# ---------------------------------------------------------------------------
# activations and normalisation


def prelu(x, slope) -> Tensor:
    """Per-channel parametric ReLU; ``slope`` has one entry per channel
    (axis 1)."""
    x, slope = as_tensor(x), as_tensor(slope)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    a = slope.data.reshape(shape)
    neg_mask = x.data < 0
    out = np.where(neg_mask, a * x.data, x.data)

    def backward(g):
        gx = np.where(neg_mask, a * g, g) if x.requires_grad else None
        ga = None
        if slope.requires_grad:
            axes = tuple(i for i in range(x.ndim) if i != 1)
            ga = np.where(neg_mask, g * x.data, 0.0).sum(axis=axes)
        return gx, ga

    return make(out, (x, slope), backward, "prelu")


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over batch and spatial axes.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, as in the usual convention);
    in eval mode the running buffers are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    shape = (1, -1, 1, 1)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs batch size >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                gx = (inv_std.reshape(shape) / count) * (
                    count * gxhat
                    - gxhat.sum(axis=axes).reshape(shape)
                    - xhat * (gxhat * xhat).sum(axis=axes).reshape(shape)
                )
            else:
                gx = gxhat * inv_std.reshape(shape)
        return gx, gg, gb

    return make(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# losses


def mse(pred, target) -> Tensor:
    """Mean of squared differences over all entries."""
    diff = sub(pred, target)
    return mean(square(diff))


LN2 = math.log(2.0)


def log2(a) -> Tensor:
    return mul(log(a), 1.0 / LN2)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)
