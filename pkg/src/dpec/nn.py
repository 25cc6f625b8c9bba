"""Differentiable neural building blocks on top of the tensor core.

Convolutions are im2col + GEMM with hand-written backward passes; patch
embed/merge/expand follow the Swin-style token algebra; bilinear resize
is separable with scatter-add gradients. All custom backward passes are
covered by finite-difference tests.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch
from .tensor import Tensor, apply_op, as_tensor, concat, pad_nd, reshape, transpose

# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


class Params:
    """Base for parameter containers; attributes are discovered in order."""


def named_parameters(obj, prefix=""):
    """Yield (dotted_name, Tensor) for every tensor reachable from obj."""
    if isinstance(obj, Tensor):
        yield prefix, obj
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
        return
    if isinstance(obj, Params):
        for name, value in vars(obj).items():
            if isinstance(value, (Tensor, list, tuple, Params)):
                sub = f"{prefix}.{name}" if prefix else name
                yield from named_parameters(value, sub)


def param_count(obj) -> int:
    return sum(t.size for _, t in named_parameters(obj))


def set_requires_grad(obj, flag: bool):
    for _, t in named_parameters(obj):
        t.requires_grad = flag


def set_parameter(obj, dotted: str, value):
    """Replace the tensor at a dotted path produced by named_parameters."""
    parts = dotted.split(".")
    for p in parts[:-1]:
        obj = obj[int(p)] if p.isdigit() else getattr(obj, p)
    leaf = parts[-1]
    if leaf.isdigit():
        obj[int(leaf)] = value
    else:
        setattr(obj, leaf, value)


class LinearParams(Params):
    def __init__(self, weight: Tensor, bias: Tensor | None = None):
        self.weight = weight  # [Cin, Cout]
        self.bias = bias      # [Cout] or None


class Conv2dParams(Params):
    def __init__(self, weight: Tensor, bias: Tensor | None, stride=1, padding=0):
        self.weight = weight  # [Cout, Cin, kh, kw]
        self.bias = bias
        self.stride = int(stride)
        self.padding = int(padding)


class LayerNormParams(Params):
    def __init__(self, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("layernorm eps must be positive")
        self.gamma = gamma
        self.beta = beta
        self.eps = float(eps)


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------


def _he_weights(rng, shape, fan_in, dtype, scale):
    draw = rng.standard_normal(shape)  # always drawn, keeps streams aligned
    if scale == 0.0:
        return np.zeros(shape, dtype=dtype)
    return (draw * (scale * np.sqrt(2.0 / fan_in))).astype(dtype)


def init_linear(rng, cin, cout, dtype=np.float32, bias=True, scale=1.0):
    """Fan-in (He) normal init; scale 0 gives exact zeros."""
    w = Tensor(_he_weights(rng, (cin, cout), cin, dtype, scale),
               requires_grad=True)
    b = None
    if bias:
        b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return LinearParams(w, b)


def init_conv(rng, cin, cout, k, stride=1, padding=0, dtype=np.float32,
              bias=True, scale=1.0):
    w = Tensor(_he_weights(rng, (cout, cin, k, k), cin * k * k, dtype, scale),
               requires_grad=True)
    b = None
    if bias:
        b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return Conv2dParams(w, b, stride=stride, padding=padding)


def init_depthwise(rng, channels, k, dtype=np.float32, scale=1.0):
    std = scale * np.sqrt(2.0 / (k * k))
    w = Tensor((rng.standard_normal((channels, 1, k, k)) * std).astype(dtype),
               requires_grad=True)
    b = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
    return Conv2dParams(w, b, stride=1, padding=(k - 1) // 2)


def init_layernorm(channels, dtype=np.float32, eps=1e-5):
    return LayerNormParams(
        Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        eps=eps,
    )


# ---------------------------------------------------------------------------
# linear / layernorm
# ---------------------------------------------------------------------------


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """x[..., Cin] @ weight + bias over the last axis."""
    x = as_tensor(x)
    w, b = p.weight, p.bias
    cin = x.shape[-1]
    if cin != w.shape[0]:
        raise ShapeMismatch(f"linear: {x.shape} with weight {w.shape}")
    rows = x.data.reshape(-1, cin)
    out = rows @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g, needs):
        gmat = g.reshape(-1, w.shape[1])
        gx = (gmat @ w.data.T).reshape(x.shape) if needs[0] else None
        gw = rows.T @ gmat if needs[1] else None
        if b is None:
            return gx, gw
        gb = gmat.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return apply_op("linear", out, inputs, vjp)


def layernorm(x: Tensor, p: LayerNormParams) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    c = x.shape[-1]
    if p.gamma.shape != (c,):
        raise ShapeMismatch(f"layernorm: {x.shape} with gamma {p.gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv
    out = p.gamma.data * xhat + p.beta.data

    def vjp(g, needs):
        gx = None
        if needs[0]:
            gh = g * p.gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gh - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=axes) if needs[1] else None
        gbeta = g.sum(axis=axes) if needs[2] else None
        return gx, ggamma, gbeta

    return apply_op("layernorm", out, (x, p.gamma, p.beta), vjp)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def _conv_windows(x: np.ndarray, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return x.shape, win[:, :, ::stride, ::stride]  # [N,C,H',W',kh,kw]


def _col2im(gcols, padded_shape, kh, kw, stride, padding, out_h, out_w):
    """Scatter [N,C,kh,kw,H',W'] window grads back to input shape."""
    z = np.zeros(padded_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            z[:, :, i : i + stride * out_h : stride,
                 j : j + stride * out_w : stride] += gcols[:, :, i, j]
    if padding:
        z = z[:, :, padding:-padding or None, padding:-padding or None]
    return z


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation with zero padding, NCHW layout."""
    x = as_tensor(x)
    w, b = p.weight, p.bias
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs weight {w.shape}")
    s, pad = p.stride, p.padding
    out_h = (h + 2 * pad - kh) // s + 1
    out_w = (wd + 2 * pad - kw) // s + 1
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} too large for {h}x{wd}")
    padded_shape, win = _conv_windows(x.data, kh, kw, s, pad)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, out_h, out_w, cout).transpose(0, 3, 1, 2)
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g, needs):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = None
        if needs[0]:
            gcols = (gmat @ wmat).reshape(n, out_h, out_w, cin, kh, kw)
            gcols = gcols.transpose(0, 3, 4, 5, 1, 2)
            gx = _col2im(gcols, padded_shape, kh, kw, s, pad, out_h, out_w)
        gw = (gmat.T @ cols).reshape(w.shape) if needs[1] else None
        if b is None:
            return gx, gw
        gb = gmat.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return apply_op("conv2d", out, inputs, vjp)


def depthwise_conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Per-channel convolution (groups == channels); weight [C,1,kh,kw]."""
    x = as_tensor(x)
    w, b = p.weight, p.bias
    n, c, h, wd = x.shape
    cw, one, kh, kw = w.shape
    if cw != c or one != 1:
        raise ShapeMismatch(f"depthwise: input {x.shape} vs weight {w.shape}")
    s, pad = p.stride, p.padding
    out_h = (h + 2 * pad - kh) // s + 1
    out_w = (wd + 2 * pad - kw) // s + 1
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch("depthwise: kernel larger than padded input")
    padded_shape, win = _conv_windows(x.data, kh, kw, s, pad)
    out = np.einsum("nchwij,cij->nchw", win, w.data[:, 0], optimize=True)
    if b is not None:
        out = out + b.data[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g, needs):
        gx = None
        if needs[0]:
            gcols = g[:, :, None, None, :, :] * w.data[:, 0][None, :, :, :, None, None]
            gx = _col2im(gcols, padded_shape, kh, kw, s, pad, out_h, out_w)
        gw = None
        if needs[1]:
            gw = np.einsum("nchw,nchwij->cij", g, win, optimize=True)[:, None]
        if b is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if needs[2] else None
        return gx, gw, gb

    return apply_op("depthwise_conv2d", out, inputs, vjp)


# ---------------------------------------------------------------------------
# patch algebra (tokens are channels-last: [N, h, w, C])
# ---------------------------------------------------------------------------


class PatchEmbedParams(Params):
    def __init__(self, conv: Conv2dParams, norm: LayerNormParams):
        self.conv = conv
        self.norm = norm


def init_patch_embed(rng, in_ch, embed_dim, dtype=np.float32):
    conv = init_conv(rng, in_ch, embed_dim, 4, stride=4, padding=0, dtype=dtype)
    return PatchEmbedParams(conv, init_layernorm(embed_dim, dtype=dtype))


def patch_embed(img: Tensor, p: PatchEmbedParams) -> Tensor:
    """Non-overlapping 4x4 patches to embed_dim channels, then layernorm."""
    n, c, h, w = img.shape
    if h % 4 or w % 4:
        raise ShapeMismatch(f"patch_embed needs H,W divisible by 4, got {h}x{w}")
    x = conv2d(img, p.conv)                     # [N, C, h/4, w/4]
    x = transpose(x, (0, 2, 3, 1))              # [N, h/4, w/4, C]
    return layernorm(x, p.norm)


class PatchMergeParams(Params):
    def __init__(self, norm: LayerNormParams, reduce: LinearParams):
        self.norm = norm
        self.reduce = reduce


def init_patch_merge(rng, dim, dtype=np.float32):
    return PatchMergeParams(
        init_layernorm(4 * dim, dtype=dtype),
        init_linear(rng, 4 * dim, 2 * dim, dtype=dtype, bias=False),
    )


def patch_merge(x: Tensor, p: PatchMergeParams) -> Tensor:
    """Stack 2x2 neighborhoods (4C), layernorm, reduce 4C -> 2C."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"patch_merge needs even h,w, got {h}x{w}")
    quads = [
        x[:, 0::2, 0::2, :],
        x[:, 1::2, 0::2, :],
        x[:, 0::2, 1::2, :],
        x[:, 1::2, 1::2, :],
    ]
    merged = concat(quads, axis=3)
    return linear(layernorm(merged, p.norm), p.reduce)


class PatchExpandParams(Params):
    def __init__(self, expand: LinearParams, factor: int, out_channels: int):
        self.expand = expand
        self.factor = int(factor)
        self.out_channels = int(out_channels)


def init_patch_expand(rng, dim, factor, dtype=np.float32):
    """factor 2 halves channels; factor 4 (final) keeps them."""
    if factor == 2:
        out_ch = dim // 2
    elif factor == 4:
        out_ch = dim
    else:
        raise ValueError("patch_expand factor must be 2 or 4")
    lin = init_linear(rng, dim, factor * factor * out_ch, dtype=dtype, bias=False)
    return PatchExpandParams(lin, factor, out_ch)


def patch_expand(x: Tensor, p: PatchExpandParams) -> Tensor:
    """Linear to f*f*Cout then pixel-shuffle to [N, h*f, w*f, Cout]."""
    n, h, w, c = x.shape
    if c != p.expand.weight.shape[0]:
        raise ShapeMismatch(f"patch_expand: input C={c} vs {p.expand.weight.shape}")
    f, co = p.factor, p.out_channels
    y = linear(x, p.expand)                        # [N, h, w, f*f*Cout]
    y = reshape(y, (n, h, w, f, f, co))
    y = transpose(y, (0, 1, 3, 2, 4, 5))           # [N, h, f, w, f, Cout]
    return reshape(y, (n, h * f, w * f, co))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _linear_taps(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _interp_axis(x: Tensor, n_out: int, axis: int) -> Tensor:
    x = as_tensor(x)
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    i0, i1, t = _linear_taps(n_in, n_out)
    tshape = [1] * x.data.ndim
    tshape[axis] = n_out
    t = t.reshape(tshape).astype(x.dtype)
    out = np.take(x.data, i0, axis=axis) * (1.0 - t) + np.take(x.data, i1, axis=axis) * t

    def vjp(g, needs):
        z = np.zeros(x.shape, dtype=g.dtype)
        idx = [slice(None)] * x.data.ndim
        g0 = g * (1.0 - t)
        g1 = g * t
        idx[axis] = i0
        np.add.at(z, tuple(idx), g0)
        idx[axis] = i1
        np.add.at(z, tuple(idx), g1)
        return (z,)

    return apply_op("interp_axis", out, (x,), vjp)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize (align_corners=False) on NCHW."""
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch("resize target must be at least 1x1")
    return _interp_axis(_interp_axis(x, out_h, 2), out_w, 3)


def upsample_nearest2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g, needs):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return apply_op("upsample_nearest2x", out, (x,), vjp)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def minpool2d(x: Tensor, k: int) -> Tensor:
    """Valid k x k spatial min; ties route to the first window position."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeMismatch(f"minpool {k}x{k} on {h}x{w}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))  # [N,C,H',W',k,k]
    out_h, out_w = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, out_h, out_w, k * k)
    pick = np.argmin(flat, axis=-1)
    out = np.take_along_axis(flat, pick[..., None], axis=-1)[..., 0]

    def vjp(g, needs):
        di, dj = pick // k, pick % k
        ni, ci, hi, wi = np.indices((n, c, out_h, out_w), sparse=False)
        z = np.zeros_like(x.data)
        np.add.at(z, (ni, ci, hi + di, wi + dj), g)
        return (z,)

    return apply_op("minpool2d", out, (x,), vjp)


def _pool_bounds(n_in: int, n_out: int):
    i = np.arange(n_out)
    start = (i * n_in) // n_out
    end = -((-(i + 1) * n_in) // n_out)  # ceil
    return start, end


def adaptive_avgpool(x: Tensor, out_hw: int = 8) -> Tensor:
    """Mean-pool NCHW to [N, C, out, out] with adaptive bin edges."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    hs, he = _pool_bounds(h, out_hw)
    ws, we = _pool_bounds(w, out_hw)
    out = np.empty((n, c, out_hw, out_hw), dtype=x.dtype)
    for i in range(out_hw):
        for j in range(out_hw):
            out[:, :, i, j] = x.data[:, :, hs[i]:he[i], ws[j]:we[j]].mean(axis=(2, 3))

    def vjp(g, needs):
        z = np.zeros_like(x.data)
        for i in range(out_hw):
            for j in range(out_hw):
                size = (he[i] - hs[i]) * (we[j] - ws[j])
                z[:, :, hs[i]:he[i], ws[j]:we[j]] += (
                    g[:, :, i, j, None, None] / size
                )
        return (z,)

    return apply_op("adaptive_avgpool", out, (x,), vjp)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """x[N,C,H,W] * s[N,C], broadcast over the spatial axes."""
    x, s = as_tensor(x), as_tensor(s)
    if s.shape != x.shape[:2]:
        raise ShapeMismatch(f"scale_channels: {x.shape} with scales {s.shape}")
    out = x.data * s.data[:, :, None, None]

    def vjp(g, needs):
        gx = g * s.data[:, :, None, None] if needs[0] else None
        gs = (g * x.data).sum(axis=(2, 3)) if needs[1] else None
        return gx, gs

    return apply_op("scale_channels", out, (x, s), vjp)


# ---------------------------------------------------------------------------
# padding helpers for the network entry
# ---------------------------------------------------------------------------


def pad_to_multiple(x: Tensor, multiple: int):
    """Reflect-pad NCHW on the bottom/right up to the next multiple."""
    n, c, h, w = x.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    padded = pad_nd(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return padded, (h, w)


def crop_to(x: Tensor, h: int, w: int) -> Tensor:
    if x.shape[2] == h and x.shape[3] == w:
        return x
    return x[:, :, :h, :w]
