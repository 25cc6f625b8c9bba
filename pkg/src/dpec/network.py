"""The two enhancement networks and their fusion modes.

The brightness error estimator is a U-shaped stack of gated state-space
blocks over 4x4 patch tokens: two encoder stages (with a 2x2 merge in
between), a mirrored decoder, an optional cross-scale fusion pair (a
strided down-convolution from the embed-resolution features and an
upsampled path from the bottleneck), and a final 4x expansion to a
3-channel error map. The denoiser brightens the input, refines it with a
small conv stack re-weighted by DCT-band channel attention, and applies
a dark-channel cleanup step.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import MissingDenoiser, ShapeMismatch
from . import nn
from .nn import (
    Conv2dParams,
    LayerNormParams,
    LinearParams,
    Params,
)
from .ss2d import Ss2dParams, init_ss2d, ss2d_apply
from .tensor import Tensor


# ---------------------------------------------------------------------------
# VSS block
# ---------------------------------------------------------------------------


class VssParams(Params):
    def __init__(self, norm, gate_proj, in_proj, dwconv, ss2d, out_proj):
        self.norm = norm            # LayerNormParams over D
        self.gate_proj = gate_proj  # D -> inner
        self.in_proj = in_proj      # D -> inner
        self.dwconv = dwconv        # depthwise 3x3 on inner
        self.ss2d = ss2d            # Ss2dParams on inner
        self.out_proj = out_proj    # inner -> D


def init_vss(rng, dim, expand=2, nstate=16, shared_directions=True,
             dtype=np.float32) -> VssParams:
    inner = expand * dim
    return VssParams(
        nn.init_layernorm(dim, dtype=dtype),
        nn.init_linear(rng, dim, inner, dtype=dtype),
        nn.init_linear(rng, dim, inner, dtype=dtype),
        nn.init_depthwise(rng, inner, 3, dtype=dtype),
        init_ss2d(rng, inner, nstate=nstate, shared=shared_directions, dtype=dtype),
        nn.init_linear(rng, inner, dim, dtype=dtype),
    )


def vss_block(x: Tensor, p: VssParams) -> Tensor:
    """Gated residual block: norm, (gate | conv+scan) paths, fuse, add."""
    residual = x
    x = nn.layernorm(x, p.norm)
    gate = T.silu(nn.linear(x, p.gate_proj))
    y = nn.linear(x, p.in_proj)
    y = T.transpose(y, (0, 3, 1, 2))
    y = nn.depthwise_conv2d(y, p.dwconv)
    y = T.transpose(y, (0, 2, 3, 1))
    y = T.silu(y)
    y = ss2d_apply(y, p.ss2d)  # ends with its own layernorm
    y = gate * y
    return nn.linear(y, p.out_proj) + residual


# ---------------------------------------------------------------------------
# brightness error estimator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BeeConfig:
    channels: int = 96
    enc_depths: tuple = (2, 3)
    dec_depths: tuple = (3, 2)
    expand: int = 2
    nstate: int = 16
    shared_directions: bool = True
    use_mff: bool = True
    variant: str = "custom"

    @classmethod
    def full(cls, use_mff=True):
        return cls(variant="full", use_mff=use_mff)

    @classmethod
    def reduced(cls, channels=16, depths=(1, 1), nstate=8, use_mff=True):
        return cls(channels=channels, enc_depths=tuple(depths),
                   dec_depths=tuple(depths[::-1]), nstate=nstate,
                   use_mff=use_mff, variant="reduced")

    def validate(self):
        if len(self.enc_depths) != 2 or len(self.dec_depths) != 2:
            raise ValueError("exactly two encoder and two decoder stages")
        if self.variant == "full":
            if self.channels != 96:
                raise ValueError("full config requires 96 embed channels")
            if tuple(self.enc_depths) != (2, 3) or tuple(self.dec_depths) != (3, 2):
                raise ValueError("full config requires [2,3]/[3,2] block counts")


class BeeParams(Params):
    def __init__(self, cfg: BeeConfig, embed, enc1, merge, enc2, mff_down,
                 mff_up, dec1, expand2, skip_proj, dec2, expand4, head):
        self.embed = embed          # patch embed 3 -> C
        self.enc1 = enc1            # [VssParams] at C
        self.merge = merge          # C -> 2C
        self.enc2 = enc2            # [VssParams] at 2C
        self.mff_down = mff_down    # strided conv C -> 2C (or None)
        self.mff_up = mff_up        # conv 2C -> C on upsampled grid (or None)
        self.dec1 = dec1            # [VssParams] at 2C
        self.expand2 = expand2      # 2C -> C, spatial x2
        self.skip_proj = skip_proj  # 2C -> C skip alignment
        self.dec2 = dec2            # [VssParams] at C
        self.expand4 = expand4      # C -> C, spatial x4
        self.head = head            # C -> 3
        self.cfg = cfg


def init_bee(rng, cfg: BeeConfig, dtype=np.float32, zero_head=True) -> BeeParams:
    """Build estimator parameters; the error head starts at zero so the
    initial network is the identity enhancement (error map = 0), which
    keeps early training inside the representable [0,1] range."""
    cfg.validate()
    c = cfg.channels
    kw = dict(expand=cfg.expand, nstate=cfg.nstate,
              shared_directions=cfg.shared_directions, dtype=dtype)
    mff_down = mff_up = None
    if cfg.use_mff:
        mff_down = nn.init_conv(rng, c, 2 * c, 3, stride=2, padding=1, dtype=dtype)
        mff_up = nn.init_conv(rng, 2 * c, c, 3, stride=1, padding=1, dtype=dtype)
    head = nn.init_linear(rng, c, 3, dtype=dtype,
                          scale=0.0 if zero_head else 1.0)
    return BeeParams(
        cfg,
        nn.init_patch_embed(rng, 3, c, dtype=dtype),
        [init_vss(rng, c, **kw) for _ in range(cfg.enc_depths[0])],
        nn.init_patch_merge(rng, c, dtype=dtype),
        [init_vss(rng, 2 * c, **kw) for _ in range(cfg.enc_depths[1])],
        mff_down,
        mff_up,
        [init_vss(rng, 2 * c, **kw) for _ in range(cfg.dec_depths[0])],
        nn.init_patch_expand(rng, 2 * c, 2, dtype=dtype),
        nn.init_linear(rng, 2 * c, c, dtype=dtype),
        [init_vss(rng, c, **kw) for _ in range(cfg.dec_depths[1])],
        nn.init_patch_expand(rng, c, 4, dtype=dtype),
        head,
    )


def _run_blocks(x, blocks):
    for b in blocks:
        x = vss_block(x, b)
    return x


def _nchw(x):
    return T.transpose(x, (0, 3, 1, 2))


def _nhwc(x):
    return T.transpose(x, (0, 2, 3, 1))


def bee_forward(img: Tensor, p: BeeParams) -> Tensor:
    """Estimate the per-pixel brightness error map (unbounded values)."""
    n, c, h, w = img.shape
    if c != 3:
        raise ShapeMismatch(f"expected 3-channel NCHW input, got {img.shape}")
    padded, (h0, w0) = nn.pad_to_multiple(img, 8)
    hp, wp = padded.shape[2], padded.shape[3]

    d1 = nn.patch_embed(padded, p.embed)             # [N, h/4, w/4, C]
    e1 = _run_blocks(d1, p.enc1)
    d2 = _run_blocks(nn.patch_merge(e1, p.merge), p.enc2)  # [N, h/8, w/8, 2C]

    dec_in = d2
    if p.cfg.use_mff:
        m1 = _nhwc(nn.conv2d(_nchw(d1), p.mff_down))  # detail path at h/8, 2C
        dec_in = dec_in + m1
    u1 = _run_blocks(dec_in, p.dec1)

    x = nn.patch_expand(u1, p.expand2)               # [N, h/4, w/4, C]
    skip = nn.linear(d2, p.skip_proj)
    skip = _nhwc(nn.resize_bilinear(_nchw(skip), hp // 4, wp // 4))
    u2 = _run_blocks(x + skip, p.dec2)

    u_final = u2
    if p.cfg.use_mff:
        m2 = nn.upsample_nearest2x(_nchw(d2))        # context path to h/4
        m2 = nn.conv2d(m2, p.mff_up)
        m2 = _nhwc(nn.resize_bilinear(m2, hp // 4, wp // 4))
        u_final = u_final + m2

    out = nn.patch_expand(u_final, p.expand4)        # [N, h, w, C]
    out = nn.linear(out, p.head)                     # [N, h, w, 3]
    return nn.crop_to(_nchw(out), h0, w0)


# ---------------------------------------------------------------------------
# DCT helpers and multi-spectral channel attention
# ---------------------------------------------------------------------------


@lru_cache(maxsize=4)
def _dct8_matrix(dtype_name: str) -> np.ndarray:
    """Orthonormal type-II DCT basis for length 8."""
    i = np.arange(8)
    mat = np.cos(np.pi * (2 * i[None, :] + 1) * i[:, None] / 16.0)
    mat *= np.sqrt(2.0 / 8.0)
    mat[0] = 1.0 / np.sqrt(8.0)
    return mat.astype(dtype_name)


def dct2d_8x8(block: Tensor) -> Tensor:
    """Orthonormal 2-D DCT of one 8x8 block."""
    if block.shape != (8, 8):
        raise ShapeMismatch(f"dct2d_8x8 expects [8,8], got {block.shape}")
    m = Tensor(_dct8_matrix(block.dtype.name))
    return T.matmul(T.matmul(m, block), T.transpose(m, (1, 0)))


def idct2d_8x8(block: Tensor) -> Tensor:
    """Exact inverse of dct2d_8x8 (the transpose transform)."""
    if block.shape != (8, 8):
        raise ShapeMismatch(f"idct2d_8x8 expects [8,8], got {block.shape}")
    m = Tensor(_dct8_matrix(block.dtype.name))
    return T.matmul(T.matmul(T.transpose(m, (1, 0)), block), m)


def zigzag_frequencies(count: int = 16):
    """(row, col) frequency pairs in JPEG zig-zag order, lowest first."""
    coords = []
    for s in range(15):
        diag = [(i, s - i) for i in range(s + 1) if i < 8 and s - i < 8]
        coords.extend(diag[::-1] if s % 2 == 0 else diag)
    return coords[:count]


@lru_cache(maxsize=8)
def _mca_basis(channels: int, dtype_name: str) -> np.ndarray:
    """Per-channel 8x8 DCT basis function; 16 frequency groups."""
    m = _dct8_matrix("float64")
    freqs = zigzag_frequencies(16)
    group = channels // 16
    basis = np.empty((channels, 8, 8))
    for gi, (u, v) in enumerate(freqs):
        basis[gi * group : (gi + 1) * group] = np.outer(m[u], m[v])
    return basis.astype(dtype_name)


class McaParams(Params):
    def __init__(self, squeeze: LinearParams, excite: LinearParams, channels: int):
        self.squeeze = squeeze
        self.excite = excite
        self.channels = int(channels)


def init_mca(rng, channels, dtype=np.float32) -> McaParams:
    if channels % 16:
        raise ValueError("MCA channels must be divisible by 16")
    hidden = max(1, channels // 4)
    return McaParams(
        nn.init_linear(rng, channels, hidden, dtype=dtype),
        nn.init_linear(rng, hidden, channels, dtype=dtype),
        channels,
    )


def mca(x: Tensor, p: McaParams) -> Tensor:
    """Re-weight channels by their DCT frequency-band statistics."""
    n, f, h, w = x.shape
    if f != p.channels or f % 16:
        raise ShapeMismatch(f"mca expects {p.channels} channels, got {f}")
    pooled = nn.adaptive_avgpool(x, 8)                     # [N, F, 8, 8]
    basis = Tensor(np.broadcast_to(_mca_basis(f, x.dtype.name), pooled.shape).copy())
    stat = T.reduce("sum", pooled * basis, axes=(2, 3))    # [N, F]
    z = T.silu(nn.linear(stat, p.squeeze))
    weights = T.sigmoid(nn.linear(z, p.excite))            # (0, 1)
    return nn.scale_channels(x, weights)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiseConfig:
    feat_channels: int = 64
    blocks: int = 4
    brighten_gamma: float = 0.4
    dark_window: int = 7
    dark_blend: float = 0.1


class DenoiseParams(Params):
    def __init__(self, cfg: DenoiseConfig, pre, blocks, mca_p, out):
        self.pre = pre        # conv 6 -> F
        self.blocks = blocks  # [conv F -> F] x K
        self.mca = mca_p
        self.out = out        # conv F -> 3
        self.cfg = cfg


def init_denoise(rng, cfg: DenoiseConfig, dtype=np.float32,
                 zero_out=True) -> DenoiseParams:
    """The output conv starts at zero, so the initial denoiser is just the
    dark-channel refinement of its input (near-identity)."""
    f = cfg.feat_channels
    return DenoiseParams(
        cfg,
        nn.init_conv(rng, 6, f, 3, padding=1, dtype=dtype),
        [nn.init_conv(rng, f, f, 3, padding=1, dtype=dtype)
         for _ in range(cfg.blocks)],
        init_mca(rng, f, dtype=dtype),
        nn.init_conv(rng, f, 3, 3, padding=1, dtype=dtype,
                     scale=0.0 if zero_out else 1.0),
    )


def brighten(img: Tensor, gamma: float = 0.4) -> Tensor:
    """Monotone gamma curve on [0,1]; endpoints are fixed."""
    return T.power(T.clip(img, 0.0, 1.0), gamma)


def dark_channel_refine(img: Tensor, window: int = 7, blend: float = 0.1) -> Tensor:
    """Subtract a fraction of the local dark channel, clamped to [0,1]."""
    x = T.clip(img, 0.0, 1.0)
    dark = T.reduce("min", x, axes=1, keepdims=True)       # [N,1,H,W]
    r = (window - 1) // 2
    dark = T.pad_nd(dark, ((0, 0), (0, 0), (r, r), (r, r)), mode="reflect")
    dark = nn.minpool2d(dark, window)                      # [N,1,H,W]
    dark3 = T.concat([dark, dark, dark], axis=1)
    out = (1.0 - blend) * x + blend * (x - dark3)
    return T.clip(out, 0.0, 1.0)


def denoise_forward(img: Tensor, p: DenoiseParams) -> Tensor:
    """Brighten, refine with attention-gated convs, dark-channel cleanup."""
    cfg = p.cfg
    x0 = T.clip(img, 0.0, 1.0)
    feats = T.concat([x0, brighten(x0, cfg.brighten_gamma)], axis=1)
    feats = T.silu(nn.conv2d(feats, p.pre))
    res = feats
    for blk in p.blocks:
        feats = T.silu(nn.conv2d(feats, blk))
    feats = mca(feats, p.mca)
    feats = feats + res
    out = nn.conv2d(feats, p.out) + x0
    return dark_channel_refine(out, cfg.dark_window, cfg.dark_blend)


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


class EnhanceMode(enum.Enum):
    DPEC = "dpec"
    DPEC_RETINEX = "retinex"


def fuse_raw(img: Tensor, bee: BeeParams, dn: DenoiseParams | None,
             mode: EnhanceMode = EnhanceMode.DPEC, stage: int = 1) -> Tensor:
    """The fusion before output clamping; this is what training optimizes
    (an unclamped objective keeps gradients alive on saturated pixels)."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if stage == 2 and dn is None:
        raise MissingDenoiser("stage 2 needs denoiser parameters")
    err = bee_forward(img, bee)
    base = img if stage == 1 else denoise_forward(img, dn)
    if mode is EnhanceMode.DPEC:
        return base + err
    return base * T.sigmoid(err)


def enhance(img: Tensor, bee: BeeParams, dn: DenoiseParams | None,
            mode: EnhanceMode = EnhanceMode.DPEC, stage: int = 1) -> Tensor:
    """Run the chosen fusion (additive error or reflectance product) and
    clamp to displayable range."""
    return T.clip(fuse_raw(img, bee, dn, mode, stage), 0.0, 1.0)
