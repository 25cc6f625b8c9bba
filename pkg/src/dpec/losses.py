"""Training losses: histogram-alignment, SSIM, perceptual, TV, smooth-L1,
inner product, and their weighted combination.

Histograms use triangular soft-binning so they carry gradients; hard
counting (used for evaluation) coincides with the soft version for values
that sit exactly on bin centers. The perceptual term runs a frozen,
seed-fixed conv bank instead of a pretrained backbone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Tensor, apply_op, as_tensor

REFLECTANCE_EPS = 1e-3
REFLECTANCE_MAX = 4.0
HIST_BINS = 256


# ---------------------------------------------------------------------------
# soft histogram
# ---------------------------------------------------------------------------


def soft_histogram(x: Tensor, nbins: int = HIST_BINS, lo: float = 0.0,
                   hi: float = 1.0) -> Tensor:
    """Normalized histogram with a triangular kernel one bin wide.

    Mass always sums to 1; values beyond the outermost bin centers are
    absorbed by the edge bins.
    """
    x = as_tensor(x)
    width = (hi - lo) / nbins
    c0 = lo + 0.5 * width
    clast = hi - 0.5 * width
    flat = x.data.reshape(-1)
    cnt = flat.size
    if not np.all(np.isfinite(flat)):
        # propagate so a NaN-producing forward pass is caught at the loss
        nan_hist = np.full(nbins, np.nan, dtype=x.dtype)
        return apply_op("soft_histogram", nan_hist, (x,),
                        lambda g, needs: (np.full(x.shape, np.nan, x.dtype),))
    xc = np.clip(flat, c0, clast)
    u = (xc - c0) / width
    left = np.clip(np.floor(u).astype(np.intp), 0, nbins - 2)
    frac = u - left
    hist = np.zeros(nbins, dtype=x.dtype)
    np.add.at(hist, left, (1.0 - frac) / cnt)
    np.add.at(hist, left + 1, frac / cnt)

    def vjp(g, needs):
        inside = (flat > c0) & (flat < clast)
        gx = (g[left + 1] - g[left]) * inside / (width * cnt)
        return (gx.reshape(x.shape).astype(x.dtype),)

    return apply_op("soft_histogram", hist, (x,), vjp)


def hard_histogram(values: np.ndarray, nbins: int = HIST_BINS, lo: float = 0.0,
                   hi: float = 1.0) -> np.ndarray:
    """Plain counting histogram over bin intervals; used for reporting."""
    edges = np.linspace(lo, hi, nbins + 1)
    counts, _ = np.histogram(np.clip(values, lo, hi), bins=edges)
    return counts / values.size


# ---------------------------------------------------------------------------
# illumination estimate for reference reflectance
# ---------------------------------------------------------------------------


def _gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur with reflect edges on the trailing two axes."""
    k = _gaussian_kernel1d(sigma)
    r = len(k) // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)]
    out = np.pad(img, pad, mode="reflect")
    out = np.apply_along_axis(lambda m: np.convolve(m, k, mode="valid"), -2, out)
    out = np.apply_along_axis(lambda m: np.convolve(m, k, mode="valid"), -1, out)
    return out.astype(img.dtype)


def estimate_illumination(target: np.ndarray, sigma: float = 3.0) -> np.ndarray:
    """Blurred max-over-RGB of the reference image, [N,1,H,W]."""
    peak = target.max(axis=1, keepdims=True)
    return gaussian_blur(peak, sigma)


# ---------------------------------------------------------------------------
# individual losses
# ---------------------------------------------------------------------------


def _check_same_shape(*tensors):
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatch(f"loss operands differ in shape: {shapes}")


def loss_his_retinex(pred: Tensor, target: Tensor, low_input: Tensor) -> Tensor:
    """Histogram distance on pixel values plus on Retinex reflectances."""
    pred, target, low_input = map(as_tensor, (pred, target, low_input))
    _check_same_shape(pred, target, low_input)
    h_pred = soft_histogram(pred, lo=0.0, hi=1.0)
    h_target = soft_histogram(target.detach(), lo=0.0, hi=1.0)
    pixel_term = 0.5 * T.absolute(h_pred - h_target).sum()

    inv_low = Tensor(1.0 / (low_input.data + REFLECTANCE_EPS))
    r_pred = T.clip(pred * inv_low, 0.0, REFLECTANCE_MAX)
    illum = estimate_illumination(target.data)
    r_target = np.clip(target.data / (illum + REFLECTANCE_EPS), 0.0, REFLECTANCE_MAX)
    hr_pred = soft_histogram(r_pred, lo=0.0, hi=REFLECTANCE_MAX)
    hr_target = soft_histogram(Tensor(r_target), lo=0.0, hi=REFLECTANCE_MAX)
    refl_term = 0.5 * T.absolute(hr_pred - hr_target).sum()
    return pixel_term + refl_term


SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _ssim_window(channels: int, dtype) -> nn.Conv2dParams:
    k = _gaussian_kernel1d(SSIM_SIGMA)  # radius ceil(3*1.5) = 5 -> 11 taps
    assert len(k) == SSIM_WINDOW
    w2d = np.outer(k, k)
    w = np.tile(w2d[None, None], (channels, 1, 1, 1)).astype(dtype)
    return nn.Conv2dParams(Tensor(w), None, stride=1, padding=0)


def ssim_map(a: Tensor, b: Tensor) -> Tensor:
    """Local SSIM over valid 11x11 Gaussian windows, per channel."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b)
    n, c, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeMismatch(f"ssim needs at least {SSIM_WINDOW} px per side")
    win = _ssim_window(c, a.dtype)
    mu_a = nn.depthwise_conv2d(a, win)
    mu_b = nn.depthwise_conv2d(b, win)
    var_a = nn.depthwise_conv2d(a * a, win) - mu_a * mu_a
    var_b = nn.depthwise_conv2d(b * b, win) - mu_b * mu_b
    cov = nn.depthwise_conv2d(a * b, win) - mu_a * mu_b
    lum = (2.0 * mu_a * mu_b + SSIM_C1) / (mu_a * mu_a + mu_b * mu_b + SSIM_C1)
    con = (2.0 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2)
    return lum * con


def loss_ssim(pred: Tensor, target: Tensor) -> Tensor:
    """1 - mean local SSIM."""
    return 1.0 - ssim_map(pred, as_tensor(target).detach()).mean()


class FixedFeatureExtractor:
    """Frozen seed-fixed conv bank: 3 -> 16 -> 32 -> 64, stride 2, SiLU."""

    SEED = 0x7EC0DE

    def __init__(self, dtype=np.float64):
        rng = np.random.default_rng(self.SEED)
        chans = [3, 16, 32, 64]
        self.stages = [
            nn.init_conv(rng, cin, cout, 3, stride=2, padding=1, dtype=dtype)
            for cin, cout in zip(chans[:-1], chans[1:])
        ]
        for st in self.stages:
            st.weight.requires_grad = False
            st.bias.requires_grad = False

    def features(self, x: Tensor) -> list[Tensor]:
        outs = []
        for st in self.stages:
            x = T.silu(nn.conv2d(x, st))
            outs.append(x)
        return outs


_FEATURE_BANKS: dict[str, FixedFeatureExtractor] = {}


def default_feature_bank(dtype) -> FixedFeatureExtractor:
    key = np.dtype(dtype).name
    if key not in _FEATURE_BANKS:
        _FEATURE_BANKS[key] = FixedFeatureExtractor(dtype=dtype)
    return _FEATURE_BANKS[key]


def loss_perceptual(pred: Tensor, target: Tensor,
                    feat: FixedFeatureExtractor | None = None) -> Tensor:
    """Mean L1 distance between frozen-bank features, summed over stages."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape(pred, target)
    if feat is None:
        feat = default_feature_bank(pred.dtype)
    total = None
    for fp, ft in zip(feat.features(pred), feat.features(target.detach())):
        term = T.absolute(fp - ft).mean()
        total = term if total is None else total + term
    return total


TV_EPS = 1e-12


def loss_tv(pred: Tensor) -> Tensor:
    """Isotropic total variation; out-of-range neighbors contribute zero.

    The quadratic smoothing floor sqrt(eps) is subtracted per pixel so a
    constant image scores exactly zero.
    """
    pred = as_tensor(pred)
    n, c, h, w = pred.shape
    if h < 2 or w < 2:
        raise ShapeMismatch("tv loss needs at least 2x2 images")
    dv = pred[:, :, 1:, :] - pred[:, :, :-1, :]
    dh = pred[:, :, :, 1:] - pred[:, :, :, :-1]
    dv = T.pad_nd(dv, ((0, 0), (0, 0), (0, 1), (0, 0)), mode="zero")
    dh = T.pad_nd(dh, ((0, 0), (0, 0), (0, 0), (0, 1)), mode="zero")
    mag = T.sqrt(dv * dv + dh * dh + TV_EPS) - np.sqrt(TV_EPS)
    return mag.sum() / (n * c)


def loss_smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Quadratic within a unit gap, linear beyond; mean over elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape(pred, target)
    d = T.absolute(pred - target)
    s = T.clip(d, 0.0, 1.0)
    # s*d - s^2/2 evaluates both branches of the piecewise form
    return (s * d - 0.5 * s * s).mean()


def loss_inner(pred: Tensor, low_input: Tensor) -> Tensor:
    """Normalized flat dot product against the low-light input."""
    pred, low_input = as_tensor(pred), as_tensor(low_input)
    _check_same_shape(pred, low_input)
    return (pred * low_input).sum() / float(pred.size)


# ---------------------------------------------------------------------------
# weighted total
# ---------------------------------------------------------------------------


@dataclass
class LossWeights:
    ssim: float = 2.0
    perceptual: float = 1.2
    inner: float = 1.0
    his: float = 1.0
    tv: float = 0.01
    smooth: float = 0.8

    def validate(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {v}")


@dataclass
class LossToggles:
    ssim: bool = True
    perceptual: bool = True
    inner: bool = True
    his: bool = True
    tv: bool = True
    smooth: bool = True
    negate_inner: bool = False  # flips the sign of the inner term


def loss_total(pred: Tensor, target: Tensor, low_input: Tensor,
               weights: LossWeights | None = None,
               toggles: LossToggles | None = None,
               feat: FixedFeatureExtractor | None = None):
    """Weighted sum of the enabled terms plus a per-term breakdown."""
    weights = weights or LossWeights()
    toggles = toggles or LossToggles()
    weights.validate()
    terms = {}
    if toggles.ssim:
        terms["ssim"] = (weights.ssim, loss_ssim(pred, target))
    if toggles.perceptual:
        terms["perceptual"] = (weights.perceptual,
                               loss_perceptual(pred, target, feat))
    if toggles.inner:
        sign = -1.0 if toggles.negate_inner else 1.0
        terms["inner"] = (weights.inner * sign, loss_inner(pred, low_input))
    if toggles.his:
        terms["his"] = (weights.his, loss_his_retinex(pred, target, low_input))
    if toggles.tv:
        terms["tv"] = (weights.tv, loss_tv(pred))
    if toggles.smooth:
        terms["smooth"] = (weights.smooth, loss_smooth_l1(pred, target))

    total = None
    breakdown = {}
    for name, (w, val) in terms.items():
        breakdown[name] = val.item()
        contrib = w * val
        total = contrib if total is None else total + contrib
    if total is None:
        total = Tensor(np.zeros((), dtype=pred.dtype))
    return total, breakdown
