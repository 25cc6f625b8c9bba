"""Two-stage training: Adam with cosine annealing, paired flip/crop
augmentation, frozen error-estimator in stage 2, NaN-safe stepping.

All randomness is derived statelessly from (seed, purpose, step) so runs
are bit-reproducible and resume exactly.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .errors import NonFiniteLoss, ShapeMismatch
from .network import BeeParams, DenoiseParams, EnhanceMode, fuse_raw
from .nn import named_parameters, set_parameter, set_requires_grad
from .tensor import Tape, Tensor


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

STAGE_LR = {1: (5e-4, 5e-5), 2: (2e-3, 2e-4)}


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 600
    lr_start: float | None = None  # stage defaults when None
    lr_min: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    crop_size: int = 64
    seed: int = 42
    grad_clip: float = 1.0
    val_every: int = 0  # 0 disables validation logging
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    toggles: L.LossToggles = field(default_factory=L.LossToggles)
    mode: EnhanceMode = EnhanceMode.DPEC

    def resolved_lr(self):
        start, low = STAGE_LR[self.stage]
        return (self.lr_start if self.lr_start is not None else start,
                self.lr_min if self.lr_min is not None else low)

    def validate(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        start, low = self.resolved_lr()
        if low > start:
            raise ValueError(f"lr_min {low} exceeds lr_start {start}")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8) -> dict:
    """One bias-corrected Adam update; returns the new parameter dict."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * (g * g)
        if lr == 0.0:  # moments still advance; values stay bit-identical
            out[name] = p
            continue
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        new = (p.data - lr * update).astype(p.dtype)
        out[name] = Tensor(new, requires_grad=p.requires_grad)
    return out


def cosine_lr(step: int, total_steps: int, lr_start: float, lr_min: float) -> float:
    """Cosine decay from lr_start at step 0 to lr_min at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    frac = step / total_steps if total_steps else 1.0
    return lr_min + 0.5 * (lr_start - lr_min) * (1.0 + math.cos(math.pi * frac))


def clip_global_norm(grads: dict, max_norm: float) -> dict:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                          for g in grads.values()))
    if max_norm <= 0 or total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Deterministic per-purpose RNG stream, independent of call order."""
    tag = zlib.crc32(purpose.encode())
    return np.random.default_rng(np.random.SeedSequence((seed, tag) + indices))


def augment_flip(pair, rng: np.random.Generator):
    """Apply the same independent h/v flips to both images of a pair."""
    low, ref = pair
    if low.shape != ref.shape:
        raise ShapeMismatch("pair images must share a shape")
    if rng.random() < 0.5:
        low, ref = low[:, :, ::-1, :], ref[:, :, ::-1, :]
    if rng.random() < 0.5:
        low, ref = low[:, :, :, ::-1], ref[:, :, :, ::-1]
    return np.ascontiguousarray(low), np.ascontiguousarray(ref)


def random_crop(pair, size: int, rng: np.random.Generator):
    low, ref = pair
    h, w = low.shape[2], low.shape[3]
    if size <= 0 or (h == size and w == size):
        return low, ref
    if h < size or w < size:
        raise ShapeMismatch(f"images {h}x{w} smaller than crop {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return (low[:, :, top : top + size, left : left + size],
            ref[:, :, top : top + size, left : left + size])


# ---------------------------------------------------------------------------
# the stage driver
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    bee: BeeParams
    dn: DenoiseParams | None
    state: AdamState
    history: list


def format_history_line(entry: dict) -> str:
    parts = [str(entry["step"]), f"{entry['loss']:.9e}"]
    for k in sorted(entry):
        if k in ("step", "loss"):
            continue
        parts.append(f"{k}:{entry[k]:.9e}")
    return " ".join(parts)


def train_stage(pairs, cfg: TrainConfig, bee: BeeParams,
                dn: DenoiseParams | None = None, state: AdamState | None = None,
                feat=None, on_step=None, save_hook=None,
                stop_after: int | None = None) -> TrainResult:
    """Run one training stage over (low, reference) ndarray pairs.

    Stage 1 fits the error estimator; stage 2 freezes it bit-for-bit and
    fits the denoiser on top. A non-finite loss restores the last good
    parameters and raises NonFiniteLoss, leaving prior checkpoints intact.
    `stop_after` caps the number of steps this call performs (the cosine
    schedule still spans the full configured run), which is what resuming
    relies on.
    """
    cfg.validate()
    stage2 = cfg.stage == 2
    if stage2 and dn is None:
        raise ValueError("stage 2 training needs denoiser parameters")
    set_requires_grad(bee, not stage2)
    if dn is not None:
        set_requires_grad(dn, stage2)
    trainee = dn if stage2 else bee
    params = dict(named_parameters(trainee))
    if state is None:
        state = AdamState.init(params)
    if feat is None:
        feat = L.default_feature_bank(np.float32)

    lr_start, lr_min = cfg.resolved_lr()
    n_pairs = len(pairs)
    steps_per_epoch = max(1, math.ceil(n_pairs / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    bee_before = {k: t.data for k, t in named_parameters(bee)} if stage2 else None

    end_step = total_steps
    if stop_after is not None:
        end_step = min(total_steps, state.step + stop_after)
    history = []
    last_good = dict(params)
    for step in range(state.step, end_step):
        epoch, bi = divmod(step, steps_per_epoch)
        order = _stream(cfg.seed, "order", epoch).permutation(n_pairs)
        chosen = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
        if len(chosen) == 0:
            chosen = order[: cfg.batch_size]
        lows, refs = [], []
        for j, idx in enumerate(chosen):
            pair = pairs[int(idx)]
            pair = augment_flip(pair, _stream(cfg.seed, "flip", step, j))
            low, ref = random_crop(pair, cfg.crop_size,
                                   _stream(cfg.seed, "crop", step, j))
            lows.append(low)
            refs.append(ref)
        low_b = Tensor(np.concatenate(lows, axis=0).astype(np.float32))
        ref_b = Tensor(np.concatenate(refs, axis=0).astype(np.float32))

        lr = cosine_lr(step, total_steps, lr_start, lr_min)
        with Tape() as tape:
            pred = fuse_raw(low_b, bee, dn, cfg.mode, cfg.stage)
            total, terms = L.loss_total(pred, ref_b, low_b, cfg.weights,
                                        cfg.toggles, feat)
        loss_val = total.item()
        if not math.isfinite(loss_val):
            # roll back to the parameters that last produced a finite loss
            for name, t in last_good.items():
                set_parameter(trainee, name, t)
            raise NonFiniteLoss(f"loss became {loss_val} at step {step}")
        last_good = dict(params)
        grads = tape.backward(total)
        gdict = {name: grads.grad(t) for name, t in params.items()}
        gdict = clip_global_norm(gdict, cfg.grad_clip)
        params = adam_step(params, gdict, state, lr, cfg.beta1, cfg.beta2,
                           cfg.eps)
        for name, t in params.items():
            set_parameter(trainee, name, t)

        entry = {"step": step, "loss": loss_val, "lr": lr, **terms}
        if cfg.val_every and (step + 1) % cfg.val_every == 0:
            entry["val"] = evaluate_loss(pairs, cfg, bee, dn, feat)
        history.append(entry)
        if on_step is not None:
            on_step(entry)
        if save_hook is not None and (step + 1) % steps_per_epoch == 0:
            save_hook(step + 1, bee, dn, state)

    if stage2:
        after = {k: t.data for k, t in named_parameters(bee)}
        for k, before in bee_before.items():
            if before.tobytes() != after[k].tobytes():
                raise AssertionError(f"frozen parameter {k} changed in stage 2")
    return TrainResult(bee, dn, state, history)


def evaluate_loss(pairs, cfg: TrainConfig, bee, dn, feat=None) -> float:
    """Mean full-frame training objective over the pairs; no gradients."""
    if feat is None:
        feat = L.default_feature_bank(np.float32)
    vals = []
    for low, ref in pairs:
        pred = fuse_raw(Tensor(low.astype(np.float32)), bee, dn, cfg.mode,
                        cfg.stage)
        total, _ = L.loss_total(pred, Tensor(ref.astype(np.float32)),
                                Tensor(low.astype(np.float32)),
                                cfg.weights, cfg.toggles, feat)
        vals.append(total.item())
    return float(np.mean(vals))
