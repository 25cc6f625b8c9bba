"""Line-based `key = value` configuration with dotted keys.

`#` starts a comment, unknown or duplicate keys are rejected with their
line number, and parse(serialize(cfg)) returns an equal config.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .errors import ConfigError
from .losses import LossToggles, LossWeights
from .network import BeeConfig, DenoiseConfig, EnhanceMode
from .training import TrainConfig


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    bee: BeeConfig = field(default_factory=BeeConfig)
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)
    use_dc: bool = True


def _parse_bool(s: str) -> bool:
    if s in ("true", "yes", "1"):
        return True
    if s in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_mode(s: str) -> EnhanceMode:
    try:
        return EnhanceMode(s)
    except ValueError:
        raise ValueError(f"mode must be dpec or retinex, got {s!r}")


def _parse_depths(s: str) -> tuple:
    parts = [p.strip() for p in s.split(",") if p.strip()]
    return tuple(int(p) for p in parts)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, EnhanceMode):
        return value.value
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def _opt(parser):
    def run(s):
        return None if s == "" else parser(s)

    return run


# key -> (section path, attribute, parser)
_SCHEMA = {
    "train.stage": ("train", "stage", int),
    "train.epochs": ("train", "epochs", int),
    "train.lr_start": ("train", "lr_start", _opt(float)),
    "train.lr_min": ("train", "lr_min", _opt(float)),
    "train.beta1": ("train", "beta1", float),
    "train.beta2": ("train", "beta2", float),
    "train.batch_size": ("train", "batch_size", int),
    "train.crop_size": ("train", "crop_size", int),
    "train.seed": ("train", "seed", int),
    "train.grad_clip": ("train", "grad_clip", float),
    "train.val_every": ("train", "val_every", int),
    "train.mode": ("train", "mode", _parse_mode),
    "model.variant": ("bee", "variant", str),
    "model.channels": ("bee", "channels", int),
    "model.enc_depths": ("bee", "enc_depths", _parse_depths),
    "model.dec_depths": ("bee", "dec_depths", _parse_depths),
    "model.expand": ("bee", "expand", int),
    "model.use_mff": ("bee", "use_mff", _parse_bool),
    "model.use_dc": (None, "use_dc", _parse_bool),
    "ss2d.nstate": ("bee", "nstate", int),
    "ss2d.shared_directions": ("bee", "shared_directions", _parse_bool),
    "denoise.feat_channels": ("denoise", "feat_channels", int),
    "denoise.blocks": ("denoise", "blocks", int),
    "denoise.brighten_gamma": ("denoise", "brighten_gamma", float),
    "denoise.dark_window": ("denoise", "dark_window", int),
    "denoise.dark_blend": ("denoise", "dark_blend", float),
    "loss.w_ssim": ("train.weights", "ssim", float),
    "loss.w_perceptual": ("train.weights", "perceptual", float),
    "loss.w_inner": ("train.weights", "inner", float),
    "loss.w_his": ("train.weights", "his", float),
    "loss.w_tv": ("train.weights", "tv", float),
    "loss.w_smooth": ("train.weights", "smooth", float),
    "loss.use_ssim": ("train.toggles", "ssim", _parse_bool),
    "loss.use_perceptual": ("train.toggles", "perceptual", _parse_bool),
    "loss.use_inner": ("train.toggles", "inner", _parse_bool),
    "loss.use_his": ("train.toggles", "his", _parse_bool),
    "loss.use_tv": ("train.toggles", "tv", _parse_bool),
    "loss.use_smooth": ("train.toggles", "smooth", _parse_bool),
    "loss.negate_inner": ("train.toggles", "negate_inner", _parse_bool),
}


def _get_section(values: dict, path):
    return values if path is None else values[path]


def parse_config(text: str) -> RunConfig:
    """Parse config text; errors carry 1-based line numbers."""
    values = {
        "train": {}, "train.weights": {}, "train.toggles": {},
        "bee": {}, "denoise": {}, None: {},
    }
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(
                f"line {lineno}: duplicate key {key!r} (first on line {seen[key]})"
            )
        seen[key] = lineno
        section, attr, parser = _SCHEMA[key]
        try:
            values[section][attr] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc

    train = TrainConfig(
        weights=LossWeights(**values["train.weights"]),
        toggles=LossToggles(**values["train.toggles"]),
        **values["train"],
    )
    cfg = RunConfig(
        train=train,
        bee=BeeConfig(**values["bee"]),
        denoise=DenoiseConfig(**values["denoise"]),
        **values[None],
    )
    try:
        cfg.train.validate()
        cfg.bee.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; every key is emitted in schema order."""
    lines = []
    for key, (section, attr, _) in _SCHEMA.items():
        if section is None:
            value = getattr(cfg, attr)
        else:
            obj = cfg
            for part in section.split("."):
                obj = getattr(obj, part)
            value = getattr(obj, attr)
        lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text)


def config_hash(cfg: RunConfig) -> bytes:
    """Digest of the canonical serialization; stored in checkpoints."""
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).digest()
