"""Fixed little-endian checkpoint format with named tensors.

Layout: magic "DPEC", format version (u32), stage (u32), mode (u32),
seed (u64), config-hash length (u32) + bytes, tensor count (u32), then
per tensor: name length (u16) + UTF-8 name, dtype code (u8: 0=f32,
1=f64), rank (u8), dims (u32 each), raw little-endian payload. Loading
reproduces every tensor bit-exactly; version or structure mismatches are
hard errors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .network import (
    BeeConfig,
    BeeParams,
    DenoiseConfig,
    DenoiseParams,
    EnhanceMode,
    init_bee,
    init_denoise,
)
from .nn import named_parameters, set_parameter
from .tensor import Tensor
from .training import AdamState

MAGIC = b"DPEC"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_MODE_CODES = {EnhanceMode.DPEC: 0, EnhanceMode.DPEC_RETINEX: 1}
_CODE_MODES = {v: k for k, v in _MODE_CODES.items()}


@dataclass
class CheckpointMeta:
    stage: int = 1
    mode: EnhanceMode = EnhanceMode.DPEC
    seed: int = 0
    config_hash: bytes = b""


def save_checkpoint(path, meta: CheckpointMeta, tensors: dict) -> None:
    names = list(tensors)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    chunks = [MAGIC,
              struct.pack("<IIIQ", FORMAT_VERSION, meta.stage,
                          _MODE_CODES[meta.mode], meta.seed),
              struct.pack("<I", len(meta.config_hash)), meta.config_hash,
              struct.pack("<I", len(names))]
    for name in names:
        t = tensors[name]
        arr = np.asarray(t.data if isinstance(t, Tensor) else t)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Returns (CheckpointMeta, dict name -> ndarray)."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, stage, mode_code, seed = r.unpack("<IIIQ")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    if mode_code not in _CODE_MODES:
        raise CheckpointError(f"{path}: unknown mode code {mode_code}")
    (hash_len,) = r.unpack("<I")
    config_hash = r.take(hash_len)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        dt = _CODE_DTYPES[code]
        n_items = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(n_items * dt.itemsize)
        arr = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = arr
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    meta = CheckpointMeta(stage=stage, mode=_CODE_MODES[mode_code], seed=seed,
                          config_hash=config_hash)
    return meta, tensors


# ---------------------------------------------------------------------------
# model <-> named-tensor table
# ---------------------------------------------------------------------------


def collect_tensors(bee: BeeParams | None, dn: DenoiseParams | None,
                    state: AdamState | None = None) -> dict:
    out = {}
    if bee is not None:
        for name, t in named_parameters(bee):
            out[f"bee.{name}"] = t
    if dn is not None:
        for name, t in named_parameters(dn):
            out[f"dn.{name}"] = t
    if state is not None:
        for name, arr in state.m.items():
            out[f"opt.m.{name}"] = arr
        for name, arr in state.v.items():
            out[f"opt.v.{name}"] = arr
        out["opt.step"] = np.array([float(state.step)], dtype=np.float64)
    return out


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x)


def _load_into(container, tensors: dict, prefix: str, requires_grad: bool):
    for name, t in named_parameters(container):
        key = f"{prefix}.{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key}")
        arr = _as_array(tensors[key])
        if arr.shape != t.shape:
            raise CheckpointError(
                f"{key}: stored shape {arr.shape} vs expected {t.shape}"
            )
        set_parameter(container, name,
                      Tensor(arr.astype(t.dtype), requires_grad=requires_grad))


def infer_bee_config(tensors: dict) -> BeeConfig:
    """Reconstruct the estimator's hyperparameters from tensor shapes."""
    try:
        channels = tensors["bee.embed.conv.weight"].shape[0]
    except KeyError:
        raise CheckpointError("checkpoint lacks estimator tensors")

    def stage_depth(prefix):
        depth = 0
        while f"bee.{prefix}.{depth}.norm.gamma" in tensors:
            depth += 1
        return depth

    shared = "bee.enc1.0.ss2d.s6.a_log" in tensors
    a_key = ("bee.enc1.0.ss2d.s6.a_log" if shared
             else "bee.enc1.0.ss2d.s6.0.a_log")
    nstate = tensors[a_key].shape[1]
    inner = tensors["bee.enc1.0.gate_proj.weight"].shape[1]
    cfg = BeeConfig(
        channels=channels,
        enc_depths=(stage_depth("enc1"), stage_depth("enc2")),
        dec_depths=(stage_depth("dec1"), stage_depth("dec2")),
        expand=inner // channels,
        nstate=nstate,
        shared_directions=shared,
        use_mff="bee.mff_down.weight" in tensors,
    )
    cfg.validate()
    return cfg


def infer_denoise_config(tensors: dict) -> DenoiseConfig | None:
    if "dn.pre.weight" not in tensors:
        return None
    feat = tensors["dn.pre.weight"].shape[0]
    k = 0
    while f"dn.blocks.{k}.weight" in tensors:
        k += 1
    return DenoiseConfig(feat_channels=feat, blocks=k)


def restore_models(tensors: dict, dtype=np.float32):
    """Rebuild (bee, dn) parameter containers from a tensor table."""
    bee_cfg = infer_bee_config(tensors)
    rng = np.random.default_rng(0)  # immediately overwritten
    bee = init_bee(rng, bee_cfg, dtype=dtype)
    _load_into(bee, tensors, "bee", requires_grad=True)
    dn = None
    dn_cfg = infer_denoise_config(tensors)
    if dn_cfg is not None:
        dn = init_denoise(rng, dn_cfg, dtype=dtype)
        _load_into(dn, tensors, "dn", requires_grad=True)
    return bee, dn


def restore_adam(tensors: dict, params: dict) -> AdamState | None:
    """Rebuild optimizer state for the given parameter dict, if present."""
    if "opt.step" not in tensors:
        return None
    m, v = {}, {}
    for name, t in params.items():
        mk, vk = f"opt.m.{name}", f"opt.v.{name}"
        if mk not in tensors or vk not in tensors:
            raise CheckpointError(f"optimizer state missing for {name}")
        if tensors[mk].shape != t.shape:
            raise CheckpointError(f"{mk}: shape mismatch")
        m[name] = _as_array(tensors[mk]).astype(t.dtype)
        v[name] = _as_array(tensors[vk]).astype(t.dtype)
    return AdamState(m=m, v=v, step=int(_as_array(tensors["opt.step"])[0]))
