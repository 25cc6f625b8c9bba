"""Command-line interface: train, enhance, eval, selftest, bench, synth.

Exit codes: 0 success, 2 usage/config errors, 3 failed preconditions
(pairing, missing checkpoints, unsupported files), 4 numeric failures.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import errors as E
from . import imaging
from . import losses as L
from . import network as net
from . import nn
from . import selftest as st
from . import synth
from . import training as tr
from .checkpoint import (
    CheckpointMeta,
    collect_tensors,
    load_checkpoint,
    restore_adam,
    restore_models,
    save_checkpoint,
)
from .configfile import RunConfig, config_hash, load_config, parse_config
from .network import EnhanceMode
from .tensor import Tensor


def _fallback_seed(explicit: int | None, default: int = 42) -> int:
    if explicit is not None:
        return explicit
    env = os.environ.get("DPEC_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise E.ConfigError(f"DPEC_SEED must be an integer, got {env!r}")
    return default


def _paired_names(low_dir, ref_dir) -> list:
    def listing(d):
        if not os.path.isdir(d):
            raise E.PairingError(f"{d} is not a directory")
        return sorted(f for f in os.listdir(d) if f.lower().endswith(".png"))

    lows, refs = listing(low_dir), listing(ref_dir)
    if lows != refs:
        only_low = sorted(set(lows) - set(refs))
        only_ref = sorted(set(refs) - set(lows))
        raise E.PairingError(
            f"directories do not pair up: only in low {only_low[:5]}, "
            f"only in ref {only_ref[:5]}"
        )
    if not lows:
        raise E.PairingError(f"no .png pairs found in {low_dir}")
    return lows


def _load_pairs(low_dir, ref_dir):
    pairs = []
    for name in _paired_names(low_dir, ref_dir):
        low = imaging.to_tensor(imaging.load_png(os.path.join(low_dir, name)))
        ref = imaging.to_tensor(imaging.load_png(os.path.join(ref_dir, name)))
        if low.shape != ref.shape:
            raise E.PairingError(f"{name}: low {low.shape} vs ref {ref.shape}")
        pairs.append((low.data, ref.data))
    return pairs


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    with open(args.config, "r", encoding="utf-8") as fh:
        raw_text = fh.read()
    seed_in_file = any(
        line.split("#", 1)[0].split("=", 1)[0].strip() == "train.seed"
        for line in raw_text.splitlines()
    )
    if args.seed is not None:
        cfg.train.seed = args.seed
    elif not seed_in_file:
        cfg.train.seed = _fallback_seed(None, cfg.train.seed)

    stage = cfg.train.stage
    if stage == 2 and not cfg.use_dc:
        raise E.ConfigError("stage 2 requires model.use_dc = true")
    pairs = _load_pairs(args.data_low, args.data_ref)
    os.makedirs(args.out, exist_ok=True)
    chash = config_hash(cfg)

    init_rng = tr._stream(cfg.train.seed, "init")
    bee = net.init_bee(init_rng, cfg.bee)
    dn = net.init_denoise(init_rng, cfg.denoise) if cfg.use_dc else None
    state = None

    if args.resume:
        meta, tensors = load_checkpoint(args.resume)
        if meta.stage == stage:
            if meta.config_hash != chash:
                raise E.CheckpointError(
                    "resume checkpoint was produced by a different config"
                )
            bee, loaded_dn = restore_models(tensors)
            if loaded_dn is not None:
                dn = loaded_dn
            trainee = dn if stage == 2 else bee
            pdict = dict(nn.named_parameters(trainee))
            state = restore_adam(tensors, pdict)
        elif meta.stage == 1 and stage == 2:
            bee, _ = restore_models(tensors)  # fresh denoiser on top
        else:
            raise E.StageUnavailable(
                f"cannot start stage {stage} from a stage-{meta.stage} checkpoint"
            )
    elif stage == 2:
        raise E.MissingStage1Checkpoint(
            "stage 2 needs --resume pointing at a stage-1 (or stage-2) checkpoint"
        )

    ckpt_path = os.path.join(args.out, f"stage{stage}.ckpt")
    log_path = os.path.join(args.out, f"stage{stage}_loss.log")
    meta = CheckpointMeta(stage=stage, mode=cfg.train.mode,
                          seed=cfg.train.seed, config_hash=chash)

    def save_hook(step, bee_p, dn_p, st_):
        save_checkpoint(ckpt_path, meta, collect_tensors(bee_p, dn_p, st_))

    log_mode = "a" if (args.resume and os.path.exists(log_path)
                       and state is not None) else "w"
    log_fh = open(log_path, log_mode, encoding="utf-8")
    try:
        def on_step(entry):
            log_fh.write(tr.format_history_line(entry) + "\n")

        result = tr.train_stage(pairs, cfg.train, bee, dn, state=state,
                                on_step=on_step, save_hook=save_hook,
                                stop_after=args.steps)
    finally:
        log_fh.close()
    save_checkpoint(ckpt_path, meta,
                    collect_tensors(result.bee, result.dn, result.state))
    print(f"stage {stage}: {len(result.history)} steps, "
          f"checkpoint {ckpt_path}, log {log_path}")
    return 0


# ---------------------------------------------------------------------------
# enhance
# ---------------------------------------------------------------------------


def _enhance_one(in_path, out_path, bee, dn, mode, stage):
    img = imaging.to_tensor(imaging.load_png(in_path))
    out = net.enhance(img, bee, dn, mode, stage)
    imaging.save_png(out_path, imaging.from_tensor(out))


def cmd_enhance(args) -> int:
    meta, tensors = load_checkpoint(args.checkpoint)
    bee, dn = restore_models(tensors)
    stage = args.stage if args.stage is not None else meta.stage
    mode = EnhanceMode(args.mode) if args.mode else meta.mode
    if stage == 2 and dn is None:
        raise E.StageUnavailable(
            "checkpoint holds no denoiser; stage 2 output is unavailable"
        )
    if stage > meta.stage:
        raise E.StageUnavailable(
            f"checkpoint is stage {meta.stage}; cannot serve stage {stage}"
        )
    if os.path.isdir(args.input):
        os.makedirs(args.output, exist_ok=True)
        names = sorted(f for f in os.listdir(args.input)
                       if f.lower().endswith(".png"))
        if not names:
            raise E.IoError(f"no .png files in {args.input}")
        for name in names:
            _enhance_one(os.path.join(args.input, name),
                         os.path.join(args.output, name), bee, dn, mode, stage)
        print(f"enhanced {len(names)} images -> {args.output}")
    else:
        out = args.output
        if os.path.isdir(out):
            out = os.path.join(out, os.path.basename(args.input))
        _enhance_one(args.input, out, bee, dn, mode, stage)
        print(f"enhanced {args.input} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    names = _paired_names(args.dir_low, args.dir_ref)
    bee = dn = None
    stage, mode = 1, EnhanceMode.DPEC
    if args.checkpoint:
        meta, tensors = load_checkpoint(args.checkpoint)
        bee, dn = restore_models(tensors)
        stage = args.stage if args.stage is not None else meta.stage
        mode = EnhanceMode(args.mode) if args.mode else meta.mode
        if stage > meta.stage or (stage == 2 and dn is None):
            raise E.StageUnavailable(f"stage {stage} not in checkpoint")
    rows = []
    for name in names:
        low = imaging.to_tensor(imaging.load_png(os.path.join(args.dir_low, name)))
        ref = imaging.to_tensor(imaging.load_png(os.path.join(args.dir_ref, name)))
        pred = net.enhance(low, bee, dn, mode, stage) if bee is not None else low
        rows.append((name, imaging.psnr(pred, ref), imaging.ssim_index(pred, ref)))
    width = max(len(n) for n in rows for n in [n[0]]) if rows else 10
    width = max(width, len("image"))
    print(f"{'image':<{width}}  {'psnr':>8}  {'ssim':>7}")
    for name, p, s in rows:
        print(f"{name:<{width}}  {p:8.3f}  {s:7.4f}")
    mp = float(np.mean([r[1] for r in rows]))
    ms = float(np.mean([r[2] for r in rows]))
    print(f"{'mean':<{width}}  {mp:8.3f}  {ms:7.4f}")
    for name, p, s in rows:
        print(f"{name} {p:.6f} {s:.6f}")
    return 0


# ---------------------------------------------------------------------------
# selftest / bench / synth
# ---------------------------------------------------------------------------


def cmd_selftest(args) -> int:
    return st.run_selftest()


def cmd_bench(args) -> int:
    try:
        h, w = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise E.ConfigError(f"--size must look like 256x256, got {args.size!r}")
    seed = _fallback_seed(args.seed)
    if args.config:
        cfg = load_config(args.config)
        bee_cfg, dn_cfg = cfg.bee, cfg.denoise
    else:
        bee_cfg, dn_cfg = net.BeeConfig.full(), net.DenoiseConfig()
    rng = np.random.default_rng(seed)
    bee = net.init_bee(rng, bee_cfg)
    dn = net.init_denoise(rng, dn_cfg)
    img = Tensor(rng.uniform(0, 1, (1, 3, h, w)).astype(np.float32))
    net.enhance(img, bee, dn, EnhanceMode.DPEC, 2)  # warmup
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        net.enhance(img, bee, dn, EnhanceMode.DPEC, 2)
        times.append(time.perf_counter() - t0)
    mean = float(np.mean(times))
    std = float(np.std(times))
    print(f"forward {h}x{w}: {mean:.4f}s +/- {std:.4f}s over {args.iters} iters "
          f"({nn.param_count(bee) + nn.param_count(dn)} params)")
    return 0


def cmd_synth(args) -> int:
    seed = _fallback_seed(args.seed)
    names = synth.generate_dataset(args.out, args.count, seed, args.size)
    print(f"wrote {len(names)} pairs under {args.out}/low and {args.out}/ref "
          f"(seed {seed})")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dpec",
        description="Dual-path error-compensation low-light enhancement",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--data-low", required=True)
    p.add_argument("--data-ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None,
                   help="stop after this many steps (for smoke runs)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("enhance", help="enhance a PNG or a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--mode", choices=["dpec", "retinex"], default=None)
    p.add_argument("--stage", type=int, choices=[1, 2], default=None)
    p.set_defaults(fn=cmd_enhance)

    p = sub.add_parser("eval", help="PSNR/SSIM over paired directories")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--dir-low", required=True)
    p.add_argument("--dir-ref", required=True)
    p.add_argument("--mode", choices=["dpec", "retinex"], default=None)
    p.add_argument("--stage", type=int, choices=[1, 2], default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("selftest", help="run built-in verification suites")
    p.set_defaults(fn=cmd_selftest)

    p = sub.add_parser("bench", help="forward-pass throughput")
    p.add_argument("--size", default="64x64")
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=2)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(fn=cmd_synth)
    return ap


_EXIT_CODES = [
    ((E.ConfigError,), 2),
    ((E.NonFiniteLoss, E.NonFiniteInput, E.DivisionDomain), 4),
    ((E.DpecError,), 3),
]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except E.DpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for types, code in _EXIT_CODES:
            if isinstance(exc, types):
                return code
        return 3


if __name__ == "__main__":
    sys.exit(main())
