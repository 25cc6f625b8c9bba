"""CLI behavior: commands, exit codes, determinism contracts."""

import hashlib
import os

import numpy as np
import pytest

from dpec import cli
from dpec.checkpoint import CheckpointMeta, collect_tensors, save_checkpoint
from dpec.imaging import load_png, to_tensor
from dpec.network import BeeConfig, DenoiseConfig, init_bee, init_denoise
from dpec.synth import generate_dataset
from dpec.training import _stream


TINY_CFG = """\
train.stage = 1
train.epochs = 3
train.batch_size = 2
train.crop_size = 16
train.seed = 11
train.lr_start = 0.002
train.lr_min = 0.0002
model.variant = reduced
model.channels = 8
model.enc_depths = 1,1
model.dec_depths = 1,1
ss2d.nstate = 4
denoise.feat_channels = 16
denoise.blocks = 1
loss.w_his = 0.01
loss.w_tv = 0.001
"""


@pytest.fixture()
def workspace(tmp_path):
    generate_dataset(tmp_path / "data", 2, seed=11, size=24)
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(TINY_CFG)
    cfg2 = tmp_path / "cfg2.txt"
    cfg2.write_text(TINY_CFG.replace("train.stage = 1", "train.stage = 2"))
    return tmp_path


def run(argv):
    return cli.main([str(a) for a in argv])


class TestTrain:
    def test_writes_checkpoint_and_log(self, workspace):
        out = workspace / "run"
        rc = run(["train", "--config", workspace / "cfg.txt",
                  "--data-low", workspace / "data" / "low",
                  "--data-ref", workspace / "data" / "ref",
                  "--out", out])
        assert rc == 0
        assert (out / "stage1.ckpt").exists()
        lines = (out / "stage1_loss.log").read_text().splitlines()
        assert len(lines) == 3
        assert lines[0].split()[0] == "0"

    def test_byte_deterministic(self, workspace):
        args = ["train", "--config", workspace / "cfg.txt",
                "--data-low", workspace / "data" / "low",
                "--data-ref", workspace / "data" / "ref"]
        run(args + ["--out", workspace / "a"])
        run(args + ["--out", workspace / "b"])
        ca = (workspace / "a" / "stage1.ckpt").read_bytes()
        cb = (workspace / "b" / "stage1.ckpt").read_bytes()
        assert ca == cb
        la = (workspace / "a" / "stage1_loss.log").read_bytes()
        lb = (workspace / "b" / "stage1_loss.log").read_bytes()
        assert la == lb

    def test_resume_continues_steps(self, workspace):
        out = workspace / "run"
        base = ["train", "--config", workspace / "cfg.txt",
                "--data-low", workspace / "data" / "low",
                "--data-ref", workspace / "data" / "ref", "--out", out]
        run(base + ["--steps", "2"])
        rc = run(base + ["--resume", out / "stage1.ckpt"])
        assert rc == 0
        lines = (out / "stage1_loss.log").read_text().splitlines()
        assert [ln.split()[0] for ln in lines] == ["0", "1", "2"]

    def test_stage2_without_checkpoint_exit3(self, workspace, capsys):
        rc = run(["train", "--config", workspace / "cfg2.txt",
                  "--data-low", workspace / "data" / "low",
                  "--data-ref", workspace / "data" / "ref",
                  "--out", workspace / "r2"])
        assert rc == 3
        assert "stage" in capsys.readouterr().err

    def test_stage2_after_stage1(self, workspace):
        out = workspace / "run"
        run(["train", "--config", workspace / "cfg.txt",
             "--data-low", workspace / "data" / "low",
             "--data-ref", workspace / "data" / "ref", "--out", out])
        rc = run(["train", "--config", workspace / "cfg2.txt",
                  "--data-low", workspace / "data" / "low",
                  "--data-ref", workspace / "data" / "ref", "--out", out,
                  "--resume", out / "stage1.ckpt"])
        assert rc == 0
        assert (out / "stage2.ckpt").exists()

    def test_config_error_exit2(self, workspace, capsys):
        bad = workspace / "bad.txt"
        bad.write_text("train.epochs = 3\nwho.knows = 1\n")
        rc = run(["train", "--config", bad,
                  "--data-low", workspace / "data" / "low",
                  "--data-ref", workspace / "data" / "ref",
                  "--out", workspace / "x"])
        assert rc == 2
        assert "line 2" in capsys.readouterr().err

    def test_pairing_error_exit3(self, workspace):
        os.remove(workspace / "data" / "ref" / "pair_001.png")
        rc = run(["train", "--config", workspace / "cfg.txt",
                  "--data-low", workspace / "data" / "low",
                  "--data-ref", workspace / "data" / "ref",
                  "--out", workspace / "x"])
        assert rc == 3


def write_identity_checkpoint(path, seed=7, channels=8):
    """Zero-head estimator: stage-1 enhancement is the identity map."""
    rng = _stream(seed, "init")
    bee = init_bee(rng, BeeConfig.reduced(channels=channels, nstate=4))
    dn = init_denoise(rng, DenoiseConfig(feat_channels=16, blocks=1))
    save_checkpoint(path, CheckpointMeta(stage=2, seed=seed),
                    collect_tensors(bee, dn))


class TestEnhance:
    def test_identity_checkpoint_round_trips_pixels(self, workspace):
        ckpt = workspace / "id.ckpt"
        write_identity_checkpoint(ckpt)
        src = workspace / "data" / "low" / "pair_000.png"
        out = workspace / "out.png"
        rc = run(["enhance", "--checkpoint", ckpt, "--input", src,
                  "--output", out, "--stage", "1"])
        assert rc == 0
        np.testing.assert_array_equal(load_png(out).pixels, load_png(src).pixels)

    def test_directory_mode_same_filenames(self, workspace):
        ckpt = workspace / "id.ckpt"
        write_identity_checkpoint(ckpt)
        outdir = workspace / "enhanced"
        rc = run(["enhance", "--checkpoint", ckpt,
                  "--input", workspace / "data" / "low", "--output", outdir])
        assert rc == 0
        assert sorted(os.listdir(outdir)) == ["pair_000.png", "pair_001.png"]

    def test_byte_deterministic(self, workspace):
        ckpt = workspace / "id.ckpt"
        write_identity_checkpoint(ckpt)
        src = workspace / "data" / "low" / "pair_000.png"
        run(["enhance", "--checkpoint", ckpt, "--input", src,
             "--output", workspace / "o1.png", "--stage", "2"])
        run(["enhance", "--checkpoint", ckpt, "--input", src,
             "--output", workspace / "o2.png", "--stage", "2"])
        assert (workspace / "o1.png").read_bytes() == (workspace / "o2.png").read_bytes()

    def test_stage_unavailable_exit3(self, workspace):
        ckpt = workspace / "s1.ckpt"
        rng = _stream(3, "init")
        bee = init_bee(rng, BeeConfig.reduced(channels=8, nstate=4))
        save_checkpoint(ckpt, CheckpointMeta(stage=1), collect_tensors(bee, None))
        rc = run(["enhance", "--checkpoint", ckpt,
                  "--input", workspace / "data" / "low" / "pair_000.png",
                  "--output", workspace / "x.png", "--stage", "2"])
        assert rc == 3

    def test_golden_snapshot(self, workspace):
        # frozen digest from the first verified run of this build
        ckpt = workspace / "g.ckpt"
        write_identity_checkpoint(ckpt, seed=2026)
        src = workspace / "data" / "low" / "pair_000.png"
        out = workspace / "golden.png"
        run(["enhance", "--checkpoint", ckpt, "--input", src,
             "--output", out, "--stage", "2", "--mode", "dpec"])
        digest = hashlib.sha256(out.read_bytes()).hexdigest()
        assert digest == GOLDEN_ENHANCE_SHA256


class TestEval:
    def test_ref_vs_ref_perfect(self, workspace, capsys):
        rc = run(["eval", "--dir-low", workspace / "data" / "ref",
                  "--dir-ref", workspace / "data" / "ref"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "99.000" in out and "1.0000" in out

    def test_machine_lines_match_metrics(self, workspace, capsys):
        run(["eval", "--dir-low", workspace / "data" / "low",
             "--dir-ref", workspace / "data" / "ref"])
        out = capsys.readouterr().out.splitlines()
        machine = out[-2:]  # machine-readable block follows the table
        assert all(l.startswith("pair_") and len(l.split()) == 3 for l in machine)
        from dpec.imaging import psnr, ssim_index
        for line in machine:
            name, p, s = line.split()
            low = to_tensor(load_png(workspace / "data" / "low" / name))
            ref = to_tensor(load_png(workspace / "data" / "ref" / name))
            assert float(p) == pytest.approx(psnr(low, ref), abs=1e-5)
            assert float(s) == pytest.approx(ssim_index(low, ref), abs=1e-5)

    def test_noise_lowers_psnr(self, workspace, capsys):
        run(["eval", "--dir-low", workspace / "data" / "ref",
             "--dir-ref", workspace / "data" / "ref"])
        clean = capsys.readouterr().out
        # write noisy copies of ref
        noisy_dir = workspace / "noisy"
        os.makedirs(noisy_dir)
        rng = np.random.default_rng(0)
        from dpec.imaging import ImageRGB8, save_png
        for name in os.listdir(workspace / "data" / "ref"):
            img = load_png(workspace / "data" / "ref" / name)
            noisy = np.clip(
                img.pixels.astype(np.int16) + rng.integers(-20, 21, img.pixels.shape),
                0, 255,
            ).astype(np.uint8)
            save_png(noisy_dir / name, ImageRGB8(img.width, img.height, noisy))
        run(["eval", "--dir-low", noisy_dir, "--dir-ref", workspace / "data" / "ref"])
        noisy_out = capsys.readouterr().out

        def mean_psnr(text):
            for line in text.splitlines():
                if line.startswith("mean"):
                    return float(line.split()[1])

        assert mean_psnr(noisy_out) < mean_psnr(clean)


class TestOtherCommands:
    def test_synth_seeded(self, workspace):
        rc = run(["synth", "--out", workspace / "s1", "--count", "1",
                  "--seed", "5", "--size", "16"])
        assert rc == 0
        run(["synth", "--out", workspace / "s2", "--count", "1",
             "--seed", "5", "--size", "16"])
        a = (workspace / "s1" / "low" / "pair_000.png").read_bytes()
        b = (workspace / "s2" / "low" / "pair_000.png").read_bytes()
        assert a == b

    def test_synth_env_seed(self, workspace, monkeypatch):
        monkeypatch.setenv("DPEC_SEED", "5")
        run(["synth", "--out", workspace / "s3", "--count", "1", "--size", "16"])
        monkeypatch.delenv("DPEC_SEED")
        run(["synth", "--out", workspace / "s4", "--count", "1",
             "--seed", "5", "--size", "16"])
        a = (workspace / "s3" / "low" / "pair_000.png").read_bytes()
        b = (workspace / "s4" / "low" / "pair_000.png").read_bytes()
        assert a == b

    def test_bench_smoke(self, workspace, capsys):
        cfg = workspace / "bench_cfg.txt"
        cfg.write_text(TINY_CFG)
        rc = run(["bench", "--size", "32x32", "--iters", "2",
                  "--config", cfg, "--seed", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "forward 32x32" in out and "+/-" in out

    def test_bench_bad_size_exit2(self, workspace):
        assert run(["bench", "--size", "large"]) == 2


# frozen from the first verified run of this build
GOLDEN_ENHANCE_SHA256 = (
    "0e69a14a1dc1ed437178815689528c22a20d734710bf3d300903926f6ae25fc9"
)
