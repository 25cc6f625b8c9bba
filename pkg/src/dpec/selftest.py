"""Built-in verification suites behind `dpec selftest`.

Each suite counts independent checks; any failure flips the exit code.
These overlap the pytest suite on purpose: they run from an installed
package with no test files around.
"""

from __future__ import annotations

import io
import os
import tempfile

import numpy as np

from . import losses as L
from . import nn
from . import ss2d
from . import tensor as T
from .checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from .errors import CheckpointError
from .imaging import psnr, ssim_index
from .tensor import Tape, Tensor


class SuiteFailure(AssertionError):
    pass


def _fd_check(build, params, n_coords=5, h=1e-5, rtol=1e-4, atol=1e-8, seed=0):
    rng = np.random.default_rng(seed)
    with Tape() as tape:
        loss = build(params)
    grads = tape.backward(loss)
    checked = 0
    for name, p in params.items():
        g = grads.grad(p)
        coords = rng.choice(p.size, size=min(n_coords, p.size), replace=False)
        for c in coords:
            xp = p.data.copy().reshape(-1)
            xm = xp.copy()
            xp[c] += h
            xm[c] -= h
            trial = dict(params)
            trial[name] = Tensor(xp.reshape(p.shape), requires_grad=True)
            fp = build(trial).item()
            trial[name] = Tensor(xm.reshape(p.shape), requires_grad=True)
            fm = build(trial).item()
            fd = (fp - fm) / (2 * h)
            an = float(g.reshape(-1)[c])
            if abs(an - fd) > atol + rtol * max(abs(an), abs(fd)):
                raise SuiteFailure(f"{name}[{c}]: analytic {an} vs fd {fd}")
            checked += 1
    return checked


def suite_gradients() -> int:
    rng = np.random.default_rng(1)
    checks = 0
    params = {
        "a": Tensor(rng.standard_normal((3, 4)), requires_grad=True),
        "b": Tensor(rng.standard_normal((3, 4)) + 2.5, requires_grad=True),
    }
    checks += _fd_check(
        lambda q: (T.silu(q["a"] * q["b"]) / q["b"]).sum(), params
    )
    conv = nn.init_conv(rng, 2, 3, 3, padding=1, dtype=np.float64)
    params = {
        "x": Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True),
        "w": conv.weight,
    }

    def conv_loss(q):
        p = nn.Conv2dParams(q["w"], conv.bias, 1, 1)
        return (nn.conv2d(q["x"], p) ** 2.0).sum()

    checks += _fd_check(conv_loss, params)
    ln = nn.init_layernorm(6, dtype=np.float64)
    params = {
        "x": Tensor(rng.standard_normal((4, 6)), requires_grad=True),
        "g": ln.gamma,
    }
    checks += _fd_check(
        lambda q: (nn.layernorm(q["x"], nn.LayerNormParams(q["g"], ln.beta))
                   ** 2.0).sum(),
        params, rtol=5e-4,
    )
    s6 = ss2d.init_s6(rng, 3, nstate=2, dtype=np.float64)
    params = {
        "x": Tensor(rng.standard_normal((1, 4, 3)), requires_grad=True),
        "w": s6.proj_dbc.weight,
        "alog": s6.a_log,
    }

    def s6_loss(q):
        p = ss2d.S6Params(q["alog"], s6.skip, nn.LinearParams(q["w"]),
                          s6.dt_proj, 2, s6.dt_rank)
        return (ss2d.s6_forward(q["x"], p) ** 2.0).sum()

    checks += _fd_check(s6_loss, params, rtol=2e-4)
    return checks


def _unrolled_s6(seq, p) -> np.ndarray:
    """Naive causal-matrix evaluation used as the oracle."""
    w_p = p.proj_dbc.weight.data
    a = -np.exp(p.a_log.data)
    r, s = p.dt_rank, p.nstate
    n, l, d = seq.shape
    out = np.zeros_like(seq)
    for ni in range(n):
        dbc = seq[ni] @ w_p
        delta = np.logaddexp(0.0, dbc[:, :r] @ p.dt_proj.weight.data
                             + p.dt_proj.bias.data)
        bmat, cmat = dbc[:, r:r + s], dbc[:, r + s:]
        da = delta[:, :, None] * a
        small = np.abs(da) < ss2d.ZOH_SERIES_CUTOVER
        safe = np.where(small, 1.0, da)
        phi = np.where(small, 1.0 + da * (0.5 + da / 6.0),
                       np.expm1(safe) / safe)
        bbar = phi * delta[:, :, None] * bmat[:, None, :]
        abar = np.exp(da)
        for t in range(l):
            for tau in range(t + 1):
                trans = np.ones((d, s))
                for k in range(tau + 1, t + 1):
                    trans = trans * abar[k]
                out[ni, t] += (cmat[t][None, :] * trans * bbar[tau]
                               * seq[ni, tau][:, None]).sum(axis=1)
            out[ni, t] += p.skip.data * seq[ni, t]
    return out


def suite_s6_oracle(draws: int = 10) -> int:
    checks = 0
    for i in range(draws):
        rng = np.random.default_rng(1000 + i)
        d, s = int(rng.integers(2, 5)), int(rng.integers(2, 6))
        l = int(rng.integers(1, 9))
        p = ss2d.init_s6(rng, d, nstate=s, dtype=np.float64)
        x = Tensor(rng.standard_normal((1, l, d)))
        got = ss2d.s6_forward(x, p).data
        want = _unrolled_s6(x.data, p)
        if np.max(np.abs(got - want)) > 1e-10:
            raise SuiteFailure(f"s6 draw {i}: max err {np.max(np.abs(got-want))}")
        checks += 1
    return checks


def suite_scan_bijectivity() -> int:
    checks = 0
    for h in range(1, 9):
        for w in range(1, 9):
            l = h * w
            for perm, inv in zip(ss2d.direction_perms(h, w),
                                 ss2d.inverse_perms(h, w)):
                if sorted(perm) != list(range(l)):
                    raise SuiteFailure(f"{h}x{w}: not a bijection")
                if not np.array_equal(perm[inv], np.arange(l)):
                    raise SuiteFailure(f"{h}x{w}: inverse wrong")
                checks += 1
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, 5, 7, 3)))
    merged = ss2d.scan_merge(ss2d.scan_expand(x))
    if np.max(np.abs(merged.data - 4 * x.data)) > 1e-12:
        raise SuiteFailure("merge(expand(x)) != 4x")
    return checks + 1


def suite_histogram() -> int:
    checks = 0
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = Tensor(rng.uniform(-0.3, 1.3, (257,)))
        mass = L.soft_histogram(x).data.sum()
        if abs(mass - 1.0) > 1e-6:
            raise SuiteFailure(f"histogram mass {mass}")
        checks += 1
    centers = (np.arange(256) + 0.5) / 256
    vals = centers[rng.integers(0, 256, 300)]
    soft = L.soft_histogram(Tensor(vals)).data
    hard = L.hard_histogram(vals)
    if np.max(np.abs(soft - hard)) > 1e-12:
        raise SuiteFailure("soft/hard histogram disagreement on bin centers")
    return checks + 1


def suite_checkpoint() -> int:
    rng = np.random.default_rng(4)
    tensors = {
        "w1": rng.standard_normal((3, 4)).astype(np.float32),
        "w2": rng.standard_normal((2, 2, 3, 3)),
        "scalar": np.array(0.5, dtype=np.float32),
    }
    meta = CheckpointMeta(stage=1, seed=7, config_hash=b"\x01" * 32)
    checks = 0
    with tempfile.TemporaryDirectory() as td:
        path = os.path.join(td, "t.ckpt")
        save_checkpoint(path, meta, tensors)
        meta2, loaded = load_checkpoint(path)
        for k, v in tensors.items():
            if loaded[k].tobytes() != np.asarray(v).tobytes():
                raise SuiteFailure(f"round-trip changed {k}")
            checks += 1
        if (meta2.stage, meta2.seed, meta2.config_hash) != (1, 7, b"\x01" * 32):
            raise SuiteFailure("metadata mismatch")
        checks += 1
        with open(path, "rb") as fh:
            blob = bytearray(fh.read())
        blob[5] ^= 0xFF  # corrupt the version field
        bad = os.path.join(td, "bad.ckpt")
        with open(bad, "wb") as fh:
            fh.write(bytes(blob))
        try:
            load_checkpoint(bad)
        except CheckpointError:
            checks += 1
        else:
            raise SuiteFailure("corrupted checkpoint loaded silently")
        trunc = os.path.join(td, "trunc.ckpt")
        with open(path, "rb") as fh:
            whole = fh.read()
        with open(trunc, "wb") as fh:
            fh.write(whole[:-3])
        try:
            load_checkpoint(trunc)
        except CheckpointError:
            checks += 1
        else:
            raise SuiteFailure("truncated checkpoint loaded silently")
    return checks


def suite_metrics() -> int:
    a = Tensor(np.full((1, 3, 12, 12), 0.5))
    b = Tensor(np.full((1, 3, 12, 12), 0.6))
    if abs(psnr(a, b) - 20.0) > 1e-9:
        raise SuiteFailure(f"psnr uniform case: {psnr(a, b)}")
    x = Tensor(np.random.default_rng(5).uniform(0, 1, (1, 3, 16, 16)))
    if psnr(x, x) != 99.0:
        raise SuiteFailure("psnr cap")
    if abs(ssim_index(x, x) - 1.0) > 1e-9:
        raise SuiteFailure("ssim self-similarity")
    return 3


SUITES = [
    ("gradients", suite_gradients),
    ("s6-oracle", suite_s6_oracle),
    ("scan-bijectivity", suite_scan_bijectivity),
    ("histogram", suite_histogram),
    ("checkpoint", suite_checkpoint),
    ("metrics", suite_metrics),
]


def run_selftest(out=None) -> int:
    out = out or io.StringIO()
    failed = False
    lines = []
    for name, fn in SUITES:
        try:
            n = fn()
            lines.append(f"{name:<18} {n} checks ok")
        except Exception as exc:  # report and keep going
            failed = True
            lines.append(f"{name:<18} FAILED: {exc}")
    report = "\n".join(lines)
    print(report)
    print("selftest:", "FAILED" if failed else "ok")
    return 1 if failed else 0
