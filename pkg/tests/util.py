"""Shared test helpers: finite-difference gradient checking."""

import numpy as np

from dpec.tensor import Tape, Tensor


def numeric_grad(f, x: np.ndarray, coords, h=1e-5):
    """Central finite differences of scalar f at the given flat coords."""
    out = {}
    for c in coords:
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[c] += h
        xm[c] -= h
        fp = f(xp.reshape(x.shape))
        fm = f(xm.reshape(x.shape))
        out[c] = (fp - fm) / (2.0 * h)
    return out


def check_grads(build, params, n_coords=10, h=1e-5, rtol=1e-4, atol=1e-9, seed=0):
    """Compare tape gradients of build(params) against finite differences.

    build: dict[str, Tensor] -> scalar Tensor. Every parameter must be f64
    and requires_grad. Checks n_coords random coordinates per parameter.
    atol absorbs the FD noise floor on near-zero coordinates.
    """
    rng = np.random.default_rng(seed)
    with Tape() as tape:
        loss = build(params)
    grads = tape.backward(loss)
    for name, p in params.items():
        assert p.dtype == np.float64, f"{name}: gradient checks need f64"
        g = grads.grad(p)
        coords = rng.choice(p.size, size=min(n_coords, p.size), replace=False)

        def f(arr, _name=name):
            trial = dict(params)
            trial[_name] = Tensor(arr, requires_grad=True)
            with Tape():
                return build(trial).item()

        num = numeric_grad(f, p.data, coords, h=h)
        for c, fd in num.items():
            an = float(g.reshape(-1)[c])
            scale = max(abs(fd), abs(an))
            assert abs(an - fd) <= atol + rtol * scale, (
                f"{name}[{c}]: analytic {an!r} vs numeric {fd!r}"
            )
