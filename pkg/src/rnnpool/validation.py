"""Central finite-difference checks for hand-written gradients."""
from __future__ import annotations

import numpy as np

from .pool import RnnPoolParams, rnnpool_backward, rnnpool_forward


def rel_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f() with respect to every entry of x (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def random_case(h1, h2, patch, channels=2, seed=0, gate_nonlin="sigmoid", update_nonlin="tanh"):
    rng = np.random.default_rng(seed)
    params = RnnPoolParams.random(channels, h1, h2, patch, rng=rng, dtype=np.float64,
                                  gate_nonlin=gate_nonlin, update_nonlin=update_nonlin)
    for cell in (params.rnn1, params.rnn2):
        cell.b_z[:] = 0.5 * rng.standard_normal(cell.hidden_dim)
        cell.b_h[:] = 0.5 * rng.standard_normal(cell.hidden_dim)
    x = rng.standard_normal((patch, patch, channels))
    up = rng.standard_normal(4 * h2)
    return params, x, up


def gradcheck_rnnpool(h1: int, h2: int, patch: int, channels: int = 2, seed=0,
                      eps: float = 1e-5) -> dict:
    """Compare rnnpool_backward with central differences of <upstream, forward>, in float64."""
    params, x, up = random_case(h1, h2, patch, channels, seed)

    def loss():
        return float(rnnpool_forward(params, x) @ up)

    grads, dx = rnnpool_backward(params, x, up)
    errors = {"x": float(rel_error(numeric_grad(loss, x, eps), dx).max())}
    checked = x.size
    for tag, cell, g in (("1", params.rnn1, grads.rnn1), ("2", params.rnn2, grads.rnn2)):
        for name, arr in cell.params().items():
            errors[name + tag] = float(rel_error(numeric_grad(loss, arr, eps), g[name]).max())
            checked += arr.size
    return {"max_rel_error": max(errors.values()), "per_param": errors, "checked": checked,
            "eps": eps, "seed": seed}
