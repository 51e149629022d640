"""Central finite-difference checks for FIRE and micro-LM gradients."""
from __future__ import annotations

import numpy as np

from .fire import FireParams, apply_flat, fire_bias, fire_grad, flat_params
from .microlm.model import ModelParams, lm_loss, loss_and_grad

# Denominator floor: below this both values are treated as zero-scale so that
# exact-zero analytic gradients are not judged against rounding noise.
REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor=REL_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def central_difference(f, x, h=1e-4, indices=None):
    """Numeric gradient of scalar ``f`` at flat vector ``x`` (only ``indices`` if given)."""
    x = np.array(x, dtype=np.float64)
    idx = range(x.size) if indices is None else indices
    out = np.zeros(x.size)
    for k in idx:
        old = x[k]
        x[k] = old + h
        fp = f(x)
        x[k] = old - h
        fm = f(x)
        x[k] = old
        out[k] = (fp - fm) / (2.0 * h)
    return out


def check_fire_grad(params: FireParams, i, j, upstream, h=1e-4):
    """Max relative error of ``fire_grad`` against central differences."""
    upstream = np.asarray(upstream, dtype=np.float64)
    analytic = fire_grad(i, j, params, upstream).flat()

    def f(flat):
        return float(upstream @ fire_bias(i, j, apply_flat(params, flat)))

    numeric = central_difference(f, flat_params(params), h)
    return float(relative_error(analytic, numeric).max())


def check_lm_grad(params: ModelParams, tokens, loss_mask, per_tensor=10, h=1e-5, seed=0):
    """Per-tensor max relative error on up to ``per_tensor`` random entries.

    ``params`` should be double precision; they are restored after probing.
    """
    rng = np.random.default_rng(seed)
    _, grads, _ = loss_and_grad(params, tokens, loss_mask)
    report = {}
    for name, arr in params.tensors.items():
        if arr.ndim == 0:
            picks = [()]
        else:
            flat_ids = rng.choice(arr.size, size=min(per_tensor, arr.size), replace=False)
            picks = [tuple(np.unravel_index(k, arr.shape)) for k in flat_ids]
        worst = 0.0
        for ix in picks:
            old = arr[ix].copy()
            arr[ix] = old + h
            lp = lm_loss(params, tokens, loss_mask)
            arr[ix] = old - h
            lm = lm_loss(params, tokens, loss_mask)
            arr[ix] = old
            num = (lp - lm) / (2.0 * h)
            worst = max(worst, float(relative_error(grads[name][ix], num)))
        report[name] = worst
    return report
