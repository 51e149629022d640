"""Exact FIRE parameterizations of the classic additive encodings.

Each ``construct_*`` returns FIRE parameters whose bias equals the target
on every 1-based pair ``0 < j <= i <= L0``.  All constructions set the
threshold to ``L0`` (so the normalizer is constant on the grid) and
``eps = 0``.  Several use construction-only activations (step, power, cos)
and are therefore rejected by the gradient code.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConstructionOutOfRange, InvalidParameter
from .fire import FireParams, MlpParams, fire_bias_matrix, power_tag
from .kernels import SANDWICH_BASE, BiasSpec, bias_from_spec

CASES = ("t5", "alibi", "kerple_log", "kerple_power", "sandwich")


@dataclass
class ConstructionResult:
    fire: FireParams
    case: str
    target: BiasSpec
    L0: int


def _fire(mlp, L0, psi="identity", c=1.0):
    return FireParams(mlp, c=c, init_L=float(L0), L_multiplier=1.0, eps=0.0, psi=psi, use_threshold=True)


def _check_L0(L0):
    if int(L0) != L0 or L0 < 1:
        raise InvalidParameter(f"L0 must be a positive integer, got {L0}")


def construct_t5(target: BiasSpec, L0: int, margin: float = 0.5) -> ConstructionResult:
    """Step-activation MLP: one hidden unit per bucket boundary past 0.

    Hidden unit k fires on ``L0 * x - s_k + margin >= 0``.  With ``margin=0``
    this is the textbook weight choice; it is exact only when
    ``(d / L0) * L0 == d`` holds in floating point (e.g. L0 a power of two).
    Any margin in (0, 1) gives the same function on integer distances and
    keeps the step away from rounding noise.
    """
    if not 0 <= margin < 1:
        raise InvalidParameter("margin must lie in [0, 1)")
    _check_L0(L0)
    spec = target.as_bucketed()
    s = spec.params["boundaries"]
    r = np.asarray(spec.params["r"], dtype=np.float64)
    if s[-1] > L0:
        raise ConstructionOutOfRange(f"last boundary {s[-1]} exceeds L0={L0}")
    K = len(s) - 1
    w1 = np.full((1, K), float(L0))
    b1 = margin - np.asarray(s[1:], dtype=np.float64)
    w2 = np.diff(r).reshape(K, 1)
    b2 = r[:1].copy()
    mlp = MlpParams([w1, w2], [b1, b2], ["step"])
    return ConstructionResult(_fire(mlp, L0), "t5", target, int(L0))


def construct_alibi(r: float, L0: int) -> ConstructionResult:
    _check_L0(L0)
    if not r > 0:
        raise InvalidParameter("alibi slope must be positive")
    mlp = MlpParams([np.array([[-r * L0]])], [None], [])
    return ConstructionResult(_fire(mlp, L0), "alibi", BiasSpec.alibi(r), int(L0))


def construct_kerple_log(r1: float, r2: float, L0: int) -> ConstructionResult:
    _check_L0(L0)
    if not (r1 > 0 and r2 > 0):
        raise InvalidParameter("kerple parameters must be positive")
    mlp = MlpParams([np.array([[-r1 * np.log(1.0 + r2 * L0)]])], [None], [])
    return ConstructionResult(_fire(mlp, L0, psi="log", c=r2), "kerple_log", BiasSpec.kerple_log(r1, r2), int(L0))


def construct_kerple_power(r1: float, r2: float, L0: int) -> ConstructionResult:
    _check_L0(L0)
    if not (r1 > 0 and r2 > 0):
        raise InvalidParameter("kerple parameters must be positive")
    mlp = MlpParams(
        [np.array([[r1 ** (1.0 / r2) * L0]]), np.array([[-1.0]])],
        [None, None],
        [power_tag(r2)],
    )
    return ConstructionResult(_fire(mlp, L0), "kerple_power", BiasSpec.kerple_power(r1, r2), int(L0))


def construct_sandwich(r1: float, dprime: int, L0: int) -> ConstructionResult:
    _check_L0(L0)
    if int(dprime) != dprime or dprime < 1:
        raise InvalidParameter("dprime must be a positive integer")
    k = np.arange(1, dprime + 1)
    w1 = (L0 / SANDWICH_BASE ** (k / dprime)).reshape(1, dprime)
    w2 = np.full((dprime, 1), float(r1))
    mlp = MlpParams([w1, w2], [None, None], ["cos"])
    return ConstructionResult(_fire(mlp, L0), "sandwich", BiasSpec.sandwich(r1, dprime), int(L0))


def construct(target: BiasSpec, L0: int) -> ConstructionResult:
    p = target.params
    if target.is_t5:
        return construct_t5(target, L0)
    if target.variant == "Alibi":
        return construct_alibi(p["r"], L0)
    if target.variant == "KerpleLog":
        return construct_kerple_log(p["r1"], p["r2"], L0)
    if target.variant == "KerplePower":
        return construct_kerple_power(p["r1"], p["r2"], L0)
    if target.variant == "Sandwich":
        return construct_sandwich(p["r1"], p["dprime"], L0)
    raise InvalidParameter(f"no construction for {target.variant}")


def verify_representation(result: ConstructionResult, target: BiasSpec | None = None, L0: int | None = None) -> float:
    """Max |b_FIRE - b_target| over all 1-based pairs 0 < j <= i <= L0.

    The FIRE engine is 0-based, so pair (i, j) is evaluated there at
    (i - 1, j - 1); the target formula is evaluated at (i, j) directly.
    """
    target = result.target if target is None else target
    L0 = result.L0 if L0 is None else L0
    ii, jj = np.tril_indices(L0)
    i1, j1 = ii + 1, jj + 1
    want = np.asarray(bias_from_spec(target, i1, j1), dtype=np.float64)
    got = fire_bias_matrix(L0, result.fire).values[:, i1 - 1, j1 - 1]
    return float(np.max(np.abs(got - want[None])))


def _dyadic(rng, size):
    # multiples of 1/64: bucket differences and their partial sums stay exact
    return rng.integers(-256, 257, size=size) / 64.0


def random_target(case: str, seed: int, L0: int) -> BiasSpec:
    """Seeded parameter draw for one construction case.

    T5 bucket values are dyadic so the construction can be checked for
    exact (zero-error) agreement.
    """
    rng = np.random.default_rng([seed, CASES.index(case)])
    if case == "t5":
        kind = seed % 5
        if kind == 0 and L0 > 16:
            nb = 32 if L0 >= 128 else 2 * max(1, min(16, L0 // 4))
            L1 = min(128, L0)
            return BiasSpec.t5_logbin(nb, L1, _dyadic(rng, nb))
        if kind == 1:
            K = int(rng.integers(1, min(L0, 32) + 1))
            return BiasSpec.t5_simplified(_dyadic(rng, K + 1))
        K = int(rng.integers(1, min(L0, 16) + 1))
        inner = np.sort(rng.choice(np.arange(1, L0 + 1), size=K, replace=False))
        return BiasSpec.t5_bucketed([0, *inner.tolist()], _dyadic(rng, K + 1))
    if case == "alibi":
        return BiasSpec.alibi(rng.uniform(0.01, 2.0))
    if case == "kerple_log":
        return BiasSpec.kerple_log(rng.uniform(0.1, 3.0), rng.uniform(0.1, 3.0))
    if case == "kerple_power":
        return BiasSpec.kerple_power(rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0))
    if case == "sandwich":
        return BiasSpec.sandwich(rng.uniform(-2.0, 2.0), int(rng.integers(1, 17)))
    raise InvalidParameter(f"unknown case {case!r}")


def default_tolerance(L0):
    # power/cos cases accumulate rounding with the grid size
    return 1e-10 if L0 <= 128 else 1e-6


def run_verification(L0=128, seeds=5, tolerance=None, corrupt=False, cases=CASES, base_seed=0):
    """One record per (case, seed): ``{case, L0, params_seed, max_abs_error, pass}``.

    Parameter draws use seeds ``base_seed .. base_seed + seeds - 1``.

    ``corrupt`` nudges the output-layer weight by 1e-3 after construction so
    the verifier has something to catch.
    """
    tolerance = default_tolerance(L0) if tolerance is None else tolerance
    records = []
    for case in cases:
        for seed in range(base_seed, base_seed + seeds):
            target = random_target(case, seed, L0)
            result = construct(target, L0)
            if corrupt:
                result.fire.mlp.weights[-1][0, 0] += 1e-3
            err = verify_representation(result, target, L0)
            records.append(
                {
                    "case": case,
                    "L0": int(L0),
                    "params_seed": seed,
                    "max_abs_error": err,
                    "pass": bool(err <= tolerance),
                }
            )
    return records
