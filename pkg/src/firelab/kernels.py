"""Closed-form relative positional encodings.

Every additive scheme is a function of the query/key positions ``(i, j)`` with
``0 <= j <= i`` (0-based).  Functions accept Python scalars or numpy arrays and
broadcast; scalar inputs return a Python ``float``/``int``.

RoPE is the one non-additive scheme here and is exposed as a rotation of
query/key vectors rather than a bias.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import EmptyInput, InvalidParameter

VARIANTS = (
    "NoPE",
    "T5Simplified",
    "T5Bucketed",
    "T5LogBin",
    "Alibi",
    "KerpleLog",
    "KerplePower",
    "Sandwich",
)

SANDWICH_BASE = 10000.0


def _distance(i, j):
    i = np.asarray(i)
    j = np.asarray(j)
    if np.any(j < 0) or np.any(j > i):
        raise InvalidParameter("positions must satisfy 0 <= j <= i")
    return i - j


def _out(x, *inputs):
    if all(np.ndim(a) == 0 for a in inputs):
        return x.item() if isinstance(x, np.ndarray) else x
    return x


def _check_positive(**kw):
    for name, v in kw.items():
        if not v > 0:
            raise InvalidParameter(f"{name} must be > 0, got {v}")


# ---------------------------------------------------------------------------
# bias formulas
# ---------------------------------------------------------------------------


def bias_alibi(i, j, r):
    _check_positive(r=r)
    d = _distance(i, j)
    return _out(-r * d.astype(np.float64), i, j)


def bias_kerple(i, j, r1, r2, variant="log"):
    _check_positive(r1=r1, r2=r2)
    d = _distance(i, j).astype(np.float64)
    if variant == "log":
        b = -r1 * np.log1p(r2 * d)
    elif variant == "power":
        b = -r1 * np.power(d, r2)
    else:
        raise InvalidParameter(f"unknown kerple variant {variant!r}")
    return _out(b, i, j)


def bias_sandwich(i, j, r1, dprime):
    if int(dprime) != dprime or dprime < 1:
        raise InvalidParameter(f"dprime must be a positive integer, got {dprime}")
    d = _distance(i, j).astype(np.float64)
    total = np.zeros_like(d)
    # fixed summation order k = 1..d'
    for k in range(1, int(dprime) + 1):
        total = total + np.cos(d / SANDWICH_BASE ** (k / dprime))
    return _out(r1 * total, i, j)


def _check_boundaries(boundaries):
    s = [int(b) for b in boundaries]
    if not s or s[0] != 0 or any(b != int(b) for b in boundaries):
        raise InvalidParameter("boundaries must be integers starting at 0")
    if any(a >= b for a, b in zip(s, s[1:])):
        raise InvalidParameter("boundaries must be strictly increasing")
    return s


def t5_bucket_general(d, boundaries):
    """Bucket index k with ``s_k <= d < s_{k+1}``; the last bucket is open-ended."""
    s = _check_boundaries(boundaries)
    d_arr = np.asarray(d)
    if np.any(d_arr < 0):
        raise InvalidParameter("distance must be non-negative")
    idx = np.searchsorted(np.asarray(s), d_arr, side="right") - 1
    return _out(idx.astype(np.int64), d)


def _check_logbin(num_buckets, max_distance):
    if num_buckets < 2 or num_buckets % 2:
        raise InvalidParameter("num_buckets must be even and >= 2")
    if not max_distance > num_buckets // 2:
        raise InvalidParameter("max_distance must exceed num_buckets / 2")


def t5_bucket_logbin(d, num_buckets, max_distance):
    """Log-binned T5 bucket (causal direction only).

    The first ``num_buckets/2`` distances get their own bucket, distances up to
    ``max_distance`` share logarithmically growing buckets and everything past
    ``max_distance`` falls in the last bucket.
    """
    _check_logbin(num_buckets, max_distance)
    d_arr = np.asarray(d)
    if np.any(d_arr < 0):
        raise InvalidParameter("distance must be non-negative")
    nb = num_buckets
    half = nb // 2
    df = np.maximum(d_arr, 1).astype(np.float64)
    log_part = half + np.floor(
        half * np.log(2.0 * df / nb) / math.log(2.0 * max_distance / nb)
    ).astype(np.int64)
    # float rounding can never push a d < L1 past the last bucket
    log_part = np.minimum(log_part, nb - 1)
    out = np.where(d_arr < half, d_arr, np.where(d_arr >= max_distance, nb - 1, log_part))
    return _out(out.astype(np.int64), d)


def logbin_boundaries(num_buckets, max_distance):
    """Materialize log-binned buckets as explicit boundaries.

    Bucket ``half + m`` (``0 <= m < half``) starts at the smallest integer
    ``d`` with ``(d/half)**half >= (L1/half)**m``; the comparison is done in
    exact integer arithmetic so the boundaries never depend on rounding.

    Returns ``(boundaries, bucket_ids)``.  Buckets that no integer distance
    reaches are dropped, so ``bucket_ids`` may skip indices.
    """
    _check_logbin(num_buckets, max_distance)
    half = num_buckets // 2
    L1 = int(max_distance)
    starts = {k: k for k in range(half)}
    for m in range(1, half):
        rhs = L1**m * half**half
        # smallest d with d**half * half**m >= rhs, d in [half, L1]
        lo, hi = half, L1
        while lo < hi:
            mid = (lo + hi) // 2
            if mid**half * half**m >= rhs:
                hi = mid
            else:
                lo = mid + 1
        if lo < L1:
            starts[half + m] = lo
    starts[half] = half
    starts[num_buckets - 1] = min(starts.get(num_buckets - 1, L1), L1)
    by_start: dict[int, int] = {}
    for k in sorted(starts):
        by_start[starts[k]] = k  # later (higher) bucket wins on collisions
    bounds = sorted(by_start)
    return bounds, [by_start[b] for b in bounds]


# ---------------------------------------------------------------------------
# spec record
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BiasSpec:
    """One additive positional-encoding variant and its parameters."""

    variant: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidParameter(f"unknown variant {self.variant!r}")
        p = self.params
        v = self.variant
        try:
            if v == "T5Simplified":
                if int(p["K"]) != p["K"] or p["K"] < 0 or len(p["r"]) != p["K"] + 1:
                    raise InvalidParameter("T5Simplified needs integer K >= 0 and K+1 values")
            elif v == "T5Bucketed":
                _check_boundaries(p["boundaries"])
                if len(p["r"]) != len(p["boundaries"]):
                    raise InvalidParameter("T5Bucketed needs one value per bucket")
            elif v == "T5LogBin":
                _check_logbin(p["num_buckets"], p["max_distance"])
                if len(p["r"]) != p["num_buckets"]:
                    raise InvalidParameter("T5LogBin needs num_buckets values")
            elif v == "Alibi":
                _check_positive(r=p["r"])
            elif v in ("KerpleLog", "KerplePower"):
                _check_positive(r1=p["r1"], r2=p["r2"])
            elif v == "Sandwich":
                if int(p["dprime"]) != p["dprime"] or p["dprime"] < 1:
                    raise InvalidParameter("Sandwich dprime must be a positive integer")
                float(p["r1"])
        except KeyError as e:
            raise InvalidParameter(f"{v} is missing parameter {e.args[0]!r}") from None

    # convenience constructors
    @classmethod
    def nope(cls):
        return cls("NoPE", {})

    @classmethod
    def alibi(cls, r):
        return cls("Alibi", {"r": float(r)})

    @classmethod
    def kerple_log(cls, r1, r2):
        return cls("KerpleLog", {"r1": float(r1), "r2": float(r2)})

    @classmethod
    def kerple_power(cls, r1, r2):
        return cls("KerplePower", {"r1": float(r1), "r2": float(r2)})

    @classmethod
    def sandwich(cls, r1, dprime):
        return cls("Sandwich", {"r1": float(r1), "dprime": int(dprime)})

    @classmethod
    def t5_simplified(cls, r):
        r = [float(x) for x in r]
        return cls("T5Simplified", {"K": len(r) - 1, "r": r})

    @classmethod
    def t5_bucketed(cls, boundaries, r):
        return cls("T5Bucketed", {"boundaries": [int(b) for b in boundaries], "r": [float(x) for x in r]})

    @classmethod
    def t5_logbin(cls, num_buckets, max_distance, r):
        return cls(
            "T5LogBin",
            {"num_buckets": int(num_buckets), "max_distance": int(max_distance), "r": [float(x) for x in r]},
        )

    @property
    def is_t5(self):
        return self.variant.startswith("T5")

    def bucket(self, d):
        """Bucket index for the T5 family."""
        p = self.params
        if self.variant == "T5Simplified":
            return np.minimum(np.asarray(d), p["K"])
        if self.variant == "T5Bucketed":
            return t5_bucket_general(np.asarray(d), p["boundaries"])
        if self.variant == "T5LogBin":
            return t5_bucket_logbin(np.asarray(d), p["num_buckets"], p["max_distance"])
        raise InvalidParameter(f"{self.variant} has no buckets")

    def as_bucketed(self):
        """Rewrite any T5 variant in the general boundary form."""
        p = self.params
        if self.variant == "T5Bucketed":
            return self
        if self.variant == "T5Simplified":
            return BiasSpec.t5_bucketed(range(p["K"] + 1), p["r"])
        if self.variant == "T5LogBin":
            bounds, ids = logbin_boundaries(p["num_buckets"], p["max_distance"])
            return BiasSpec.t5_bucketed(bounds, [p["r"][k] for k in ids])
        raise InvalidParameter(f"{self.variant} is not a T5 variant")

    def to_json(self):
        return {"variant": self.variant, "params": dict(self.params)}

    @classmethod
    def from_json(cls, doc):
        from .schema import validate

        validate(doc, "bias_spec")
        return cls(doc["variant"], dict(doc["params"]))


def alibi_slopes(num_heads):
    """Geometric per-head slopes ``2**(-8k/H)``, k = 1..H (the usual Alibi schedule)."""
    return [2.0 ** (-8.0 * k / num_heads) for k in range(1, num_heads + 1)]


def bias_by_distance(spec: BiasSpec, d):
    """Evaluate ``spec`` on non-negative distances ``d`` (array)."""
    d = np.asarray(d)
    z = np.zeros_like(d)
    p = spec.params
    v = spec.variant
    if v == "NoPE":
        return np.zeros(d.shape, dtype=np.float64)
    if v == "Alibi":
        return np.asarray(bias_alibi(d, z, p["r"]), dtype=np.float64)
    if v == "KerpleLog":
        return np.asarray(bias_kerple(d, z, p["r1"], p["r2"], "log"), dtype=np.float64)
    if v == "KerplePower":
        return np.asarray(bias_kerple(d, z, p["r1"], p["r2"], "power"), dtype=np.float64)
    if v == "Sandwich":
        return np.asarray(bias_sandwich(d, z, p["r1"], p["dprime"]), dtype=np.float64)
    r = np.asarray(p["r"], dtype=np.float64)
    if v == "T5Bucketed":
        return r[spec.bucket(d)]
    if v == "T5Simplified":
        return r[spec.bucket(d)]
    if v == "T5LogBin":
        return r[spec.bucket(d)]
    raise InvalidParameter(v)


def bias_from_spec(spec: BiasSpec, i, j):
    d = _distance(i, j)
    return _out(bias_by_distance(spec, d), i, j)


# ---------------------------------------------------------------------------
# bias matrices
# ---------------------------------------------------------------------------


@dataclass
class BiasMatrix:
    """Per-head causal bias.

    ``values[h, i, j]`` holds the bias for ``j <= i``; entries above the
    diagonal are stored as 0.0 and flagged by ``mask[i, j] == False``.  The
    mask is a flag rather than a large negative number so exported values
    stay exact.
    """

    values: np.ndarray  # (H, n, n)
    mask: np.ndarray  # (n, n) bool, True where attention is allowed

    @property
    def heads(self):
        return self.values.shape[0]

    @property
    def n(self):
        return self.values.shape[1]

    def dense(self, fill=-np.inf):
        return np.where(self.mask[None], self.values, fill)

    def lower_triangle(self, head=0):
        ii, jj = np.tril_indices(self.n)
        return ii, jj, self.values[head, ii, jj]


def causal_mask(n):
    return np.tri(n, dtype=bool)


def distance_grid(n):
    pos = np.arange(n)
    return np.maximum(pos[:, None] - pos[None, :], 0)


def build_bias_matrix(spec: BiasSpec, n: int) -> BiasMatrix:
    if n < 1:
        raise EmptyInput("sequence length must be >= 1")
    mask = causal_mask(n)
    # bias of each distance once, then broadcast along diagonals
    per_d = bias_by_distance(spec, np.arange(n))
    vals = np.where(mask, per_d[distance_grid(n)], 0.0)
    return BiasMatrix(vals[None].astype(np.float64), mask)


def build_multihead_bias(specs: Sequence[BiasSpec], n: int) -> BiasMatrix:
    mats = [build_bias_matrix(s, n) for s in specs]
    return BiasMatrix(np.concatenate([m.values for m in mats], axis=0), mats[0].mask)


# ---------------------------------------------------------------------------
# RoPE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0
    pi_scale: float | None = None

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise InvalidParameter(f"head_dim must be even and positive, got {self.head_dim}")
        if not self.base > 0:
            raise InvalidParameter("base must be positive")
        if self.pi_scale is not None and not 0 < self.pi_scale <= 1:
            raise InvalidParameter("pi_scale must lie in (0, 1]")

    def inv_freq(self):
        k = np.arange(self.head_dim // 2, dtype=np.float64)
        return 1.0 / self.base ** (2.0 * k / self.head_dim)

    def angles(self, positions):
        scale = 1.0 if self.pi_scale is None else self.pi_scale
        p = np.asarray(positions, dtype=np.float64) * scale
        return p[..., None] * self.inv_freq()


def rope_rotate(x, positions, cfg: RopeConfig, inverse=False):
    """Rotate the last axis of ``x`` (…, n, head_dim) by per-position angles."""
    x = np.asarray(x)
    if x.shape[-1] != cfg.head_dim:
        raise InvalidParameter(f"expected last dim {cfg.head_dim}, got {x.shape[-1]}")
    ang = cfg.angles(positions)
    cos = np.cos(ang).astype(x.dtype, copy=False)
    sin = np.sin(ang).astype(x.dtype, copy=False)
    if inverse:
        sin = -sin
    a = x[..., 0::2]
    b = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos
    return out


def rope_apply(v, pos, cfg: RopeConfig):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] % 2:
        raise InvalidParameter("rope_apply expects a vector of even length")
    if v.shape[0] != cfg.head_dim:
        raise InvalidParameter(f"vector has dim {v.shape[0]}, config expects {cfg.head_dim}")
    return rope_rotate(v[None], np.array([pos]), cfg)[0]
