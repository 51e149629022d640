"""Positional-encoding adapters plugged into the micro-LM.

Each adapter owns the trainable tensors of one PE "slot" (one per layer, or
a single slot when the encoding is shared across layers) and knows how to
produce the per-head bias for a length-n sequence and backprop into its
tensors.  RoPE and NoPE produce no bias.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidParameter, NonDifferentiableConfiguration
from ..fire import (
    FireParams,
    MlpParams,
    fire_bias_matrix,
    fire_bias_matrix_backward,
    init_mlp,
)
from ..kernels import BiasSpec, RopeConfig, build_multihead_bias, distance_grid

TRAINABLE_ADDITIVE = ("T5Simplified", "T5Bucketed", "T5LogBin", "KerpleLog", "KerplePower")


@dataclass
class NoPEConfig:
    kind: str = field(default="nope", init=False)

    def to_json(self):
        return {"kind": "nope"}


@dataclass
class RopePEConfig:
    base: float = 10000.0
    pi_scale: float | None = None
    kind: str = field(default="rope", init=False)

    def rope(self, head_dim):
        return RopeConfig(head_dim, self.base, self.pi_scale)

    def to_json(self):
        return {"kind": "rope", "base": self.base, "pi_scale": self.pi_scale}


@dataclass
class AdditivePEConfig:
    """One BiasSpec per head (a single spec is broadcast to all heads)."""

    specs: list
    trainable: bool = True
    kind: str = field(default="additive", init=False)

    def to_json(self):
        return {"kind": "additive", "specs": [s.to_json() for s in self.specs], "trainable": self.trainable}


@dataclass
class FirePEConfig:
    hidden: int = 32
    depth: int = 2
    activation: str = "relu"
    final_activation: str | None = None
    c: float = 0.1
    init_L: float = 512.0
    eps: float = 1e-6
    psi: str = "log"
    use_threshold: bool = True
    kind: str = field(default="fire", init=False)

    def to_json(self):
        return {
            "kind": "fire",
            "hidden": self.hidden,
            "depth": self.depth,
            "activation": self.activation,
            "final_activation": self.final_activation,
            "c": self.c,
            "init_L": self.init_L,
            "eps": self.eps,
            "psi": self.psi,
            "use_threshold": self.use_threshold,
        }


def pe_from_json(doc):
    doc = dict(doc)
    kind = doc.pop("kind")
    if kind == "nope":
        return NoPEConfig()
    if kind == "rope":
        return RopePEConfig(**doc)
    if kind == "additive":
        return AdditivePEConfig([BiasSpec(s["variant"], dict(s["params"])) for s in doc["specs"]], doc.get("trainable", True))
    if kind == "fire":
        return FirePEConfig(**doc)
    raise InvalidParameter(f"unknown PE kind {kind!r}")


# ---------------------------------------------------------------------------
# runtime adapters
# ---------------------------------------------------------------------------


class PositionalEncoding:
    """Base adapter: no bias, no tensors."""

    rope: RopeConfig | None = None

    def __init__(self, cfg, num_heads, d_head):
        self.cfg = cfg
        self.num_heads = num_heads
        self.d_head = d_head

    def init_tensors(self, rng):
        return {}

    def bias(self, tensors, n):
        """Return (values (H, n, n) or None, cache)."""
        return None, None

    def backward(self, tensors, cache, dvalues):
        return {}


class RopePE(PositionalEncoding):
    def __init__(self, cfg, num_heads, d_head):
        super().__init__(cfg, num_heads, d_head)
        self.rope = cfg.rope(d_head)


class AdditivePE(PositionalEncoding):
    def __init__(self, cfg: AdditivePEConfig, num_heads, d_head):
        super().__init__(cfg, num_heads, d_head)
        specs = list(cfg.specs)
        if len(specs) == 1:
            specs = specs * num_heads
        if len(specs) != num_heads:
            raise InvalidParameter(f"need 1 or {num_heads} bias specs, got {len(specs)}")
        variants = {s.variant for s in specs}
        if len(variants) != 1:
            raise InvalidParameter("all heads must use the same additive variant")
        self.variant = variants.pop()
        self.trainable = cfg.trainable and self.variant in TRAINABLE_ADDITIVE
        if self.trainable and self.variant.startswith("T5"):
            bucketings = {repr(s.as_bucketed().params["boundaries"]) for s in specs}
            if len(bucketings) != 1:
                raise InvalidParameter("trainable T5 heads must share one bucketing")
        self.specs = specs

    def init_tensors(self, rng):
        if not self.trainable:
            return {}
        if self.variant.startswith("T5"):
            return {"r": np.array([s.params["r"] for s in self.specs], dtype=np.float64)}
        return {
            "r1": np.array([s.params["r1"] for s in self.specs], dtype=np.float64),
            "r2": np.array([s.params["r2"] for s in self.specs], dtype=np.float64),
        }

    def _specs_from(self, tensors):
        if not self.trainable:
            return self.specs
        out = []
        for h, s in enumerate(self.specs):
            p = dict(s.params)
            if "r" in tensors:
                p["r"] = [float(x) for x in tensors["r"][h]]
            else:
                p["r1"] = float(tensors["r1"][h])
                p["r2"] = float(tensors["r2"][h])
            out.append(BiasSpec(s.variant, p))
        return out

    def bias(self, tensors, n):
        specs = self._specs_from(tensors)
        return build_multihead_bias(specs, n).values, None

    def backward(self, tensors, cache, dvalues):
        if not self.trainable:
            return {}
        n = dvalues.shape[-1]
        mask = np.tri(n, dtype=bool)
        d = distance_grid(n)[mask]
        g = dvalues[:, mask]  # (H, entries)
        if "r" in tensors:
            buckets = self.specs[0].bucket(d)
            nb = tensors["r"].shape[1]
            return {"r": np.stack([np.bincount(buckets, weights=g[h], minlength=nb) for h in range(g.shape[0])])}
        r1 = np.asarray(tensors["r1"], dtype=np.float64)[:, None]
        r2 = np.asarray(tensors["r2"], dtype=np.float64)[:, None]
        df = d.astype(np.float64)[None]
        if self.variant == "KerpleLog":
            db_r1 = -np.log1p(r2 * df)
            db_r2 = -r1 * df / (1.0 + r2 * df)
        else:
            pw = np.power(df, r2)
            db_r1 = -pw
            logd = np.log(np.where(df > 0, df, 1.0))
            db_r2 = -r1 * pw * logd
        return {"r1": (g * db_r1).sum(axis=1), "r2": (g * db_r2).sum(axis=1)}


class FirePE(PositionalEncoding):
    def __init__(self, cfg: FirePEConfig, num_heads, d_head):
        super().__init__(cfg, num_heads, d_head)
        self.depth = cfg.depth

    def init_tensors(self, rng):
        mlp = init_mlp(self.num_heads, self.cfg.hidden, self.cfg.depth, self.cfg.activation, self.cfg.final_activation, rng)
        t = {}
        for m, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            t[f"mlp.w{m}"] = w
            t[f"mlp.b{m}"] = b
        t["c"] = np.array(self.cfg.c, dtype=np.float64)
        t["L_multiplier"] = np.array(1.0)
        return t

    def fire_params(self, tensors) -> FireParams:
        n_layers = self.depth + 1
        mlp = MlpParams(
            [tensors[f"mlp.w{m}"] for m in range(n_layers)],
            [tensors[f"mlp.b{m}"] for m in range(n_layers)],
            [self.cfg.activation] * self.depth,
            self.cfg.final_activation,
        )
        return FireParams(
            mlp,
            c=float(tensors["c"]),
            init_L=self.cfg.init_L,
            L_multiplier=float(tensors["L_multiplier"]),
            eps=self.cfg.eps,
            psi=self.cfg.psi,
            use_threshold=self.cfg.use_threshold,
        )

    def bias(self, tensors, n):
        params = self.fire_params(tensors)
        bm, cache = fire_bias_matrix(n, params, keep=True)
        return bm.values, (params, cache)

    def backward(self, tensors, cache, dvalues):
        params, grid = cache
        g = fire_bias_matrix_backward(grid, np.asarray(dvalues, dtype=np.float64), params)
        out = {}
        for m, (w, b) in enumerate(zip(g.weights, g.biases)):
            out[f"mlp.w{m}"] = w
            out[f"mlp.b{m}"] = b
        out["c"] = np.array(g.c)
        out["L_multiplier"] = np.array(g.L_multiplier)
        return out


def make_pe(cfg, num_heads, d_head) -> PositionalEncoding:
    if isinstance(cfg, NoPEConfig):
        return PositionalEncoding(cfg, num_heads, d_head)
    if isinstance(cfg, RopePEConfig):
        return RopePE(cfg, num_heads, d_head)
    if isinstance(cfg, AdditivePEConfig):
        return AdditivePE(cfg, num_heads, d_head)
    if isinstance(cfg, FirePEConfig):
        if cfg.activation not in ("relu", "gelu", "identity"):
            raise NonDifferentiableConfiguration(f"FIRE activation {cfg.activation!r} cannot be trained")
        return FirePE(cfg, num_heads, d_head)
    raise InvalidParameter(f"unsupported PE config {cfg!r}")
