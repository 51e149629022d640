"""FIRE: a learned bias function of progressively interpolated distances.

The bias for query ``i`` and key ``j`` (0-based, ``j <= i``) is

    f_theta( psi(i - j) / (psi(max(L, i)) + eps) )

with ``psi`` either the identity or ``x -> log(|c| x + 1)``, a learnable
threshold ``L = |L_multiplier * init_L|`` and a small MLP ``f_theta`` mapping
the scalar input to one bias per head.  Without thresholding the normalizer
is ``psi(i)``.

Gradients for every trainable quantity (MLP weights, ``c`` and
``L_multiplier``) are computed analytically; ``|.|`` contributes
``sign(.)`` with ``sign(0) = 0``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import (
    DegeneratePosition,
    DomainError,
    EmptyInput,
    InvalidParameter,
    NonDifferentiableConfiguration,
)
from .kernels import BiasMatrix, causal_mask

SCHEMA_VERSION = 1

DIFFERENTIABLE = {"relu", "gelu", "identity"}
_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def _parse_activation(tag):
    if tag in ("relu", "gelu", "identity", "step", "cos"):
        return tag, None
    if isinstance(tag, str) and tag.startswith("power:"):
        return "power", float(tag.split(":", 1)[1])
    raise InvalidParameter(f"unknown activation {tag!r}")


def power_tag(exponent):
    return f"power:{float(exponent)!r}"


def activate(tag, z):
    kind, p = _parse_activation(tag)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "gelu":
        return 0.5 * z * (1.0 + erf(z * _SQRT_HALF))
    if kind == "identity":
        return z
    if kind == "step":
        return (z >= 0).astype(z.dtype)
    if kind == "cos":
        return np.cos(z)
    if p != int(p) and np.any(z < 0):
        raise DomainError("fractional power activation on a negative pre-activation")
    return np.power(z, p)


def activate_grad(tag, z):
    kind, _ = _parse_activation(tag)
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "gelu":
        return 0.5 * (1.0 + erf(z * _SQRT_HALF)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    if kind == "identity":
        return np.ones_like(z)
    raise NonDifferentiableConfiguration(f"activation {tag!r} has no usable gradient")


# ---------------------------------------------------------------------------
# parameter records
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Stack of affine layers mapping a scalar to ``heads`` outputs.

    ``weights[k]`` has shape (fan_in, fan_out); ``biases[k]`` is a vector or
    ``None``.  One activation tag per hidden layer.
    """

    weights: list
    biases: list
    hidden_activation: list
    final_activation: str | None = None

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [None if b is None else np.asarray(b, dtype=np.float64) for b in self.biases]
        if not self.weights:
            raise InvalidParameter("MLP needs at least one layer")
        if len(self.biases) != len(self.weights):
            raise InvalidParameter("one bias entry (or None) per layer")
        if len(self.hidden_activation) != len(self.weights) - 1:
            raise InvalidParameter("one activation per hidden layer")
        width = 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[0] != width:
                raise InvalidParameter(f"layer {k}: weight shape {w.shape} does not accept width {width}")
            if b is not None and b.shape != (w.shape[1],):
                raise InvalidParameter(f"layer {k}: bias shape {b.shape} != ({w.shape[1]},)")
            width = w.shape[1]
        for tag in self.hidden_activation:
            _parse_activation(tag)
        if self.final_activation is not None:
            _parse_activation(self.final_activation)

    @property
    def heads(self):
        return self.weights[-1].shape[1]

    @property
    def differentiable(self):
        tags = list(self.hidden_activation)
        if self.final_activation is not None:
            tags.append(self.final_activation)
        return all(t in DIFFERENTIABLE for t in tags)

    def copy(self):
        return MlpParams(
            [w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
            list(self.hidden_activation),
            self.final_activation,
        )


@dataclass
class FireParams:
    mlp: MlpParams
    c: float = 0.1
    init_L: float = 512.0
    L_multiplier: float = 1.0
    eps: float = 1e-6
    psi: str = "log"
    use_threshold: bool = True

    def __post_init__(self):
        if self.psi not in ("identity", "log"):
            raise InvalidParameter(f"psi must be 'identity' or 'log', got {self.psi!r}")
        if not self.init_L > 0:
            raise InvalidParameter("init_L must be positive")
        if self.eps < 0:
            raise InvalidParameter("eps must be non-negative")
        if self.psi == "log" and self.c == 0:
            raise InvalidParameter("log transform needs c != 0")
        if self.use_threshold and self.threshold < 1:
            raise InvalidParameter(f"threshold |L_multiplier * init_L| = {self.threshold} < 1")

    @property
    def heads(self):
        return self.mlp.heads

    @property
    def threshold(self):
        return abs(self.L_multiplier * self.init_L)

    def copy(self):
        return dataclasses.replace(self, mlp=self.mlp.copy())

    # -- serialization ------------------------------------------------------

    def to_json(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "heads": self.heads,
            "psi": self.psi,
            "use_threshold": self.use_threshold,
            "c": float(self.c),
            "init_L": float(self.init_L),
            "L_multiplier": float(self.L_multiplier),
            "eps": float(self.eps),
            "mlp": {
                "layers": [
                    {"weight": w.tolist(), "bias": None if b is None else b.tolist()}
                    for w, b in zip(self.mlp.weights, self.mlp.biases)
                ],
                "hidden_activation": list(self.mlp.hidden_activation),
                "final_activation": self.mlp.final_activation,
            },
        }

    @classmethod
    def from_json(cls, doc):
        from .schema import validate

        validate(doc, "fire_params")
        layers = doc["mlp"]["layers"]
        weights = [np.array(l["weight"], dtype=np.float64).reshape(len(l["weight"]), -1) for l in layers]
        # zero-width layers lose their shape in JSON; recover from neighbours
        for k, w in enumerate(weights):
            fan_in = 1 if k == 0 else weights[k - 1].shape[1]
            if w.size == 0:
                b = layers[k]["bias"]
                fan_out = len(b) if b is not None else 0
                weights[k] = np.zeros((fan_in, fan_out))
        mlp = MlpParams(
            weights,
            [None if l["bias"] is None else np.array(l["bias"], dtype=np.float64) for l in layers],
            list(doc["mlp"]["hidden_activation"]),
            doc["mlp"]["final_activation"],
        )
        params = cls(
            mlp,
            c=doc["c"],
            init_L=doc["init_L"],
            L_multiplier=doc["L_multiplier"],
            eps=doc["eps"],
            psi=doc["psi"],
            use_threshold=doc["use_threshold"],
        )
        if params.heads != doc["heads"]:
            raise InvalidParameter(f"heads={doc['heads']} but final layer has {params.heads} outputs")
        return params


def init_mlp(heads, hidden=32, depth=2, activation="relu", final_activation=None, rng=None):
    """Fan-in uniform init ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` for weights and biases."""
    rng = np.random.default_rng(rng)
    dims = [1] + [hidden] * depth + [heads]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights, biases, [activation] * depth, final_activation)


def init_fire(heads, hidden=32, depth=2, activation="relu", c=0.1, init_L=512.0, eps=1e-6, rng=None):
    return FireParams(init_mlp(heads, hidden, depth, activation, rng=rng), c=c, init_L=init_L, eps=eps)


def make_ablation_variant(base: FireParams, variant: str) -> FireParams:
    """``raw``: (i-j)/i; ``log_only``: log transform, no threshold; ``full``: both."""
    table = {"raw": ("identity", False), "log_only": ("log", False), "full": ("log", True)}
    if variant not in table:
        raise InvalidParameter(f"unknown ablation variant {variant!r}")
    psi, thr = table[variant]
    return dataclasses.replace(base, mlp=base.mlp.copy(), psi=psi, use_threshold=thr)


# ---------------------------------------------------------------------------
# position transform
# ---------------------------------------------------------------------------


def _psi_parts(x, psi, c):
    """Return psi(x), d psi/dx and d psi/dc."""
    if psi == "identity":
        return x, np.ones_like(x), np.zeros_like(x)
    a = abs(c)
    den = a * x + 1.0
    return np.log(den), a / den, np.sign(c) * x / den


def psi(x, params: FireParams):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise DomainError("psi is defined for non-negative inputs only")
    out = _psi_parts(x, params.psi, params.c)[0]
    return out.item() if out.ndim == 0 else out


def _normalizer(i, params: FireParams):
    """Normalizer argument and its derivative w.r.t. L_multiplier."""
    i = np.asarray(i, dtype=np.float64)
    if not params.use_threshold:
        return i, np.zeros_like(i)
    L = params.threshold
    # max(L, i): gradient reaches L only where L is the selected branch
    take_L = L > i
    u = np.where(take_L, L, i)
    du = np.where(take_L, np.sign(params.L_multiplier * params.init_L) * params.init_L, 0.0)
    return u, du


def _normalize(d, u, du, params: FireParams):
    """nd = psi(d)/(psi(u)+eps) with partials w.r.t. c and L_multiplier."""
    pd, _, pd_c = _psi_parts(d, params.psi, params.c)
    pu, pu_x, pu_c = _psi_parts(u, params.psi, params.c)
    den = pu + params.eps
    zero = d == 0
    safe = np.where(zero, 1.0, den)
    nd = np.where(zero, 0.0, pd / safe)
    dnd_c = np.where(zero, 0.0, pd_c / safe - pd * pu_c / (safe * safe))
    dnd_L = np.where(zero, 0.0, -pd * pu_x * du / (safe * safe))
    return nd, dnd_c, dnd_L


def normalized_distance(i, j, params: FireParams) -> float:
    if not 0 <= j <= i:
        raise InvalidParameter("positions must satisfy 0 <= j <= i")
    if not params.use_threshold and i == 0:
        raise DegeneratePosition("query position 0 has no normalizer without a threshold")
    u, du = _normalizer(np.array([float(i)]), params)
    nd, _, _ = _normalize(np.array([float(i - j)]), u, du, params)
    return float(nd[0])


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


def _affine(x, w, b):
    # explicit accumulation order so one row never depends on batch size
    acc = np.zeros((x.shape[0], w.shape[1]), dtype=np.float64)
    for k in range(w.shape[0]):
        acc = acc + x[:, k : k + 1] * w[k]
    if b is not None:
        acc = acc + b
    return acc


def mlp_forward_batch(x, mlp: MlpParams, keep=False):
    """Evaluate the MLP on a vector of inputs; returns (N, heads)."""
    h = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    acts = [h]
    pre = []
    n_layers = len(mlp.weights)
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = _affine(h, w, b)
        pre.append(z)
        if k < n_layers - 1:
            h = activate(mlp.hidden_activation[k], z)
        elif mlp.final_activation is not None:
            h = activate(mlp.final_activation, z)
        else:
            h = z
        acts.append(h)
    if keep:
        return h, (acts, pre)
    return h


def mlp_forward(x: float, mlp: MlpParams):
    if not np.isfinite(x):
        raise InvalidParameter("MLP input must be finite")
    return mlp_forward_batch(np.array([x]), mlp)[0]


def mlp_backward(cache, dout, mlp: MlpParams):
    """Backprop (N, heads) upstream through the MLP.

    Returns (weight grads, bias grads, d input (N,)).
    """
    acts, pre = cache
    n_layers = len(mlp.weights)
    g = dout
    dws = [None] * n_layers
    dbs = [None] * n_layers
    for k in reversed(range(n_layers)):
        tag = mlp.hidden_activation[k] if k < n_layers - 1 else mlp.final_activation
        if tag is not None:
            g = g * activate_grad(tag, pre[k])
        dws[k] = acts[k].T @ g
        dbs[k] = None if mlp.biases[k] is None else g.sum(axis=0)
        g = g @ mlp.weights[k].T
    return dws, dbs, g[:, 0]


# ---------------------------------------------------------------------------
# bias evaluation
# ---------------------------------------------------------------------------


def fire_bias(i, j, params: FireParams):
    """Per-head bias vector for one (query, key) pair."""
    return mlp_forward_batch(np.array([normalized_distance(i, j, params)]), params.mlp)[0]


@dataclass
class _GridCache:
    n: int
    index: np.ndarray  # (n, n) flat point index per entry
    nd: np.ndarray
    dnd_c: np.ndarray
    dnd_L: np.ndarray
    mlp_cache: tuple


def _grid_points(n, params: FireParams):
    """Distinct (normalizer, distance) pairs of the causal n x n grid."""
    pos = np.arange(n, dtype=np.float64)
    u_row, du_row = _normalizer(pos, params)
    # rows sharing a normalizer value but not its branch (ties at i == L) stay apart
    keys, first, cls = np.unique(np.stack([u_row, du_row], axis=1), axis=0, return_index=True, return_inverse=True)
    cls = cls.reshape(-1)
    u_vals = u_row[first]
    du_vals = du_row[first]
    # largest row index per class bounds the distances it can produce
    last = np.zeros(len(u_vals), dtype=np.int64)
    np.maximum.at(last, cls, np.arange(n))
    counts = last + 1
    offset = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pt_cls = np.repeat(np.arange(len(u_vals)), counts)
    pt_d = np.arange(counts.sum()) - offset[pt_cls]
    nd, dnd_c, dnd_L = _normalize(pt_d.astype(np.float64), u_vals[pt_cls], du_vals[pt_cls], params)
    ii = np.arange(n)[:, None]
    jj = np.arange(n)[None, :]
    index = np.where(jj <= ii, offset[cls][:, None] + (ii - jj), 0)
    return index, nd, dnd_c, dnd_L


def fire_bias_matrix(n: int, params: FireParams, keep=False):
    """Bias for every causal pair, evaluating the MLP once per distinct input."""
    if n < 1:
        raise EmptyInput("sequence length must be >= 1")
    index, nd, dnd_c, dnd_L = _grid_points(n, params)
    out, mlp_cache = mlp_forward_batch(nd, params.mlp, keep=True)
    mask = causal_mask(n)
    vals = np.where(mask[None], np.moveaxis(out[index], -1, 0), 0.0)
    bm = BiasMatrix(vals, mask)
    if keep:
        return bm, _GridCache(n, index, nd, dnd_c, dnd_L, mlp_cache)
    return bm


@dataclass
class FireGrad:
    weights: list
    biases: list
    c: float
    L_multiplier: float

    def flat(self):
        parts = [w.ravel() for w in self.weights]
        parts += [b.ravel() for b in self.biases if b is not None]
        return np.concatenate(parts + [np.array([self.c, self.L_multiplier])])

    def __add__(self, other):
        return FireGrad(
            [a + b for a, b in zip(self.weights, other.weights)],
            [None if a is None else a + b for a, b in zip(self.biases, other.biases)],
            self.c + other.c,
            self.L_multiplier + other.L_multiplier,
        )


def _require_differentiable(params):
    if not params.mlp.differentiable:
        raise NonDifferentiableConfiguration(
            "FIRE parameters use construction-only activations (step/power/cos)"
        )


def fire_bias_matrix_backward(cache: _GridCache, dvalues, params: FireParams) -> FireGrad:
    """Gradients from an upstream (heads, n, n) array; masked entries are ignored."""
    _require_differentiable(params)
    n = cache.n
    mask = causal_mask(n)
    n_pts = cache.nd.shape[0]
    idx = cache.index[mask]
    dout = np.stack(
        [np.bincount(idx, weights=dvalues[h][mask], minlength=n_pts) for h in range(dvalues.shape[0])],
        axis=1,
    )
    dws, dbs, dnd = mlp_backward(cache.mlp_cache, dout, params.mlp)
    return FireGrad(dws, dbs, float(dnd @ cache.dnd_c), float(dnd @ cache.dnd_L))


def fire_grad(i, j, params: FireParams, upstream) -> FireGrad:
    """Gradient of ``upstream . fire_bias(i, j)`` w.r.t. every trainable quantity."""
    _require_differentiable(params)
    if not 0 <= j <= i:
        raise InvalidParameter("positions must satisfy 0 <= j <= i")
    if not params.use_threshold and i == 0:
        raise DegeneratePosition("query position 0 has no normalizer without a threshold")
    upstream = np.asarray(upstream, dtype=np.float64).reshape(1, -1)
    u, du = _normalizer(np.array([float(i)]), params)
    nd, dnd_c, dnd_L = _normalize(np.array([float(i - j)]), u, du, params)
    _, cache = mlp_forward_batch(nd, params.mlp, keep=True)
    dws, dbs, dnd = mlp_backward(cache, upstream, params.mlp)
    return FireGrad(dws, dbs, float(dnd @ dnd_c), float(dnd @ dnd_L))


def apply_flat(params: FireParams, flat) -> FireParams:
    """Inverse of ``FireGrad.flat`` ordering: rebuild params from a flat vector."""
    p = params.copy()
    pos = 0
    for w in p.mlp.weights:
        w[...] = np.reshape(flat[pos : pos + w.size], w.shape)
        pos += w.size
    for b in p.mlp.biases:
        if b is not None:
            b[...] = flat[pos : pos + b.size]
            pos += b.size
    p.c = float(flat[pos])
    p.L_multiplier = float(flat[pos + 1])
    return p


def flat_params(params: FireParams):
    parts = [w.ravel() for w in params.mlp.weights]
    parts += [b.ravel() for b in params.mlp.biases if b is not None]
    return np.concatenate(parts + [np.array([params.c, params.L_multiplier])])
