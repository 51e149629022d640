"""Pre-LN causal transformer with hand-written backward pass.

Shapes: B batch, n sequence length, D = d_model, H heads, d = d_head,
V vocab.  Parameters live in one flat ``name -> ndarray`` dict so the
optimizer, checkpointing and finite-difference checks can treat every
tensor uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np
from scipy.special import erf

from ..errors import InvalidInput, InvalidParameter
from ..kernels import rope_rotate
from .positional import FirePEConfig, NoPEConfig, make_pe, pe_from_json

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    ffn_mult: int = 4
    vocab_size: int = 16
    train_len: int = 32
    pe: object = field(default_factory=NoPEConfig)
    share_pe_across_layers: bool = False

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "d_model", "ffn_mult", "vocab_size"):
            if getattr(self, name) < 1:
                raise InvalidParameter(f"{name} must be positive")
        if self.d_model % self.num_heads:
            raise InvalidParameter("d_model must be a multiple of num_heads")
        if self.train_len < 2:
            raise InvalidParameter("train_len must be >= 2")

    @property
    def d_head(self):
        return self.d_model // self.num_heads

    @property
    def pe_slots(self):
        return 1 if self.share_pe_across_layers else self.num_layers

    def pe_slot(self, layer):
        return 0 if self.share_pe_across_layers else layer

    def to_json(self):
        return {
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "d_model": self.d_model,
            "d_head": self.d_head,
            "ffn_mult": self.ffn_mult,
            "vocab_size": self.vocab_size,
            "train_len": self.train_len,
            "pe": self.pe.to_json(),
            "share_pe_across_layers": self.share_pe_across_layers,
        }

    @classmethod
    def from_json(cls, doc):
        from ..schema import validate

        validate(doc, "model_config")
        doc = dict(doc)
        d_head = doc.pop("d_head", None)
        doc["pe"] = pe_from_json(doc["pe"])
        cfg = cls(**doc)
        if d_head is not None and d_head != cfg.d_head:
            raise InvalidParameter(f"d_head={d_head} inconsistent with d_model/num_heads={cfg.d_head}")
        return cfg


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict

    @property
    def dtype(self):
        return self.tensors["embed"].dtype

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype):
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def pe_tensors(self, slot):
        prefix = f"pe{slot}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def num_parameters(self):
        return sum(v.size for v in self.tensors.values())


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed=0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    D, V, F = config.d_model, config.vocab_size, config.d_model * config.ffn_mult
    t = {"embed": rng.normal(0.0, 1.0, size=(V, D))}
    for l in range(config.num_layers):
        p = f"layer{l}."
        t[p + "ln1.g"] = np.ones(D)
        t[p + "ln1.b"] = np.zeros(D)
        for w in ("wq", "wk", "wv", "wo"):
            t[p + w] = _uniform(rng, D, (D, D))
        t[p + "ln2.g"] = np.ones(D)
        t[p + "ln2.b"] = np.zeros(D)
        t[p + "ffn.w1"] = _uniform(rng, D, (D, F))
        t[p + "ffn.b1"] = np.zeros(F)
        t[p + "ffn.w2"] = _uniform(rng, F, (F, D))
        t[p + "ffn.b2"] = np.zeros(D)
    t["lnf.g"] = np.ones(D)
    t["lnf.b"] = np.zeros(D)
    t["unembed"] = _uniform(rng, D, (D, V))
    pe = make_pe(config.pe, config.num_heads, config.d_head)
    for slot in range(config.pe_slots):
        for k, v in pe.init_tensors(rng).items():
            t[f"pe{slot}.{k}"] = np.asarray(v)
    return ModelParams(config, {k: np.asarray(v, dtype=dtype) for k, v in t.items()})


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layer_norm_backward(dy, cache):
    xhat, rstd, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


_SQRT_HALF = math.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(z, keep=False):
    """Exact (erf) GeLU; with ``keep`` also returns the normal CDF for the backward pass."""
    cdf = 0.5 * (1.0 + erf(z * _SQRT_HALF))
    if keep:
        return z * cdf, cdf
    return z * cdf


def gelu_grad(z, cdf=None):
    if cdf is None:
        cdf = 0.5 * (1.0 + erf(z * _SQRT_HALF))
    return cdf + z * np.exp(-0.5 * z * z) * _INV_SQRT_2PI


def softmax_causal(row, i, mask=None):
    """Softmax of one logits row for query ``i``: keys ``j > i`` get probability 0.

    ``mask`` (optional, bool) additionally removes keys; an all-masked row
    raises DegenerateRow.
    """
    from ..errors import DegenerateRow

    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.shape[0] < i + 1:
        raise InvalidParameter(f"row of length {row.shape[0]} cannot hold query {i}")
    allowed = np.arange(row.shape[0]) <= i
    if mask is not None:
        allowed &= np.asarray(mask, dtype=bool)
    if not allowed.any():
        raise DegenerateRow("every key in the row is masked")
    z = np.where(allowed, row, -np.inf)
    z = z - z[allowed].max()
    e = np.where(allowed, np.exp(z), 0.0)
    return e / e.sum()


def masked_softmax(S, mask):
    """Row softmax over the last axis with a boolean (n, n) causal mask."""
    z = np.where(mask, S, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def causal_attention(x, wq, wk, wv, wo, num_heads, bias=None, rope=None, keep=False):
    """Multi-head causal self-attention on (B, n, D) inputs.

    ``bias`` is an (H, n, n) additive bias; ``rope`` a RopeConfig.  Passing
    neither gives NoPE.
    """
    B, n, D = x.shape
    d = D // num_heads
    if wq.shape != (D, D):
        raise InvalidParameter(f"projection shape {wq.shape} != ({D}, {D})")
    if bias is not None and (bias.shape[0] != num_heads or bias.shape[-1] < n):
        raise InvalidParameter(f"bias shape {bias.shape} cannot cover {num_heads} heads x {n} positions")

    def heads(t):
        return t.reshape(B, n, num_heads, d).transpose(0, 2, 1, 3)

    q, k, v = heads(x @ wq), heads(x @ wk), heads(x @ wv)
    if rope is not None:
        pos = np.arange(n)
        q = rope_rotate(q, pos, rope)
        k = rope_rotate(k, pos, rope)
    scale = 1.0 / math.sqrt(d)
    S = (q @ k.transpose(0, 1, 3, 2)) * scale
    if bias is not None:
        S = S + bias[None, :, :n, :n].astype(S.dtype, copy=False)
    mask = np.tri(n, dtype=bool)
    P = masked_softmax(S, mask)
    o = P @ v
    merged = o.transpose(0, 2, 1, 3).reshape(B, n, D)
    out = merged @ wo
    if keep:
        return out, (x, q, k, v, P, merged, scale)
    return out


def causal_attention_backward(dout, cache, wq, wk, wv, wo, num_heads, rope=None):
    x, q, k, v, P, merged, scale = cache
    B, n, D = x.shape
    d = D // num_heads
    dwo = merged.reshape(-1, D).T @ dout.reshape(-1, D)
    dmerged = dout @ wo.T
    do = dmerged.reshape(B, n, num_heads, d).transpose(0, 2, 1, 3)
    dP = do @ v.transpose(0, 1, 3, 2)
    dv = P.transpose(0, 1, 3, 2) @ do
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True))
    dbias = dS.sum(axis=0)
    dq = (dS @ k) * scale
    dk = (dS.transpose(0, 1, 3, 2) @ q) * scale
    if rope is not None:
        pos = np.arange(n)
        dq = rope_rotate(dq, pos, rope, inverse=True)
        dk = rope_rotate(dk, pos, rope, inverse=True)

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, n, D)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    x2 = x.reshape(-1, D)
    dwq = x2.T @ dq.reshape(-1, D)
    dwk = x2.T @ dk.reshape(-1, D)
    dwv = x2.T @ dv.reshape(-1, D)
    dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx, dwq, dwk, dwv, dwo, dbias


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    tokens: np.ndarray
    layers: list
    pe_caches: list
    final: tuple
    h_final: np.ndarray


def compute_pe_biases(params: ModelParams, n):
    """One (values, cache) pair per PE slot.  Shared encodings are computed once."""
    cfg = params.config
    pe = make_pe(cfg.pe, cfg.num_heads, cfg.d_head)
    out = [pe.bias(params.pe_tensors(slot), n) for slot in range(cfg.pe_slots)]
    return pe, out


def forward_lm(tokens, params: ModelParams, keep=False):
    """Next-token logits (B, n, V) for integer tokens (B, n) or (n,)."""
    cfg = params.config
    t = params.tensors
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise InvalidInput(f"token ids must lie in [0, {cfg.vocab_size})")
    n = tokens.shape[1]
    pe, biases = compute_pe_biases(params, n)
    x = t["embed"][tokens]
    layer_caches = []
    for l in range(cfg.num_layers):
        p = f"layer{l}."
        bias = biases[cfg.pe_slot(l)][0]
        h, ln1 = layer_norm(x, t[p + "ln1.g"], t[p + "ln1.b"])
        a, att = causal_attention(
            h, t[p + "wq"], t[p + "wk"], t[p + "wv"], t[p + "wo"], cfg.num_heads, bias, pe.rope, keep=True
        )
        x = x + a
        h2, ln2 = layer_norm(x, t[p + "ln2.g"], t[p + "ln2.b"])
        z1 = h2 @ t[p + "ffn.w1"] + t[p + "ffn.b1"]
        f1, cdf = gelu(z1, keep=True)
        x = x + f1 @ t[p + "ffn.w2"] + t[p + "ffn.b2"]
        layer_caches.append((ln1, att, ln2, h2, z1, cdf, f1))
    hf, lnf = layer_norm(x, t["lnf.g"], t["lnf.b"])
    logits = hf @ t["unembed"]
    if squeeze and not keep:
        return logits[0]
    if keep:
        return logits, ForwardCache(tokens, layer_caches, [b[1] for b in biases], lnf, hf)
    return logits


def masked_xent(logits, tokens, loss_mask):
    """Mean next-token cross-entropy over targets flagged in ``loss_mask``.

    Position p predicts token p + 1; ``loss_mask[p + 1]`` selects it.
    Returns (loss, dlogits, per-target correctness).
    """
    tokens = np.atleast_2d(tokens)
    loss_mask = np.atleast_2d(np.asarray(loss_mask, dtype=bool))
    if loss_mask.shape != tokens.shape:
        raise InvalidInput("loss_mask and tokens must have the same shape")
    lg = logits[:, :-1]
    tgt = tokens[:, 1:]
    m = loss_mask[:, 1:]
    z = lg - lg.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    count = m.sum()
    denom = max(int(count), 1)
    loss = float((nll * m).sum() / denom)
    dlg = np.exp(logp)
    np.put_along_axis(dlg, tgt[..., None], np.take_along_axis(dlg, tgt[..., None], axis=-1) - 1.0, axis=-1)
    dlg = dlg * (m[..., None] / denom)
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = dlg
    correct = (lg.argmax(axis=-1) == tgt) & m
    return loss, dlogits.astype(logits.dtype, copy=False), correct


def backward_lm(cache: ForwardCache, dlogits, params: ModelParams):
    """Gradients of sum(dlogits * logits) for every tensor in ``params``."""
    cfg = params.config
    t = params.tensors
    g = {}
    dlogits = np.asarray(dlogits, dtype=cache.h_final.dtype)
    D = cfg.d_model
    g["unembed"] = cache.h_final.reshape(-1, D).T @ dlogits.reshape(-1, dlogits.shape[-1])
    dh = dlogits @ t["unembed"].T
    dx, g["lnf.g"], g["lnf.b"] = layer_norm_backward(dh, cache.final)
    pe = make_pe(cfg.pe, cfg.num_heads, cfg.d_head)
    dbias_slots = [None] * cfg.pe_slots
    for l in reversed(range(cfg.num_layers)):
        p = f"layer{l}."
        ln1, att, ln2, h2, z1, cdf, f1 = cache.layers[l]
        # FFN branch
        g[p + "ffn.b2"] = dx.reshape(-1, D).sum(axis=0)
        g[p + "ffn.w2"] = f1.reshape(-1, f1.shape[-1]).T @ dx.reshape(-1, D)
        df1 = dx @ t[p + "ffn.w2"].T
        dz1 = df1 * gelu_grad(z1, cdf)
        g[p + "ffn.b1"] = dz1.reshape(-1, dz1.shape[-1]).sum(axis=0)
        g[p + "ffn.w1"] = h2.reshape(-1, D).T @ dz1.reshape(-1, dz1.shape[-1])
        dh2 = dz1 @ t[p + "ffn.w1"].T
        dln2, g[p + "ln2.g"], g[p + "ln2.b"] = layer_norm_backward(dh2, ln2)
        dx = dx + dln2
        # attention branch
        dh, g[p + "wq"], g[p + "wk"], g[p + "wv"], g[p + "wo"], dbias = causal_attention_backward(
            dx, att, t[p + "wq"], t[p + "wk"], t[p + "wv"], t[p + "wo"], cfg.num_heads, pe.rope
        )
        slot = cfg.pe_slot(l)
        dbias_slots[slot] = dbias if dbias_slots[slot] is None else dbias_slots[slot] + dbias
        dln1, g[p + "ln1.g"], g[p + "ln1.b"] = layer_norm_backward(dh, ln1)
        dx = dx + dln1
    onehot = np.eye(cfg.vocab_size, dtype=dx.dtype)[cache.tokens.reshape(-1)]
    g["embed"] = onehot.T @ dx.reshape(-1, D)
    for slot in range(cfg.pe_slots):
        pe_grads = pe.backward(params.pe_tensors(slot), cache.pe_caches[slot], dbias_slots[slot])
        for k, v in pe_grads.items():
            g[f"pe{slot}.{k}"] = np.asarray(v)
    return {k: np.asarray(g[k], dtype=t[k].dtype).reshape(t[k].shape) for k in t}


def loss_and_grad(params: ModelParams, tokens, loss_mask):
    logits, cache = forward_lm(tokens, params, keep=True)
    loss, dlogits, correct = masked_xent(logits, cache.tokens, loss_mask)
    return loss, backward_lm(cache, dlogits, params), correct


def lm_loss(params: ModelParams, tokens, loss_mask):
    logits = forward_lm(np.atleast_2d(tokens), params, keep=True)[0]
    return masked_xent(logits, np.atleast_2d(tokens), loss_mask)[0]


def default_fire_config(train_len: int) -> FirePEConfig:
    """FIRE defaults with the threshold scaled to the training length (a quarter of it)."""
    return FirePEConfig(init_L=max(1.0, train_len / 4))
