"""Training loop, Adam optimizer and length-sweep evaluation."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import InvalidParameter, TrainingDiverged
from .model import ModelConfig, ModelParams, forward_lm, init_params, loss_and_grad, masked_xent
from .positional import AdditivePEConfig
from .tasks import TASKS, collate, generate_copy_task, min_length, sample_of_length, train_k_range


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    warmup: int = 100
    schedule: str = "cosine"
    grad_clip: float | None = 1.0
    task: str = "copy"

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise InvalidParameter("steps must be >= 0 and batch_size >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise InvalidParameter(f"unknown schedule {self.schedule!r}")
        if self.task not in TASKS:
            raise InvalidParameter(f"unknown task {self.task!r}")

    def lr_at(self, step):
        lr = self.lr
        if self.warmup and step < self.warmup:
            lr = lr * (step + 1) / self.warmup
        elif self.schedule == "cosine" and self.steps > self.warmup:
            frac = (step - self.warmup) / (self.steps - self.warmup)
            lr = lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        return lr


class Adam:
    def __init__(self, tensors, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.t = 0

    def step(self, tensors, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in tensors.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                update = update + self.wd * p
            p -= (lr * update).astype(p.dtype, copy=False)


def _positive_pe_names(params: ModelParams):
    pe = params.config.pe
    if isinstance(pe, AdditivePEConfig) and pe.specs[0].variant in ("KerpleLog", "KerplePower"):
        return [k for k in params.tensors if k.startswith("pe") and k.rsplit(".", 1)[-1] in ("r1", "r2")]
    return []


def clip_grads(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        s = max_norm / (total + 1e-12)
        grads = {k: g * s for k, g in grads.items()}
    return grads, total


@dataclass
class TrainResult:
    params: ModelParams
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)

    def loss_curve_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "accuracy"])
        for s, (l, a) in enumerate(zip(self.losses, self.accuracies)):
            w.writerow([s, repr(float(l)), repr(float(a))])
        return buf.getvalue()


def data_seed(seed):
    return np.random.SeedSequence([seed, 0xDA7A])


def train(model_config: ModelConfig, train_config: TrainConfig, seed=0, params=None, dtype=np.float32, progress=None):
    """Train from ``params`` (or a fresh seeded init) and return params plus curves.

    The batch stream and the init are both derived from ``seed``, so equal
    inputs give identical curves.
    """
    if params is None:
        params = init_params(model_config, seed=seed, dtype=dtype)
    else:
        params = params.copy()
    tc = train_config
    if tc.steps == 0:
        return TrainResult(params)
    k_min, k_max = train_k_range(model_config.train_len)
    stream = generate_copy_task(k_min, k_max, model_config.vocab_size, data_seed(seed), task=tc.task)
    opt = Adam(params.tensors, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay)
    positive = _positive_pe_names(params)
    result = TrainResult(params)
    for step in range(tc.steps):
        tokens, mask = collate([next(stream) for _ in range(tc.batch_size)])
        loss, grads, correct = loss_and_grad(params, tokens, mask)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        grads, _ = clip_grads(grads, tc.grad_clip)
        opt.step(params.tensors, grads, tc.lr_at(step))
        for k in positive:
            np.maximum(params.tensors[k], 1e-4, out=params.tensors[k])
        result.losses.append(loss)
        result.accuracies.append(float(correct.sum() / max(mask[:, 1:].sum(), 1)))
        if progress is not None:
            progress(step, loss)
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalRow:
    variant: str
    length: int
    loss: float
    accuracy: float
    seed: int


@dataclass
class EvalReport:
    rows: list

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "length", "loss", "accuracy", "seed"])
        for r in self.rows:
            w.writerow([r.variant, r.length, repr(float(r.loss)), repr(float(r.accuracy)), r.seed])
        return buf.getvalue()

    def by_length(self):
        return {r.length: r for r in self.rows}

    def __add__(self, other):
        return EvalReport(self.rows + other.rows)


def eval_lengths(params: ModelParams, lengths, task="copy", samples=64, seed=0, variant=None) -> EvalReport:
    """Masked loss/accuracy at each sequence length, one full forward per sample."""
    lengths = sorted(int(L) for L in lengths)
    if lengths and lengths[0] < min_length(task):
        raise InvalidParameter(f"length {lengths[0]} is below the minimum task size {min_length(task)}")
    variant = variant or params.config.pe.kind
    rows = []
    for L in lengths:
        rng = np.random.default_rng([seed, L, 0xE7A1])
        batch = [sample_of_length(L, params.config.vocab_size, rng, task) for _ in range(samples)]
        tokens, mask = collate(batch)
        logits = forward_lm(tokens, params)
        loss, _, correct = masked_xent(logits, tokens, mask)
        acc = float(correct.sum() / mask[:, 1:].sum())
        rows.append(EvalRow(variant, L, loss, acc, seed))
    return EvalReport(rows)
