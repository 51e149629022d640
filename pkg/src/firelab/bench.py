"""Wall-clock timing of bias construction and attention forward passes.

The main question is how much layer sharing saves: a shared positional
bias is built once per forward pass and reused by every layer, while an
unshared one is rebuilt per layer.
"""
from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import InvalidParameter
from .fire import FireParams, fire_bias_matrix
from .kernels import BiasSpec, build_multihead_bias
from .microlm.model import ModelConfig, forward_lm, init_params

WARMUP = 3
MIN_REPS = 10
CSV_HEADER = ["variant", "seq_len", "layers", "shared", "rep_median_ns", "rep_mean_ns", "checksum"]


@dataclass
class BenchResult:
    variant: str
    seq_len: int
    layers: int
    shared: bool
    reps: int
    min_ns: int
    median_ns: float
    mean_ns: float
    checksum: str
    samples_ns: list = field(default_factory=list, repr=False)

    @classmethod
    def from_samples(cls, variant, seq_len, layers, shared, samples, checksum):
        return cls(
            variant,
            seq_len,
            layers,
            shared,
            len(samples),
            min(samples),
            statistics.median(samples),
            statistics.fmean(samples),
            checksum,
            list(samples),
        )

    def iqr_ns(self):
        q1, _, q3 = statistics.quantiles(self.samples_ns, n=4, method="inclusive")
        return q3 - q1

    def csv_row(self):
        return [self.variant, self.seq_len, self.layers, int(self.shared), repr(float(self.median_ns)), repr(float(self.mean_ns)), self.checksum]


def results_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in results:
        w.writerow(r.csv_row())
    return buf.getvalue()


def checksums_csv(results) -> str:
    """The timing-free columns only; identical across runs for equal inputs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "seq_len", "layers", "shared", "reps", "checksum"])
    for r in results:
        w.writerow([r.variant, r.seq_len, r.layers, int(r.shared), r.reps, r.checksum])
    return buf.getvalue()


@contextlib.contextmanager
def single_thread(cpu=None):
    """Limit BLAS pools to one thread and pin the process to one CPU."""
    pinned = None
    if hasattr(os, "sched_setaffinity"):
        pinned = os.sched_getaffinity(0)
        os.sched_setaffinity(0, {min(pinned) if cpu is None else cpu})
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        if pinned is not None:
            os.sched_setaffinity(0, pinned)


def _digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def _check_reps(reps):
    if reps < MIN_REPS:
        raise InvalidParameter(f"reps must be >= {MIN_REPS}, got {reps}")


def bias_builder(pe):
    """Return (variant name, callable n -> (H, n, n) bias values)."""
    if isinstance(pe, FireParams):
        return "fire", lambda n: fire_bias_matrix(n, pe).values
    specs = [pe] if isinstance(pe, BiasSpec) else list(pe)
    if not specs or not all(isinstance(s, BiasSpec) for s in specs):
        raise InvalidParameter("expected a BiasSpec, a list of BiasSpecs or FireParams")
    return specs[0].variant, lambda n: build_multihead_bias(specs, n).values


def time_bias_construction(pe, seq_len, layers=1, shared=False, reps=MIN_REPS, warmup=WARMUP, variant=None) -> BenchResult:
    """Time building the per-layer biases of one forward pass.

    With ``shared`` the bias is built once and handed to every layer;
    otherwise it is rebuilt for each layer.  The checksum hashes the bias
    seen by each layer, so it does not depend on the sharing mode.
    """
    _check_reps(reps)
    if seq_len < 1 or layers < 1:
        raise InvalidParameter("seq_len and layers must be >= 1")
    name, build = bias_builder(pe)
    per_layer = [None] * layers

    def run():
        if shared:
            b = build(seq_len)
            for l in range(layers):
                per_layer[l] = b
        else:
            for l in range(layers):
                per_layer[l] = build(seq_len)

    for _ in range(warmup):
        run()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        run()
        samples.append(time.perf_counter_ns() - t0)
    return BenchResult.from_samples(variant or name, seq_len, layers, shared, samples, _digest(per_layer))


def time_attention_forward(configs, seq_len, reps=MIN_REPS, seed=0, batch=1, warmup=WARMUP):
    """Median forward time per named ModelConfig on one seeded token batch.

    ``configs`` maps variant name to ModelConfig.  Parameters are drawn from
    the same seed, so all non-positional weights agree across variants.
    """
    _check_reps(reps)
    results = []
    for name, cfg in configs.items():
        if not isinstance(cfg, ModelConfig):
            raise InvalidParameter(f"{name}: expected a ModelConfig")
        params = init_params(cfg, seed=seed)
        tokens = np.random.default_rng([seed, seq_len]).integers(0, cfg.vocab_size, size=(batch, seq_len))
        for _ in range(warmup):
            forward_lm(tokens, params)
        samples = []
        logits = None
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            logits = forward_lm(tokens, params)
            samples.append(time.perf_counter_ns() - t0)
        results.append(BenchResult.from_samples(name, seq_len, cfg.num_layers, cfg.share_pe_across_layers, samples, _digest([logits])))
    return results


@dataclass
class AmortizationReport:
    layers: list
    shared: list
    unshared: list
    shared_slope_ns: float
    unshared_slope_ns: float
    noise_band_ns: float

    @property
    def shared_flat(self):
        return abs(self.shared_slope_ns) <= 2.0 * self.noise_band_ns

    @property
    def unshared_grows(self):
        return self.unshared_slope_ns > 0

    def ratio_at(self, layers):
        k = self.layers.index(layers)
        return self.shared[k].median_ns / self.unshared[k].median_ns


def amortization_sweep(pe, seq_len, layers=(1, 2, 4, 8, 12), reps=MIN_REPS) -> AmortizationReport:
    """Fit median bias time against layer count for both sharing modes.

    The noise band is the interquartile range of the single-layer shared
    reps; a shared slope (ns per layer) within twice that band counts as flat.
    """
    layers = sorted(layers)
    shared = [time_bias_construction(pe, seq_len, l, True, reps) for l in layers]
    unshared = [time_bias_construction(pe, seq_len, l, False, reps) for l in layers]
    x = np.asarray(layers, dtype=float)
    s_slope = float(np.polyfit(x, [r.median_ns for r in shared], 1)[0]) if len(layers) > 1 else 0.0
    u_slope = float(np.polyfit(x, [r.median_ns for r in unshared], 1)[0]) if len(layers) > 1 else 0.0
    band = shared[0].iqr_ns() if layers[0] == 1 else time_bias_construction(pe, seq_len, 1, True, reps).iqr_ns()
    return AmortizationReport(layers, shared, unshared, s_slope, u_slope, band)
