"""Command-line front end.

Every subcommand reads one JSON run config (see ``schemas/run_config.json``),
lets ``--seed``, ``--out`` and ``--precision`` override the matching scalar
fields, validates the result and only then starts computing.

Exit codes: 0 success, 1 verification or training failure, 2 config or
output error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as benchmod
from .errors import ConfigError, FireLabError, OutputError, TrainingDiverged
from .fire import FireParams, init_fire
from .kernels import BiasSpec
from .microlm.checkpoint import load_checkpoint, save_checkpoint
from .microlm.model import ModelConfig
from .microlm.positional import make_pe, pe_from_json
from .microlm.tasks import min_length
from .microlm.train import EvalReport, TrainConfig, eval_lengths, train
from .representation import CASES, default_tolerance, run_verification
from .schema import validate

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("bias", "verify", "train", "eval", "bench")
DEFAULT_PRECISION = {"bias": "f64", "verify": "f64", "train": "f32", "eval": "f32", "bench": "f64"}


def _fmt(x) -> str:
    return repr(float(x) + 0.0)  # no "-0.0" in exports


def _write(path: Path, text: str):
    try:
        path.write_text(text)
    except OSError as e:
        raise OutputError(path, e.strerror or e) from None


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _dtype(precision):
    return np.float32 if precision == "f32" else np.float64


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def load_run_config(path, overrides=None) -> dict:
    """Read, override and validate a run config; raises ConfigError."""
    if path is None:
        doc = {}
    else:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror or e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = v
    validate(doc, "run_config")
    return doc


def _model_config(doc) -> ModelConfig:
    if "model" not in doc:
        raise ConfigError("this subcommand needs a 'model' section")
    return ModelConfig.from_json(doc["model"])


def _train_config(doc) -> TrainConfig:
    return TrainConfig(**doc.get("train", {}))


def _resolve_pe(src, seed):
    """A bias_source document as a BiasSpec list or FireParams (not checkpoints)."""
    if "spec" in src:
        return [BiasSpec.from_json(src["spec"])]
    if "specs" in src:
        return [BiasSpec.from_json(s) for s in src["specs"]]
    if "fire" in src:
        return FireParams.from_json(src["fire"])
    kw = dict(src["fire_init"])
    extra = {k: kw.pop(k) for k in ("psi", "use_threshold") if k in kw}
    return dataclasses.replace(init_fire(rng=np.random.default_rng(seed), **kw), **extra)


def _checkpoint_bias(src):
    params, _ = load_checkpoint(src["checkpoint"])
    cfg = params.config
    layer = src.get("layer", 0)
    if layer >= cfg.num_layers:
        raise ConfigError(f"layer {layer} out of range for a {cfg.num_layers}-layer checkpoint")
    pe = make_pe(cfg.pe, cfg.num_heads, cfg.d_head)
    tensors = {k: np.asarray(v, dtype=np.float64) for k, v in params.pe_tensors(cfg.pe_slot(layer)).items()}

    def build(n):
        values, _ = pe.bias(tensors, n)
        return np.zeros((cfg.num_heads, n, n)) if values is None else np.asarray(values, dtype=np.float64)

    return build


# ---------------------------------------------------------------------------
# subcommands; each takes the validated doc and the output directory
# ---------------------------------------------------------------------------


def cmd_bias(doc, out: Path) -> int:
    sec = doc["bias"] if "bias" in doc else None
    if sec is None:
        raise ConfigError("bias needs a 'bias' section")
    n = sec["n"]
    row = sec.get("row_slice")
    if row is not None and row >= n:
        raise ConfigError(f"row_slice {row} must be < n={n}")
    src = sec["pe"]
    if "checkpoint" in src:
        build = _checkpoint_bias(src)
    else:
        _, build = benchmod.bias_builder(_resolve_pe(src, doc.get("seed", 0)))
    values = build(n).astype(_dtype(doc["precision"]))
    H = values.shape[0]
    rows = [(h, i, j, _fmt(values[h, i, j])) for h in range(H) for i in range(n) for j in range(i + 1)]
    _write(out / "bias.csv", _csv(rows, ["head", "i", "j", "bias"]))
    if row is not None:
        rows = [(h, row, j, _fmt(values[h, row, j])) for h in range(H) for j in range(row + 1)]
        _write(out / "bias_row.csv", _csv(rows, ["head", "i", "j", "bias"]))
    print(f"bias: {H} heads x {n} positions -> {out / 'bias.csv'}")
    return EXIT_OK


def cmd_verify(doc, out: Path, corrupt=False) -> int:
    sec = doc.get("verify", {})
    L0 = sec.get("L0", 128)
    tol = sec.get("tolerance")
    tol = default_tolerance(L0) if tol is None else tol
    records = run_verification(
        L0=L0,
        seeds=sec.get("seeds", 5),
        tolerance=tol,
        corrupt=corrupt or sec.get("corrupt", False),
        cases=tuple(sec.get("cases", CASES)),
        base_seed=doc.get("seed", 0),
    )
    failing = [r for r in records if not r["pass"]]
    report = {
        "L0": L0,
        "tolerance": tol,
        "passed": not failing,
        "cases": {c: [r for r in records if r["case"] == c] for c in dict.fromkeys(r["case"] for r in records)},
        "failing": [{"case": r["case"], "params_seed": r["params_seed"], "max_abs_error": r["max_abs_error"]} for r in failing],
    }
    _write(out / "verify.json", json.dumps(report, indent=1) + "\n")
    for r in failing:
        print(f"FAIL {r['case']} seed={r['params_seed']} max_abs_error={r['max_abs_error']:.3e}", file=sys.stderr)
    print(f"verify: {len(records) - len(failing)}/{len(records)} within {tol:g}")
    return EXIT_OK if not failing else EXIT_FAIL


def cmd_train(doc, out: Path) -> int:
    cfg = _model_config(doc)
    tc = _train_config(doc)
    seed = doc.get("seed", 0)
    res = train(cfg, tc, seed=seed, dtype=_dtype(doc["precision"]))
    _write(out / "loss_curve.csv", res.loss_curve_csv())
    try:
        save_checkpoint(res.params, out / "checkpoint", step=tc.steps)
    except OSError as e:
        raise OutputError(out / "checkpoint", e.strerror or e) from None
    final = f"{res.losses[-1]:.4f}" if res.losses else "n/a"
    print(f"train: {tc.steps} steps, final loss {final}")
    return EXIT_OK


def cmd_eval(doc, out: Path) -> int:
    if "eval" not in doc:
        raise ConfigError("eval needs an 'eval' section")
    sec = doc["eval"]
    seed = doc.get("seed", 0)
    samples = sec.get("samples", 64)
    lengths = sec["lengths"]
    if min(lengths) < min_length():
        raise ConfigError(f"eval length {min(lengths)} is below the minimum task size {min_length()}")
    if sec.get("checkpoint"):
        params, _ = load_checkpoint(sec["checkpoint"])
        report = eval_lengths(params, lengths, samples=samples, seed=seed)
    else:
        base = _model_config(doc)
        tc = _train_config(doc)
        variants = sec.get("variants") or [{"name": base.pe.kind, "pe": base.pe.to_json()}]
        # build every config before the first (slow) training run
        plans = [(v["name"], dataclasses.replace(base, pe=pe_from_json(v["pe"]))) for v in variants]
        for _, cfg in plans:
            make_pe(cfg.pe, cfg.num_heads, cfg.d_head)
        report = EvalReport([])
        for name, cfg in plans:
            res = train(cfg, tc, seed=seed, dtype=_dtype(doc["precision"]))
            report = report + eval_lengths(res.params, lengths, task=tc.task, samples=samples, seed=seed, variant=name)
    _write(out / "eval.csv", report.to_csv())
    print(f"eval: {len(report.rows)} rows -> {out / 'eval.csv'}")
    return EXIT_OK


def cmd_bench(doc, out: Path) -> int:
    sec = doc["bench"] if "bench" in doc else None
    if sec is None:
        raise ConfigError("bench needs a 'bench' section")
    mode = sec.get("mode", "bias")
    seq_len = sec.get("seq_len", 512)
    reps = sec.get("reps", benchmod.MIN_REPS)
    seed = doc.get("seed", 0)
    pin = benchmod.single_thread() if sec.get("single_thread", False) else contextlib.nullcontext()
    results = []
    if mode == "attention":
        base = _model_config(doc)
        configs = {v["name"]: dataclasses.replace(base, pe=pe_from_json(v["pe"])) for v in sec["variants"]}
        with pin:
            results = benchmod.time_attention_forward(configs, seq_len, reps=reps, seed=seed)
    else:
        builders = []
        for v in sec["variants"]:
            src = v["pe"]
            if "checkpoint" in src:
                raise ConfigError("bench does not take checkpoint bias sources")
            builders.append((v["name"], _resolve_pe(src, seed)))
        with pin:
            for name, pe in builders:
                for layers in sec.get("layers", [1]):
                    for shared in sec.get("shared", [False]):
                        results.append(benchmod.time_bias_construction(pe, seq_len, layers, shared, reps, variant=name))
    _write(out / "bench.csv", benchmod.results_csv(results))
    _write(out / "bench_checksums.csv", benchmod.checksums_csv(results))
    for r in results:
        print(f"bench: {r.variant} n={r.seq_len} layers={r.layers} shared={int(r.shared)} median={r.median_ns / 1e6:.3f} ms")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="firelab", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "bias": "export a per-head bias matrix as CSV",
        "verify": "check the exact FIRE constructions of the classic encodings",
        "train": "train the micro-LM; writes a loss curve and a checkpoint",
        "eval": "length-sweep evaluation of one or more PE variants",
        "bench": "time bias construction or attention forward passes",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
        p.add_argument("--out", help="output directory (default: config 'out' or the current directory)")
        p.add_argument("--precision", choices=("f32", "f64"), help="floating-point precision")
        if name == "verify":
            p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = load_run_config(args.config, {"seed": args.seed, "out": args.out, "precision": args.precision})
        doc.setdefault("precision", DEFAULT_PRECISION[args.command])
        out = Path(doc.get("out", "."))
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OutputError(out, e.strerror or e) from None
        if args.command == "verify":
            return cmd_verify(doc, out, corrupt=args.corrupt)
        return globals()[f"cmd_{args.command}"](doc, out)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (FireLabError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e.filename or ''}: {e.strerror or e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
