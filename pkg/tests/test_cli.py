import json
import subprocess
import sys

import numpy as np
import pytest

from firelab.cli import load_run_config, main
from firelab.errors import ConfigError, TrainingDiverged
from firelab.microlm.checkpoint import save_checkpoint
from firelab.microlm.model import ModelConfig, init_params

SMALL_MODEL = {
    "num_layers": 2,
    "num_heads": 2,
    "d_model": 16,
    "vocab_size": 8,
    "train_len": 12,
    "pe": {"kind": "fire", "hidden": 8, "depth": 1, "init_L": 3.0},
}


def run(tmp_path, command, doc, *extra, out="out"):
    cfg = tmp_path / f"{command}.json"
    cfg.write_text(json.dumps(doc))
    return main([command, "--config", str(cfg), "--out", str(tmp_path / out), *extra])


def csv_rows(path):
    lines = path.read_text().splitlines()
    return lines[0], [line.split(",") for line in lines[1:]]


# ---------------------------------------------------------------------------
# bias
# ---------------------------------------------------------------------------


def test_bias_nope(tmp_path):
    assert run(tmp_path, "bias", {"bias": {"n": 4, "pe": {"spec": {"variant": "NoPE", "params": {}}}}}) == 0
    header, rows = csv_rows(tmp_path / "out" / "bias.csv")
    assert header == "head,i,j,bias"
    assert len(rows) == 10 and all(float(r[3]) == 0.0 for r in rows)
    assert all(r[3] == "0.0" for r in rows)  # never "-0.0"


def test_bias_alibi_row_slice(tmp_path):
    doc = {"bias": {"n": 3, "pe": {"spec": {"variant": "Alibi", "params": {"r": 1}}}, "row_slice": 2}}
    assert run(tmp_path, "bias", doc) == 0
    _, rows = csv_rows(tmp_path / "out" / "bias_row.csv")
    assert [float(r[3]) for r in rows] == [-2.0, -1.0, 0.0]
    assert [r[2] for r in rows] == ["0", "1", "2"]


def test_bias_fire_init_multihead(tmp_path):
    doc = {"bias": {"n": 5, "pe": {"fire_init": {"heads": 3, "init_L": 4.0}}}}
    assert run(tmp_path, "bias", doc, "--seed", "7") == 0
    _, rows = csv_rows(tmp_path / "out" / "bias.csv")
    assert len(rows) == 3 * 15 and {r[0] for r in rows} == {"0", "1", "2"}


def test_bias_row_slice_out_of_range(tmp_path):
    doc = {"bias": {"n": 3, "pe": {"spec": {"variant": "Alibi", "params": {"r": 1}}}, "row_slice": 3}}
    assert run(tmp_path, "bias", doc) == 2


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def test_verify_default_passes(tmp_path):
    assert run(tmp_path, "verify", {}) == 0
    report = json.loads((tmp_path / "out" / "verify.json").read_text())
    assert report["passed"] and report["failing"] == []
    assert sum(len(v) for v in report["cases"].values()) == 25
    assert set(report["cases"]) == {"t5", "alibi", "kerple_log", "kerple_power", "sandwich"}


def test_verify_corrupt_fails(tmp_path, capsys):
    assert run(tmp_path, "verify", {"verify": {"seeds": 2}}, "--corrupt") == 1
    report = json.loads((tmp_path / "out" / "verify.json").read_text())
    assert not report["passed"] and len(report["failing"]) == 10
    assert "FAIL" in capsys.readouterr().err


def test_verify_seed_override_changes_draws(tmp_path):
    run(tmp_path, "verify", {"verify": {"seeds": 1, "cases": ["alibi"]}}, "--seed", "3", out="a")
    report = json.loads((tmp_path / "a" / "verify.json").read_text())
    assert report["cases"]["alibi"][0]["params_seed"] == 3


# ---------------------------------------------------------------------------
# train / eval / bench
# ---------------------------------------------------------------------------


def test_train_zero_steps_writes_init_checkpoint(tmp_path):
    doc = {"model": SMALL_MODEL, "train": {"steps": 0}, "seed": 5}
    assert run(tmp_path, "train", doc) == 0
    ref = init_params(ModelConfig.from_json(SMALL_MODEL), seed=5, dtype=np.float32)
    (tmp_path / "ref").mkdir()
    save_checkpoint(ref, tmp_path / "ref" / "checkpoint", step=0)
    for suffix in (".json", ".bin"):
        got = (tmp_path / "out" / ("checkpoint" + suffix)).read_bytes()
        want = (tmp_path / "ref" / ("checkpoint" + suffix)).read_bytes()
        assert got == want, suffix
    assert (tmp_path / "out" / "loss_curve.csv").read_text() == "step,loss,accuracy\n"


def test_train_then_eval_checkpoint(tmp_path):
    doc = {"model": SMALL_MODEL, "train": {"steps": 5, "batch_size": 4, "warmup": 1}}
    assert run(tmp_path, "train", doc) == 0
    _, rows = csv_rows(tmp_path / "out" / "loss_curve.csv")
    assert len(rows) == 5
    ck = str(tmp_path / "out" / "checkpoint")
    assert run(tmp_path, "eval", {"eval": {"lengths": [12, 6], "samples": 4, "checkpoint": ck}}, out="ev") == 0
    header, rows = csv_rows(tmp_path / "ev" / "eval.csv")
    assert header == "variant,length,loss,accuracy,seed"
    assert [(r[0], r[1]) for r in rows] == [("fire", "6"), ("fire", "12")]
    # a checkpoint layer can also feed the bias export
    assert run(tmp_path, "bias", {"bias": {"n": 4, "pe": {"checkpoint": ck, "layer": 1}}}, out="b") == 0
    assert run(tmp_path, "bias", {"bias": {"n": 4, "pe": {"checkpoint": ck, "layer": 2}}}, out="b") == 2


def test_eval_variants_three_rows_each(tmp_path):
    doc = {
        "model": SMALL_MODEL,
        "train": {"steps": 2, "batch_size": 2, "warmup": 1},
        "eval": {
            "lengths": [32, 64, 128],
            "samples": 2,
            "variants": [
                {"name": "fire", "pe": SMALL_MODEL["pe"]},
                {"name": "nope", "pe": {"kind": "nope"}},
                {"name": "rope", "pe": {"kind": "rope"}},
            ],
        },
    }
    assert run(tmp_path, "eval", doc) == 0
    _, rows = csv_rows(tmp_path / "out" / "eval.csv")
    assert [(r[0], int(r[1])) for r in rows] == [(v, L) for v in ("fire", "nope", "rope") for L in (32, 64, 128)]
    assert {r[4] for r in rows} == {"0"}


def test_eval_rejects_short_length(tmp_path):
    assert run(tmp_path, "eval", {"model": SMALL_MODEL, "eval": {"lengths": [2, 8]}}) == 2


def test_bench_four_rows(tmp_path):
    doc = {
        "bench": {
            "variants": [{"name": "fire", "pe": {"fire_init": {"heads": 2}}}],
            "seq_len": 32,
            "layers": [1, 12],
            "shared": [True, False],
        }
    }
    assert run(tmp_path, "bench", doc) == 0
    header, rows = csv_rows(tmp_path / "out" / "bench.csv")
    assert header == "variant,seq_len,layers,shared,rep_median_ns,rep_mean_ns,checksum"
    assert [(r[2], r[3]) for r in rows] == [("1", "1"), ("1", "0"), ("12", "1"), ("12", "0")]
    assert len({r[6] for r in rows}) == 2


def test_bench_attention_mode(tmp_path):
    doc = {
        "model": SMALL_MODEL,
        "bench": {
            "mode": "attention",
            "seq_len": 16,
            "variants": [{"name": "nope", "pe": {"kind": "nope"}}, {"name": "fire", "pe": SMALL_MODEL["pe"]}],
        },
    }
    assert run(tmp_path, "bench", doc) == 0
    _, rows = csv_rows(tmp_path / "out" / "bench.csv")
    assert [r[0] for r in rows] == ["nope", "fire"]


def test_bench_rejects_low_reps(tmp_path):
    doc = {"bench": {"variants": [{"name": "a", "pe": {"spec": {"variant": "Alibi", "params": {"r": 1}}}}], "reps": 5}}
    assert run(tmp_path, "bench", doc) == 2


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------

DETERMINISM = {
    "bias": ({"bias": {"n": 12, "pe": {"fire_init": {"heads": 2, "init_L": 4.0}}, "row_slice": 7}}, ["bias.csv", "bias_row.csv"]),
    "verify": ({"verify": {"L0": 32, "seeds": 2}}, ["verify.json"]),
    "train": ({"model": SMALL_MODEL, "train": {"steps": 4, "batch_size": 4, "warmup": 1}}, ["loss_curve.csv", "checkpoint.json", "checkpoint.bin"]),
    "eval": (
        {"model": SMALL_MODEL, "train": {"steps": 3, "batch_size": 4, "warmup": 1}, "eval": {"lengths": [8, 13], "samples": 4}},
        ["eval.csv"],
    ),
    "bench": (
        {"bench": {"variants": [{"name": "f", "pe": {"fire_init": {"heads": 2}}}], "seq_len": 16, "layers": [1, 3], "shared": [True, False]}},
        ["bench_checksums.csv"],
    ),
}


@pytest.mark.parametrize("command", sorted(DETERMINISM))
def test_subcommands_are_byte_deterministic(tmp_path, command):
    doc, files = DETERMINISM[command]
    doc = dict(doc, seed=11)
    assert run(tmp_path, command, doc, out="a") == 0
    assert run(tmp_path, command, doc, out="b") == 0
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


# ---------------------------------------------------------------------------
# config and IO errors
# ---------------------------------------------------------------------------


def test_unknown_key_rejected(tmp_path, capsys):
    doc = {"bias": {"n": 3, "pe": {"spec": {"variant": "Alibi", "params": {"r": 1}}}}, "foo": 1}
    assert run(tmp_path, "bias", doc) == 2
    assert "foo" in capsys.readouterr().err
    assert not (tmp_path / "out" / "bias.csv").exists()


def test_schema_rejections():
    bad = [
        {"seed": -1},
        {"precision": "f16"},
        {"bias": {"n": 0, "pe": {"spec": {"variant": "NoPE", "params": {}}}}},
        {"bias": {"n": 3, "pe": {"spec": {"variant": "Alibi", "params": {"r": 1, "x": 2}}}}},
        {"model": dict(SMALL_MODEL, pe={"kind": "rope", "hidden": 3})},
        {"bench": {"reps": 3, "variants": []}},
        {"eval": {"samples": 3}},
    ]
    for doc in bad:
        with pytest.raises(ConfigError):
            load_run_config(None, doc)


def test_missing_section_and_config_file(tmp_path):
    assert run(tmp_path, "train", {}) == 2
    assert main(["bias", "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["bias", "--config", str(tmp_path / "broken.json")]) == 2


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    doc = {"bias": {"n": 3, "pe": {"spec": {"variant": "NoPE", "params": {}}}}}
    (tmp_path / "c.json").write_text(json.dumps(doc))
    assert main(["bias", "--config", str(tmp_path / "c.json"), "--out", str(blocker / "sub")]) == 2
    assert str(blocker) in capsys.readouterr().err


def test_divergence_exit_code(tmp_path, monkeypatch, capsys):
    import firelab.cli as cli

    def diverge(*args, **kwargs):
        raise TrainingDiverged(17, float("nan"))

    monkeypatch.setattr(cli, "train", diverge)
    assert run(tmp_path, "train", {"model": SMALL_MODEL}) == 1
    assert "step 17" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "firelab", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("bias", "verify", "train", "eval", "bench"):
        assert name in proc.stdout
