"""
Driving everything from the command line
========================================

The ``firelab`` command reads one JSON config per run.  This script writes a
few configs to a temporary directory and runs each subcommand on them.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

work = Path(tempfile.mkdtemp(prefix="firelab-"))
model = {
    "num_layers": 2,
    "num_heads": 2,
    "d_model": 16,
    "vocab_size": 8,
    "train_len": 12,
    "pe": {"kind": "fire", "hidden": 8, "depth": 1, "init_L": 3.0},
}
configs = {
    "bias": {"bias": {"n": 6, "pe": {"spec": {"variant": "Alibi", "params": {"r": 1}}}, "row_slice": 5}},
    "verify": {"verify": {"L0": 64, "seeds": 2}},
    "train": {"model": model, "train": {"steps": 50, "batch_size": 8}},
    "eval": {"eval": {"lengths": [12, 24], "samples": 16, "checkpoint": str(work / "train" / "checkpoint")}},
    "bench": {"bench": {"variants": [{"name": "fire", "pe": {"fire_init": {"heads": 2}}}], "seq_len": 64, "layers": [1, 4], "shared": [True, False]}},
}


def firelab(command, *extra):
    path = work / f"{command}.json"
    path.write_text(json.dumps(configs[command]))
    cmd = [sys.executable, "-m", "firelab", command, "--config", str(path), "--out", str(work / command), *extra]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    print(f"$ firelab {command} -> exit {proc.returncode}")
    print("  " + (proc.stdout + proc.stderr).strip().replace("\n", "\n  "))
    return proc.returncode


# %%
# Each subcommand writes into its own directory.

for command in configs:
    firelab(command)

print((work / "bias" / "bias_row.csv").read_text())
print((work / "eval" / "eval.csv").read_text())

# %%
# Exit codes: 1 when a check fails, 2 for a bad config.

firelab("verify", "--corrupt")
configs["bias"]["bogus"] = True
firelab("bias")
print("outputs in", work)
