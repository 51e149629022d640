"""
Checking hand-written gradients
===============================

Both the FIRE bias and the whole micro language model are differentiated by
hand.  Central finite differences give an independent check.
"""

import numpy as np

from firelab.fire import init_fire
from firelab.gradcheck import check_fire_grad, check_lm_grad
from firelab.kernels import BiasSpec
from firelab.microlm.model import ModelConfig, init_params
from firelab.microlm.positional import AdditivePEConfig, FirePEConfig, NoPEConfig, RopePEConfig

rng = np.random.default_rng(0)

# %%
# FIRE parameters, including ``c`` and the threshold multiplier
# ------------------------------------------------------------

p = init_fire(heads=3, hidden=8, c=0.7, init_L=12.5, rng=rng)
for i, j in [(3, 1), (20, 4), (40, 40)]:
    err = check_fire_grad(p, i, j, rng.normal(size=3))
    print(f"b({i},{j}): max relative error {err:.2e}")

# %%
# The full model
# --------------
# Two layers, d_model 8, six tokens, double precision.

tokens = rng.integers(0, 7, size=(2, 6))
mask = rng.random((2, 6)) < 0.7
for name, pe in {
    "nope": NoPEConfig(),
    "rope": RopePEConfig(),
    "kerple": AdditivePEConfig([BiasSpec.kerple_log(1.0, 0.5)]),
    "fire": FirePEConfig(init_L=3.5, hidden=6),
}.items():
    cfg = ModelConfig(num_layers=2, num_heads=2, d_model=8, ffn_mult=2, vocab_size=7, train_len=6, pe=pe)
    report = check_lm_grad(init_params(cfg, seed=1, dtype=np.float64), tokens, mask)
    worst = max(report, key=report.get)
    print(f"{name:>6}: worst tensor {worst:<22} {report[worst]:.2e}")
