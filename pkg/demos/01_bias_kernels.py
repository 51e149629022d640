"""
Classic relative position biases
================================

Every additive encoding here is a function of the query-key distance
``d = i - j``.  We print one row of each bias matrix, look at how T5-style
log-binning groups distances, and check the RoPE relative-position property.
"""

import numpy as np

from firelab.kernels import (
    BiasSpec,
    RopeConfig,
    alibi_slopes,
    build_bias_matrix,
    build_multihead_bias,
    logbin_boundaries,
    rope_rotate,
    t5_bucket_logbin,
)

np.set_printoptions(precision=3, suppress=True, linewidth=110)

# %%
# One row of each bias matrix
# ---------------------------
# Row ``i = 7`` holds the biases from query 7 to keys 0..7.

n = 8
specs = {
    "alibi": BiasSpec.alibi(0.5),
    "kerple-log": BiasSpec.kerple_log(1.0, 0.5),
    "kerple-power": BiasSpec.kerple_power(0.3, 1.2),
    "sandwich": BiasSpec.sandwich(1.0, 16),
    "t5 log-bin": BiasSpec.t5_logbin(8, 6, list(np.linspace(0.0, -1.75, 8))),
}
for name, spec in specs.items():
    row = build_bias_matrix(spec, n).values[0, n - 1, :] + 0.0
    print(f"{name:>13}: {row}")

# %%
# Log-binned T5 buckets
# ---------------------
# The first half of the buckets hold one distance each; the rest grow
# geometrically up to ``max_distance`` and the last bucket absorbs everything
# beyond it.

starts, ids = logbin_boundaries(32, 128)
print("bucket starts:", starts)
for d in (5, 15, 16, 64, 127, 128, 4096):
    print(f"  d={d:>4} -> bucket {int(t5_bucket_logbin(d, 32, 128))}")

# %%
# Multi-head Alibi
# ----------------
# Heads get geometric slopes; the matrix is masked above the diagonal.

m = build_multihead_bias([BiasSpec.alibi(s) for s in alibi_slopes(4)], 5)
print("slopes:", np.round(alibi_slopes(4), 4))
print(m.values[3] + 0.0)

# %%
# RoPE depends only on relative position
# --------------------------------------
# Shifting both the query and the key position leaves their dot product
# unchanged.

rng = np.random.default_rng(0)
cfg = RopeConfig(head_dim=16)
q, k = rng.normal(size=16), rng.normal(size=16)
for shift in (0, 5, 100):
    qi = rope_rotate(q[None], np.array([9 + shift]), cfg)[0]
    kj = rope_rotate(k[None], np.array([4 + shift]), cfg)[0]
    print(f"shift {shift:>3}: q.k = {qi @ kj:.12f}")
