"""
FIRE: a learned function of a normalized distance
=================================================

FIRE feeds a small MLP with ``psi(i - j) / psi(max(L, i))``.  The input
therefore always lies in [0, 1], and longer sequences simply sample that
interval more finely.  Queries before the threshold ``L`` keep absolute
distance information.
"""

import dataclasses

import numpy as np

from firelab.fire import fire_bias_matrix, init_fire, make_ablation_variant, normalized_distance

np.set_printoptions(precision=3, suppress=True, linewidth=110)

params = init_fire(heads=2, init_L=16.0, rng=np.random.default_rng(3))
print(params.psi, "c =", params.c, "L =", params.threshold)

# %%
# Normalized distances stay in [0, 1]
# -----------------------------------
# The largest distance in every row maps to the same point once ``i`` passes
# the threshold, however long the sequence.

for i in (4, 16, 64, 1024, 65536):
    far = normalized_distance(i, 0, params)
    mid = normalized_distance(i, i // 2, params)
    print(f"i={i:>6}: d=i -> {far:.4f}, d=i/2 -> {mid:.4f}")

# %%
# Progressive interpolation
# -------------------------
# The set of MLP inputs used by the last row becomes denser as n grows.

for n in (16, 64, 256):
    xs = np.array([normalized_distance(n - 1, j, params) for j in range(n)])
    gaps = np.diff(np.sort(xs))
    print(f"n={n:>4}: {n} inputs in [{xs.min():.3f}, {xs.max():.3f}], widest gap {gaps.max():.4f}")

# %%
# The bias matrix
# ---------------
# Head 0 for a short sequence (entries above the diagonal are masked).

bm = fire_bias_matrix(6, params)
print(bm.values[0])

# %%
# Ablations
# ---------
# ``raw`` drops both the log transform and the threshold; ``log_only`` drops
# the threshold.  Without a threshold, short queries see their distances
# stretched over the whole [0, 1] range.

for variant in ("raw", "log_only", "full"):
    p = make_ablation_variant(params, variant)
    xs = [normalized_distance(4, j, p) for j in range(5)]
    print(f"{variant:>8}: row 4 inputs {np.round(xs, 3)}")

# %%
# A learnable threshold multiplier scales ``L``; doubling it halves the
# inputs of short rows.

wide = dataclasses.replace(params, L_multiplier=2.0)
print(normalized_distance(8, 0, params), normalized_distance(8, 0, wide))
