"""Fisher-weighted adapter initialisation on a toy weight matrix."""

import numpy as np

from unlearnlab.adapters import flora_init, weighted_objective
from unlearnlab.numerics import svd, truncate

rng = np.random.default_rng(0)
w = rng.standard_normal((8, 6))

# Rows 0 and 1 matter a lot for the forget set relative to the retain set.
f_rel = np.full((8, 6), 0.01)
f_rel[:2] = 50.0

a, b, w_star = flora_init(w, f_rel, r=2)
weights = np.sqrt(f_rel.sum(axis=1))[:, None] * np.ones((1, 6))

plain = truncate(svd(w), 2)
print("row-weighted residual, FLoRA init :", weighted_objective(w, weights, a, b))
print("row-weighted residual, plain SVD  :", weighted_objective(w, weights, plain.vt, plain.u * plain.s))

# The adapter captures the important rows almost exactly ...
print("row errors (FLoRA):", np.round(np.linalg.norm(w - b @ a, axis=1), 3))

# ... and the compensated base keeps the adapted layer output unchanged.
x = rng.standard_normal(6)
print("output change after attachment:", np.abs((w_star + b @ a) @ x - w @ x).max())
