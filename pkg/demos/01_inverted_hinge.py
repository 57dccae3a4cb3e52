"""Why the inverted hinge loss stays bounded where gradient ascent does not.

Run with ``python demos/01_inverted_hinge.py``.
"""

import numpy as np

from unlearnlab.numerics import softmax_row
from unlearnlab.objectives import ga_logit_grad, ihl_logit_grad, ihl_token_values

# A confident model: the true token (id 0) holds 70% of the mass.
p = np.array([0.7, 0.2, 0.1])
print("IHL gradient:", ihl_logit_grad(p, 0))   # (0.35, -0.30, -0.05)
print("GA gradient: ", ga_logit_grad(p, 0))

# Descending IHL moves mass from the true token to the runner-up only;
# the third token barely moves. GA instead spreads the mass everywhere.

# Push the true logit down step by step and watch both losses.
z = np.array([2.0, 0.5, 0.0])
for step in range(6):
    q = softmax_row(z)
    ihl = float(ihl_token_values(q, np.asarray(0)))
    ga = float(np.log(q[0]))   # per-token GA loss, log p_true
    print(f"step {step}: p_true={q[0]:.4f}  IHL={ihl:.4f}  GA={ga:8.3f}")
    z[0] -= 3.0

# IHL flattens out near zero once the runner-up overtakes the true token,
# while the GA loss keeps falling without bound.
