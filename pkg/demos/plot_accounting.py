"""
=====================================
Budgets, noise scales and guarantees
=====================================

How a target (epsilon, delta)-DP guarantee turns into a Gaussian noise scale,
a per-record Renyi budget, and a query count each record can absorb.
"""

# %%
# Calibrating the noise
# ---------------------
#
# A classification query releases a noisy argmax over a vote histogram. One
# substituted demonstration moves a single vote between two bins, so the l2
# sensitivity is sqrt(2).

import math

import numpy as np

from dpicl.pipeline import plan_privacy
from dpicl.privacy_core import DpGuarantee, calibrate_sigma, classical_gaussian_sigma

sigma, alpha = calibrate_sigma(DpGuarantee(0.5, 1e-5), math.sqrt(2.0))
print(f"RDP calibration:      sigma = {sigma:.3f} (order {alpha:g})")
print(f"classical Gaussian:   sigma = {classical_gaussian_sigma(0.5, 1e-5, math.sqrt(2.0)):.3f}")

# %%
# Noise against the privacy target
# --------------------------------
#
# Noise scales roughly like 1/epsilon.

for eps in (0.25, 0.5, 1.0, 2.0, 4.0):
    s, a = calibrate_sigma(DpGuarantee(eps, 1e-5), math.sqrt(2.0))
    print(f"eps = {eps:4}: sigma = {s:7.3f}, alpha* = {a:g}")

# %%
# Reusing records
# ---------------
#
# Allowing every record to be retrieved T times multiplies its RDP spend by T.
# The noise grows roughly like sqrt(T).

for uses in (1, 2, 4, 8, 16):
    plan = plan_privacy("classification", 1.0, 1e-5, uses_per_record=uses)
    print(
        f"T = {uses:2d}: sigma = {plan.sigma:6.2f}, per-query RDP = {plan.cost.epsilon_t:.4f}, "
        f"budget = {plan.budget.epsilon_max:.4f} at alpha {plan.budget.alpha_star:g}"
    )

# %%
# Question answering
# ------------------
#
# The keyword release adds a pure-DP choice of k and a PTR test with failure
# probability delta_i. Half of delta covers PTR failures over a record's uses
# and the other half the RDP-to-DP conversion.

qa = plan_privacy("qa", 4.0, 1e-5, uses_per_record=2, epsilon_em=1.0)
g = qa.guarantee()
print(f"sigma = {qa.sigma:.3f}, delta_i = {qa.delta_i:.2e}, delta_max = {qa.budget.delta_max:.2e}")
print(f"guarantee: ({g.epsilon_hat:.4f}, {g.delta_hat:g})-DP per record")

# %%
# The guarantee does not depend on the number of queries: once a record cannot
# afford another charge it simply stops being retrieved.

print(np.isclose(plan_privacy("classification", 1.0, 1e-5).guarantee().epsilon_hat, 1.0, rtol=1e-5))
