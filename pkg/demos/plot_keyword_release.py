"""
===============================
Private keyword release for QA
===============================

Each shard answers in free text; the answers become a token histogram, and
the top-k tokens are released only if the gap below them is large enough to
survive a noisy test.
"""

# %%
# The histogram
# -------------

import numpy as np

from dpicl.mechanisms import build_token_histogram, count_gaps, find_best_k, top_k_with_ptr

responses = ["Eiffel Tower", "the eiffel tower", "Eiffel tower, Paris", "tower"] * 5
hist = build_token_histogram(responses)
print(hist.ranked())
print("gaps d_1..d_4:", count_gaps(hist, [1, 2, 3, 4]))

# %%
# Choosing k and testing the gap
# ------------------------------

# The choice of k is itself noisy, so a few seeds give different outcomes.

for seed in range(5):
    k = find_best_k(hist, epsilon_em=1.0, k_min=1, k_max=3, rng=seed)
    release = top_k_with_ptr(hist, k, sigma=1.0, delta_i=1e-6, rng=seed)
    print(f"k = {k}, gap = {release.gap}, noisy gap = {release.noisy_gap:6.2f}, released: {release.tokens}")

# %%
# When shards disagree
# --------------------
#
# Every token appears once, so the gap is at most 1 and the test passes only
# with probability delta_i.

scattered = build_token_histogram([f"answer{i}" for i in range(20)])
passes = [top_k_with_ptr(scattered, 2, 1.0, 0.05, rng=s).released for s in range(10_000)]
print(f"release rate {np.mean(passes):.4f} (delta_i = 0.05)")

# %%
# End to end with a mock model
# ----------------------------

from dpicl.llm_client import MockLLM  # noqa: E402
from dpicl.pipeline import RunConfig, plan_privacy, run_experiment  # noqa: E402
from dpicl.synthetic import make_clustered_task  # noqa: E402

index, queries, _ = make_clustered_task(1000, 10, n_classes=4, dimension=64, spread=0.3, seed=1, qa=True)
plan = plan_privacy("qa", 4.0, 1e-5, epsilon_em=1.0)
cfg = RunConfig(
    budget=plan.budget, sigma=plan.sigma, task="qa", epsilon_em=1.0, delta_i=plan.delta_i, k_min=1, k_max=4,
    num_shards=20, n_shot=2,
)
outcomes, g, report = run_experiment(index, queries, cfg, MockLLM("keyword-echo"))
for o, q in zip(outcomes[:4], queries):
    print(f"{o.mode_used:20s} keywords={o.keywords} answer={o.answer!r} truth={q.answer!r}")
print("means:", {k: round(v, 3) for k, v in report["metrics"]["means"].items()})
print(f"guarantee ({g.epsilon_hat:.3f}, {g.delta_hat:g})")
