"""
=========================================
Nearest neighbors versus random examples
=========================================

Private few-shot classification on a synthetic clustered corpus, comparing
demonstrations chosen by nearest-neighbor retrieval with a Poisson-subsampled
baseline. A mock model that votes for the majority label of its prompt stands
in for the LLM.
"""

# %%
# Setup
# -----

import numpy as np

from dpicl.llm_client import MockLLM
from dpicl.pipeline import RunConfig, plan_privacy, run_experiment
from dpicl.synthetic import make_clustered_task

plan = plan_privacy("classification", 1.0, 1e-5)
print(f"sigma = {plan.sigma:.3f}")

index, queries, classes = make_clustered_task(2000, 40, n_classes=4, class_weights=[0.55, 0.15, 0.15, 0.15], seed=0)
print(len(index), "demonstrations,", len(queries), "queries, classes:", classes)

# %%
# One run per retrieval mode
# --------------------------


def accuracy(mode, seed=0):
    cfg = RunConfig(budget=plan.budget, sigma=plan.sigma, classes=classes, retrieval_mode=mode, seed=seed)
    outcomes, guarantee, report = run_experiment(index, queries, cfg, MockLLM("majority-label"))
    return report["metrics"]["accuracy"], guarantee, report


for mode in ("knn", "poisson", "dummy-nn"):
    acc, g, report = accuracy(mode)
    print(f"{mode:9s} accuracy {acc:.3f}  guarantee ({g.epsilon_hat:.3f}, {g.delta_hat:g})  modes {report['modes']}")

# %%
# A closer look at one query
# --------------------------
#
# Neighbors agree, so the noisy argmax has a wide margin to work with.

acc, _, report = accuracy("knn")
first = report["outcomes"][0]
print("votes:", first["votes"], "-> released", first["answer"], "| truth", queries[0].answer)

# %%
# Budget exhaustion
# -----------------
#
# With a one-use budget each record serves a single query. Asking the same
# question over and over walks outward through the cluster until nothing is
# left.

repeat = [queries[0]] * 60
cfg = RunConfig(budget=plan.budget, sigma=plan.sigma, classes=classes)
outcomes, _, report = run_experiment(index, repeat, cfg, MockLLM("majority-label"))
sizes = np.array([len(o.retrieved_ids) for o in outcomes])
print("retrieved per query:", sizes[:3], "...", sizes[-3:])
print("queries answered from demonstrations:", int((sizes > 0).sum()), "| records exhausted:",
      report["privacy"]["records_exhausted"])
