"""Individual delta-approximate RDP privacy filter.

Every record carries its own ledger of spent RDP epsilon (at one committed
order ``alpha_star``) and spent approximation delta. Before each query the
upcoming per-record charge is known, so the active set is exactly the records
that can still afford it; only records the mechanism actually consumed are
charged. Whatever the number of queries, every record's total stays within
``(epsilon_max, delta_max)``, which gives a ``delta_max``-approximate
``(alpha_star, epsilon_max)``-RDP guarantee per record.

Caveat: the charge for record i is the worst case over substitutions of i
*given that i was retrieved*. A substituted record could also enter a top-k it
was not in; that case is not charged here.
"""

import json
import math
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np

from dpicl import privacy_core
from dpicl.errors import BudgetViolationError, InfeasibleError, InvalidParameterError
from dpicl.privacy_core import ApproxRdp, DpGuarantee

RNM_SENSITIVITY = math.sqrt(2.0)


@dataclass(frozen=True)
class BudgetConfig:
    """Per-record budget plus the end-to-end DP delta to report at.

    ``delta_hat`` is the total DP delta; it must exceed ``delta_max`` and the
    difference is what the RDP-to-DP conversion gets to spend.
    """

    alpha_star: float
    epsilon_max: float
    delta_max: float = 0.0
    delta_hat: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "alpha_star", privacy_core._check_alpha(self.alpha_star))
        if not self.epsilon_max >= 0.0:
            raise InvalidParameterError(f"epsilon_max must be >= 0, got {self.epsilon_max}")
        if not 0.0 <= self.delta_max <= 1.0:
            raise InvalidParameterError(f"delta_max must lie in [0, 1], got {self.delta_max}")
        if not 0.0 < self.delta_hat <= 1.0:
            raise InvalidParameterError(f"delta_hat must lie in (0, 1], got {self.delta_hat}")


@dataclass(frozen=True)
class QueryCost:
    epsilon_t: float
    delta_t: float = 0.0

    def __post_init__(self):
        if not (self.epsilon_t >= 0.0 and math.isfinite(self.epsilon_t)):
            raise InvalidParameterError(f"epsilon_t must be finite and >= 0, got {self.epsilon_t}")
        if not (self.delta_t >= 0.0 and math.isfinite(self.delta_t)):
            raise InvalidParameterError(f"delta_t must be finite and >= 0, got {self.delta_t}")


@dataclass(frozen=True)
class ElementLedger:
    id: int
    spent_epsilon: float
    spent_delta: float


# Mechanism descriptors accepted by per_query_cost.


@dataclass(frozen=True)
class RnmGaussian:
    sigma: float


@dataclass(frozen=True)
class KsaPtr:
    sigma: float
    delta_i: float
    epsilon_em: float = 0.0


@dataclass(frozen=True)
class NearestNeighborDummy:
    sigma: float


def per_query_cost(mechanism, alpha_star) -> QueryCost:
    """Per-retrieved-record charge of one query at order ``alpha_star``.

    The vote histogram moves one count between two bins under substitution
    (l2 sensitivity sqrt(2)); the PTR gap test is a Gaussian mechanism with
    unit effective sensitivity; FindBestK is pure DP.
    """
    if isinstance(mechanism, (RnmGaussian, NearestNeighborDummy)):
        spec = privacy_core.GaussianMechanismSpec(mechanism.sigma, RNM_SENSITIVITY)
        return QueryCost(privacy_core.gaussian_rdp(spec, alpha_star).epsilon, 0.0)
    if isinstance(mechanism, KsaPtr):
        if not 0.0 <= mechanism.delta_i < 1.0:
            raise InvalidParameterError(f"delta_i must lie in [0, 1), got {mechanism.delta_i}")
        parts = [privacy_core.gaussian_rdp(privacy_core.GaussianMechanismSpec(mechanism.sigma, 1.0), alpha_star)]
        if mechanism.epsilon_em > 0.0:
            parts.append(privacy_core.pure_dp_to_rdp(mechanism.epsilon_em, alpha_star))
        total = privacy_core.compose(parts)
        return QueryCost(total.epsilon, mechanism.delta_i)
    raise InvalidParameterError(f"unknown mechanism descriptor {mechanism!r}")


@dataclass(frozen=True)
class LogEntry:
    ordinal: int
    charged: Tuple[int, ...]
    cost: QueryCost


class PrivacyFilter:
    """Per-record ledgers plus the append-only query log.

    Charges are serialized by the caller; this class is not thread-safe.
    """

    def __init__(self, ids: Sequence[int], budget: BudgetConfig):
        self.budget = budget
        self.ids = np.asarray(sorted(int(i) for i in ids), dtype=np.int64)
        if len(set(self.ids.tolist())) != self.ids.size:
            raise InvalidParameterError("record ids must be unique")
        self._row = {int(rid): i for i, rid in enumerate(self.ids)}
        self.spent_epsilon = np.zeros(self.ids.size)
        self.spent_delta = np.zeros(self.ids.size)
        self.log: List[LogEntry] = []

    def __len__(self):
        return self.ids.size

    def ledger(self, record_id) -> ElementLedger:
        i = self._row[int(record_id)]
        return ElementLedger(int(record_id), float(self.spent_epsilon[i]), float(self.spent_delta[i]))

    def eligible_mask(self, upcoming: QueryCost):
        """Row mask of records that can afford ``upcoming`` on top of what they spent."""
        return (self.spent_epsilon + upcoming.epsilon_t <= self.budget.epsilon_max) & (
            self.spent_delta + upcoming.delta_t <= self.budget.delta_max
        )

    def eligible_set(self, upcoming: QueryCost):
        return set(self.ids[self.eligible_mask(upcoming)].tolist())

    def charge(self, retrieved, cost: QueryCost):
        """Charge ``cost`` to each retrieved record and append a log entry.

        Raises:
          BudgetViolationError: if any retrieved record could not afford the
            charge. Nothing is modified in that case.
        """
        retrieved = tuple(sorted(int(i) for i in retrieved))
        if len(set(retrieved)) != len(retrieved):
            raise InvalidParameterError("retrieved ids must be distinct")
        try:
            rows = np.array([self._row[i] for i in retrieved], dtype=np.int64)
        except KeyError as exc:
            raise InvalidParameterError(f"unknown record id {exc.args[0]}") from None
        if rows.size:
            ok = self.eligible_mask(cost)[rows]
            if not ok.all():
                bad = [retrieved[j] for j in np.flatnonzero(~ok)]
                raise BudgetViolationError(f"records {bad} cannot afford {cost}")
            self.spent_epsilon[rows] += cost.epsilon_t
            self.spent_delta[rows] += cost.delta_t
        self.log.append(LogEntry(len(self.log), retrieved, cost))
        return self

    def exhausted(self, upcoming: QueryCost):
        """Number of records that can no longer afford ``upcoming``."""
        return int((~self.eligible_mask(upcoming)).sum())

    def within_budget(self):
        return bool(
            np.all(self.spent_epsilon <= self.budget.epsilon_max) and np.all(self.spent_delta <= self.budget.delta_max)
        )

    def report_guarantee(self) -> DpGuarantee:
        """Per-record (epsilon_hat, delta_hat)-DP implied by the budget alone."""
        return guarantee_for_budget(self.budget)

    @classmethod
    def replay(cls, ids, budget, log):
        state = cls(ids, budget)
        for entry in log:
            state.charge(entry.charged, entry.cost)
        return state

    def to_checkpoint(self):
        return {
            "budget": asdict(self.budget),
            "alpha_star": self.budget.alpha_star,
            "ids": self.ids.tolist(),
            "spent_epsilon": self.spent_epsilon.tolist(),
            "spent_delta": self.spent_delta.tolist(),
            "log": [
                {"ordinal": e.ordinal, "charged": list(e.charged), "epsilon_t": e.cost.epsilon_t, "delta_t": e.cost.delta_t}
                for e in self.log
            ],
        }

    @classmethod
    def from_checkpoint(cls, obj):
        """Rebuild a filter by replaying the stored log; stored spends must agree."""
        budget = BudgetConfig(**obj["budget"])
        log = [LogEntry(e["ordinal"], tuple(e["charged"]), QueryCost(e["epsilon_t"], e["delta_t"])) for e in obj["log"]]
        state = cls.replay(obj["ids"], budget, log)
        if state.spent_epsilon.tolist() != obj["spent_epsilon"] or state.spent_delta.tolist() != obj["spent_delta"]:
            raise InvalidParameterError("checkpoint spends disagree with its query log")
        return state

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_checkpoint(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_checkpoint(json.load(fh))


def guarantee_for_budget(budget: BudgetConfig) -> DpGuarantee:
    if budget.delta_hat <= budget.delta_max:
        raise InfeasibleError(f"delta_hat={budget.delta_hat} must exceed delta_max={budget.delta_max}")
    if budget.epsilon_max == 0.0:
        # zero Renyi divergence means identical output distributions
        return DpGuarantee(0.0, budget.delta_hat)
    cost = ApproxRdp(budget.alpha_star, budget.epsilon_max, budget.delta_max)
    return privacy_core.invert_conversion(cost, budget.delta_hat)
