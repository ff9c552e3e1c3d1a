"""End-to-end private in-context learning runs.

For every test query, in input order:

1. compute the per-record cost of the upcoming query and mask out records
   that cannot afford it,
2. retrieve the ``num_shards * n_shot`` nearest affordable demonstrations
   (or a Poisson sample for the baseline) and deal them into shards,
3. prompt the model once per shard,
4. aggregate privately (noisy-argmax votes, or keyword release with PTR),
5. charge exactly the records that were retrieved.

A query whose shard calls fail is marked failed and charges nothing.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from dpicl import llm_client, mechanisms, privacy_core
from dpicl.errors import BudgetViolationError, InvalidParameterError, LLMError
from dpicl.metrics import evaluate
from dpicl.privacy_core import ALPHA_GRID, DpGuarantee
from dpicl.privacy_filter import (
    RNM_SENSITIVITY,
    BudgetConfig,
    KsaPtr,
    NearestNeighborDummy,
    PrivacyFilter,
    QueryCost,
    RnmGaussian,
    guarantee_for_budget,
    per_query_cost,
)
from dpicl.retrieval import FlatIndex, partition_shards, poisson_sample, top_k

logger = logging.getLogger(__name__)

TASKS = ("classification", "qa")
RETRIEVAL_MODES = ("knn", "poisson", "dummy-nn")
QA_TEMPERATURE = 0.7


@dataclass(frozen=True)
class Query:
    id: Any
    content: str
    embedding: np.ndarray = field(repr=False)
    question: Optional[str] = None
    answer: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    budget: BudgetConfig
    sigma: float
    task: str = "classification"
    retrieval_mode: str = "knn"
    num_shards: int = 10
    n_shot: int = 4
    classes: Tuple[str, ...] = ()
    epsilon_em: float = 0.0
    delta_i: float = 0.0
    k_min: int = mechanisms.DEFAULT_K_MIN
    k_max: int = mechanisms.DEFAULT_K_MAX
    fixed_k: Optional[int] = None
    gamma: Optional[float] = None
    seed: int = 0
    model: str = "default"
    temperature: Optional[float] = None
    max_tokens: int = 32
    max_workers: Optional[int] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidParameterError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.retrieval_mode not in RETRIEVAL_MODES:
            raise InvalidParameterError(f"retrieval_mode must be one of {RETRIEVAL_MODES}")
        if self.retrieval_mode == "dummy-nn" and self.task != "classification":
            raise InvalidParameterError("dummy-nn retrieval only applies to classification")
        if self.num_shards < 1 or self.n_shot < 0:
            raise InvalidParameterError("need num_shards >= 1 and n_shot >= 0")
        if self.task == "classification" and not self.classes:
            raise InvalidParameterError("classification needs a class set")
        if not self.sigma > 0:
            raise InvalidParameterError("sigma must be > 0")
        if self.task == "qa":
            if not 0.0 < self.delta_i < 1.0:
                raise InvalidParameterError("qa needs delta_i in (0, 1)")
            if self.epsilon_em == 0.0 and self.fixed_k is None:
                raise InvalidParameterError("fixed_k is required when FindBestK is disabled (epsilon_em=0)")
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def k(self):
        return self.num_shards * self.n_shot

    @property
    def mechanism(self):
        if self.task == "qa":
            return KsaPtr(self.sigma, self.delta_i, self.epsilon_em)
        if self.retrieval_mode == "dummy-nn":
            return NearestNeighborDummy(self.sigma)
        return RnmGaussian(self.sigma)

    @property
    def effective_temperature(self):
        if self.temperature is not None:
            return self.temperature
        return QA_TEMPERATURE if self.task == "qa" else 0.0


@dataclass(frozen=True)
class PrivacyPlan:
    sigma: float
    budget: BudgetConfig
    cost: QueryCost
    uses_per_record: int
    delta_i: float = 0.0

    def guarantee(self):
        return guarantee_for_budget(self.budget)


def _repeat_sum(value, times):
    # the filter accumulates charges with +=, so the budget must be built the same way
    total = 0.0
    for _ in range(times):
        total += value
    return total


def plan_privacy(task, epsilon, delta, uses_per_record=1, epsilon_em=0.0, sigma=None, alpha_grid=ALPHA_GRID):
    """Noise scale and per-record budget for a target (epsilon, delta)-DP.

    Each record may be retrieved ``uses_per_record`` times. For QA half of
    ``delta`` goes to PTR failures (``delta_max``, split evenly over the uses)
    and half to the RDP-to-DP conversion. An explicit ``sigma`` skips
    calibration; the best order for it is still committed.
    """
    if uses_per_record < 1:
        raise InvalidParameterError("uses_per_record must be >= 1")
    if task == "classification":
        sensitivity, conv_delta, delta_i, extra = RNM_SENSITIVITY, delta, 0.0, None
    elif task == "qa":
        conv_delta = delta / 2.0
        delta_i = conv_delta / uses_per_record
        sensitivity = 1.0
        extra = (lambda a: privacy_core.pure_dp_to_rdp(epsilon_em, a).epsilon) if epsilon_em > 0 else None
    else:
        raise InvalidParameterError(f"unknown task {task!r}")
    if sigma is None:
        sigma, alpha_star = privacy_core.calibrate_sigma(
            DpGuarantee(epsilon, conv_delta), sensitivity, uses_per_record, alpha_grid, extra_rdp=extra
        )
    else:
        alpha_star = None
    mech = KsaPtr(sigma, delta_i, epsilon_em) if task == "qa" else RnmGaussian(sigma)
    delta_max = _repeat_sum(delta_i, uses_per_record)

    def budget_at(alpha):
        cost = per_query_cost(mech, alpha)
        return cost, BudgetConfig(alpha, _repeat_sum(cost.epsilon_t, uses_per_record), delta_max, delta)

    if alpha_star is None:
        candidates = [budget_at(a) for a in alpha_grid]
        cost, budget = min(candidates, key=lambda cb: guarantee_for_budget(cb[1]).epsilon_hat)
    else:
        cost, budget = budget_at(alpha_star)
    return PrivacyPlan(sigma, budget, cost, uses_per_record, delta_i)


class PoissonAccountant:
    """Global accountant for the subsampled baseline (not per record)."""

    def __init__(self, mechanism, gamma, delta_hat, alpha_grid=ALPHA_GRID):
        self.mechanism = mechanism
        self.gamma = gamma
        self.delta_hat = delta_hat
        self.orders = [int(a) for a in alpha_grid if float(a).is_integer() and a >= 2]
        self.queries = 0

    def _base(self, alpha):
        return per_query_cost(self.mechanism, alpha).epsilon_t

    def _base_delta(self):
        return self.mechanism.delta_i if isinstance(self.mechanism, KsaPtr) else 0.0

    def record(self):
        self.queries += 1

    def guarantee(self):
        if self.queries == 0:
            return DpGuarantee(0.0, self.delta_hat)
        costs = []
        for a in self.orders:
            one = privacy_core.subsampled_rdp(self._base, self.gamma, self._base_delta(), a)
            costs.append(privacy_core.ApproxRdp(a, self.queries * one.epsilon, min(1.0, self.queries * one.delta)))
        return privacy_core.best_conversion(costs, self.delta_hat)[0]


@dataclass
class QueryOutcome:
    query_id: Any
    answer: Optional[str]
    mode_used: str
    retrieved_ids: List[int] = field(default_factory=list)
    shard_responses: List[str] = field(default_factory=list)
    charged_epsilon: float = 0.0
    charged_delta: float = 0.0
    votes: Optional[Dict[str, int]] = None
    invalid_votes: int = 0
    keywords: Optional[List[str]] = None
    k: Optional[int] = None
    error: Optional[str] = None

    def to_dict(self):
        return dataclasses.asdict(self)


class Pipeline:
    """Holds the index, the filter state, and the model for one experiment.

    Args:
      index: Demonstration corpus.
      config: Run configuration.
      llm: Object with ``complete(ChatRequest) -> ChatResponse``; may be None
        for dummy-nn runs.
      privacy_filter: Existing filter to resume from.
    """

    def __init__(self, index: FlatIndex, config: RunConfig, llm=None, privacy_filter=None):
        self.index = index
        self.config = config
        self.llm = llm
        if privacy_filter is None:
            privacy_filter = PrivacyFilter(index.ids, config.budget)
        elif privacy_filter.budget != config.budget:
            raise InvalidParameterError("resumed filter budget differs from the run configuration")
        self.filter = privacy_filter
        self.ordinal = len(privacy_filter.log)
        gamma = config.gamma if config.gamma is not None else min(1.0, config.k / max(len(index), 1))
        self.gamma = gamma
        self.poisson = PoissonAccountant(config.mechanism, gamma, config.budget.delta_hat)

    def _next_rng(self):
        rng = np.random.default_rng([self.config.seed, self.ordinal])
        self.ordinal += 1
        return rng

    def _cost(self):
        return per_query_cost(self.config.mechanism, self.config.budget.alpha_star)

    def _select(self, query, cost, rng):
        """Shard plan for ``query``; None when nothing may be retrieved."""
        cfg = self.config
        if cfg.retrieval_mode == "poisson":
            return poisson_sample(self.index, self.gamma, cfg.num_shards, cfg.n_shot, rng)
        mask = self.filter.eligible_mask(cost)
        if not mask.any() or cfg.k == 0:
            return None
        result = top_k(self.index, query.embedding, cfg.k, mask)
        return partition_shards(result, cfg.num_shards, cfg.n_shot, ragged=True)

    def _request(self, prompt, query, shard=None):
        cfg = self.config
        return llm_client.ChatRequest(
            prompt,
            model=cfg.model,
            temperature=cfg.effective_temperature,
            max_tokens=cfg.max_tokens,
            query_id=None if query.id is None else str(query.id),
            shard=shard,
        )

    def _complete(self, requests):
        if self.llm is None:
            raise InvalidParameterError("this retrieval mode needs a language model")
        workers = self.config.max_workers or self.config.num_shards
        return [r.text for r in llm_client.complete_all(self.llm, requests, workers)]

    def _settle(self, plan, cost):
        """Charge whoever was used; the Poisson baseline goes to the global accountant."""
        retrieved = plan.all_ids() if plan is not None else []
        if self.config.retrieval_mode == "poisson":
            self.poisson.record()
            return retrieved, cost.epsilon_t, cost.delta_t
        self.filter.charge(retrieved, cost)
        if not retrieved:
            return retrieved, 0.0, 0.0
        return retrieved, cost.epsilon_t, cost.delta_t

    def classify_query(self, query: Query) -> QueryOutcome:
        cfg = self.config
        cost = self._cost()
        rng = self._next_rng()
        plan = self._select(query, cost, rng)
        if plan is None:
            text = self._complete([self._request(llm_client.render_classification_prompt(cfg.classes, [], query.content), query)])[0]
            self.filter.charge([], cost)
            return QueryOutcome(query.id, llm_client.extract_label(text, cfg.classes), "fallback-zero-shot", shard_responses=[text])
        requests = []
        for j, batch in enumerate(plan.batches):
            demos = [(self.index[i].content, self.index[i].answer) for i in batch]
            prompt = llm_client.render_classification_prompt(cfg.classes, demos, query.content)
            requests.append(self._request(prompt, query, j))
        responses = self._complete(requests)
        hist = mechanisms.build_vote_histogram([llm_client.extract_label(t, cfg.classes) for t in responses], cfg.classes)
        label = cfg.classes[mechanisms.rnm_gaussian(hist, cfg.sigma, rng)]
        retrieved, eps, delta = self._settle(plan, cost)
        return QueryOutcome(
            query.id, label, "full", retrieved, responses, eps, delta, hist.as_dict(), hist.dropped
        )

    def dummy_nn_query(self, query: Query) -> QueryOutcome:
        """Noisy-argmax over the retrieved neighbors' own labels; no model calls."""
        cfg = self.config
        cost = self._cost()
        rng = self._next_rng()
        plan = self._select(query, cost, rng)
        if plan is None:
            self.filter.charge([], cost)
            return QueryOutcome(query.id, None, "abstain")
        ids = plan.all_ids()
        hist = mechanisms.build_vote_histogram([self.index[i].answer for i in ids], cfg.classes)
        label = cfg.classes[mechanisms.rnm_gaussian(hist, cfg.sigma, rng)]
        retrieved, eps, delta = self._settle(plan, cost)
        return QueryOutcome(query.id, label, "full", retrieved, [], eps, delta, hist.as_dict(), hist.dropped)

    def answer_query(self, query: Query) -> QueryOutcome:
        cfg = self.config
        cost = self._cost()
        rng = self._next_rng()
        qpair = (query.content, query.question or "")
        plan = self._select(query, cost, rng)
        if plan is None:
            text = self._complete([self._request(llm_client.render_qa_prompt([], qpair), query)])[0]
            self.filter.charge([], cost)
            return QueryOutcome(query.id, llm_client.extract_answer(text), "fallback-zero-shot", shard_responses=[text])
        requests = []
        for j, batch in enumerate(plan.batches):
            demos = [(self.index[i].content, self.index[i].question or "", self.index[i].answer) for i in batch]
            requests.append(self._request(llm_client.render_qa_prompt(demos, qpair), query, j))
        responses = [llm_client.extract_answer(t) for t in self._complete(requests)]
        hist = mechanisms.build_token_histogram(responses)
        if cfg.epsilon_em > 0:
            k = mechanisms.find_best_k(hist, cfg.epsilon_em, cfg.k_min, cfg.k_max, rng)
        else:
            k = cfg.fixed_k
        release = mechanisms.top_k_with_ptr(hist, k, cfg.sigma, cfg.delta_i, rng)
        if release.released:
            prompt = llm_client.render_keyword_followup_prompt(release.tokens, qpair)
            mode = "full"
        else:
            prompt = llm_client.render_qa_prompt([], qpair)
            mode = "fallback-zero-shot"
        final = llm_client.extract_answer(self._complete([self._request(prompt, query)])[0])
        # PTR looked at the retrieved data on both branches
        retrieved, eps, delta = self._settle(plan, cost)
        keywords = list(release.tokens) if release.released else None
        return QueryOutcome(query.id, final, mode, retrieved, responses, eps, delta, keywords=keywords, k=int(k))

    def process(self, query: Query) -> QueryOutcome:
        if self.config.task == "qa":
            return self.answer_query(query)
        if self.config.retrieval_mode == "dummy-nn":
            return self.dummy_nn_query(query)
        return self.classify_query(query)

    def guarantee(self) -> DpGuarantee:
        if self.config.retrieval_mode == "poisson":
            return self.poisson.guarantee()
        return self.filter.report_guarantee()

    def run(self, queries: Sequence[Query]):
        """Process ``queries`` in order.

        Returns:
          ``(outcomes, guarantee, report)`` where ``report`` is a JSON-ready dict.
        """
        outcomes = []
        for q in queries:
            try:
                outcomes.append(self.process(q))
            except LLMError as exc:
                logger.error("query %s failed: %s", q.id, exc)
                outcomes.append(QueryOutcome(q.id, None, "failed", error=str(exc)))
        if not self.filter.within_budget():
            raise BudgetViolationError("a record ended the run over budget")
        guarantee = self.guarantee()
        return outcomes, guarantee, self.report(queries, outcomes, guarantee)

    def report(self, queries, outcomes, guarantee):
        cfg = self.config
        cost = self._cost()
        modes = {}
        for o in outcomes:
            modes[o.mode_used] = modes.get(o.mode_used, 0) + 1
        report = {
            "config": _config_dict(cfg),
            "outcomes": [o.to_dict() for o in outcomes],
            "modes": modes,
            "failures": modes.get("failed", 0),
            "privacy": {
                "sigma": cfg.sigma,
                "alpha_star": cfg.budget.alpha_star,
                "epsilon_max": cfg.budget.epsilon_max,
                "delta_max": cfg.budget.delta_max,
                "per_query_epsilon": cost.epsilon_t,
                "per_query_delta": cost.delta_t,
                "records_exhausted": self.filter.exhausted(cost) if cfg.retrieval_mode != "poisson" else None,
                "gamma": self.gamma if cfg.retrieval_mode == "poisson" else None,
            },
            "guarantee": {"epsilon": guarantee.epsilon_hat, "delta": guarantee.delta_hat},
        }
        truth = [(o, q.answer) for o, q in zip(outcomes, queries) if q.answer is not None]
        if truth:
            if cfg.task == "classification":
                hits = [o.answer == a for o, a in truth]
                report["metrics"] = {"accuracy": sum(hits) / len(hits)}
            else:
                report["metrics"] = evaluate([o.answer or "" for o, _ in truth], [a for _, a in truth]).to_dict()
        return report


def _config_dict(cfg):
    d = dataclasses.asdict(cfg)
    d["classes"] = list(cfg.classes)
    return d


def run_experiment(index, queries, config, llm=None, privacy_filter=None):
    """Convenience wrapper: build a :class:`Pipeline` and run ``queries``."""
    pipeline = Pipeline(index, config, llm, privacy_filter)
    outcomes, guarantee, report = pipeline.run(queries)
    return outcomes, guarantee, report
