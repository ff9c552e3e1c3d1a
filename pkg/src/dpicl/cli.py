"""Command-line entry point.

    dpicl index-build corpus.jsonl
    dpicl account --config experiment.json
    dpicl run --config experiment.json [--seed N] [--mock {majority,keyword-echo,fixed}]
              [--dry-run] [--resume ledger.json]

Exit codes: 0 success, 2 configuration/input error, 3 transport failure,
4 privacy invariant violation.
"""

import argparse
import copy
import json
import logging
import sys

import jsonschema

from dpicl import llm_client
from dpicl.errors import BudgetViolationError, IngestionError, InfeasibleError, InvalidParameterError, LLMError
from dpicl.pipeline import RETRIEVAL_MODES, TASKS, Pipeline, Query, RunConfig, plan_privacy
from dpicl.privacy_filter import PrivacyFilter
from dpicl.retrieval import normalize_query, norm_summary, read_corpus

logger = logging.getLogger("dpicl")

EXIT_OK, EXIT_CONFIG, EXIT_TRANSPORT, EXIT_INVARIANT = 0, 2, 3, 4

PRESETS = {
    "classification": {
        "task": "classification",
        "retrieval_mode": "knn",
        "num_shards": 10,
        "n_shot": 4,
        "epsilon": 1.0,
        "delta": 1e-5,
        "uses_per_record": 1,
    },
    "qa": {
        "task": "qa",
        "retrieval_mode": "knn",
        "num_shards": 10,
        "n_shot": 4,
        "epsilon": 4.0,
        "delta": 1e-5,
        "uses_per_record": 1,
        "epsilon_em": 1.0,
        "k_min": 15,
        "k_max": 30,
        "temperature": 0.7,
    },
}

MOCK_FLAGS = {"majority": "majority-label", "keyword-echo": "keyword-echo", "fixed": "fixed-text"}

_pos_int = {"type": "integer", "minimum": 1}
EXPERIMENT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"enum": sorted(PRESETS)},
        "corpus": {"type": "string"},
        "queries": {"type": "string"},
        "output": {"type": "string"},
        "checkpoint": {"type": "string"},
        "task": {"enum": list(TASKS)},
        "retrieval_mode": {"enum": list(RETRIEVAL_MODES)},
        "num_shards": _pos_int,
        "n_shot": {"type": "integer", "minimum": 0},
        "classes": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "uses_per_record": _pos_int,
        "sigma": {"type": "number", "exclusiveMinimum": 0},
        "epsilon_em": {"type": "number", "minimum": 0},
        "k_min": _pos_int,
        "k_max": _pos_int,
        "fixed_k": _pos_int,
        "gamma": {"type": "number", "minimum": 0, "maximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "temperature": {"type": "number", "minimum": 0},
        "max_workers": _pos_int,
        "mock": {"enum": list(llm_client.MOCK_BEHAVIORS)},
        "mock_text": {"type": "string"},
        "endpoint": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "base_url": {"type": "string"},
                "model": {"type": "string"},
                "api_key_env": {"type": "string"},
                "timeout": {"type": "number", "exclusiveMinimum": 0},
                "max_attempts": _pos_int,
                "max_tokens": _pos_int,
                "trace_path": {"type": "string"},
            },
        },
    },
}


class ConfigError(Exception):
    pass


def load_experiment(path):
    """Read, validate and preset-expand an experiment file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        jsonschema.validate(raw, EXPERIMENT_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    merged = copy.deepcopy(PRESETS.get(raw.get("preset"), {}))
    merged.update({k: v for k, v in raw.items() if k != "preset"})
    merged.setdefault("task", "classification")
    merged.setdefault("epsilon", 1.0)
    merged.setdefault("delta", 1e-5)
    return merged


def build_plan(exp):
    return plan_privacy(
        exp["task"],
        exp["epsilon"],
        exp["delta"],
        uses_per_record=exp.get("uses_per_record", 1),
        epsilon_em=exp.get("epsilon_em", 1.0 if exp["task"] == "qa" else 0.0),
        sigma=exp.get("sigma"),
    )


def build_run_config(exp, plan, seed=None):
    endpoint = exp.get("endpoint", {})
    kwargs = dict(
        budget=plan.budget,
        sigma=plan.sigma,
        task=exp["task"],
        retrieval_mode=exp.get("retrieval_mode", "knn"),
        num_shards=exp.get("num_shards", 10),
        n_shot=exp.get("n_shot", 4),
        classes=tuple(exp.get("classes", ())),
        epsilon_em=exp.get("epsilon_em", 1.0 if exp["task"] == "qa" else 0.0),
        delta_i=plan.delta_i,
        seed=exp.get("seed", 0) if seed is None else seed,
        model=endpoint.get("model", "default"),
        temperature=exp.get("temperature"),
        max_tokens=endpoint.get("max_tokens", 32),
        max_workers=exp.get("max_workers"),
    )
    for key in ("k_min", "k_max", "fixed_k", "gamma"):
        if key in exp:
            kwargs[key] = exp[key]
    return RunConfig(**kwargs)


def read_queries(path, dimension):
    """Queries share the corpus format; ``answer`` is optional ground truth."""
    queries = []
    with open(path, encoding="utf-8") as fh:
        lines = [(n, line) for n, line in enumerate(fh, start=1) if line.strip()]
    if not lines:
        raise IngestionError("query file is empty")
    header = json.loads(lines[0][1])
    if header.get("dimension") != dimension:
        raise IngestionError(f"query dimension {header.get('dimension')} != corpus dimension {dimension}", line=1)
    for lineno, line in lines[1:]:
        try:
            obj = json.loads(line)
            emb = normalize_query(obj["embedding"], dimension)
            queries.append(Query(obj.get("id", lineno - 1), obj["content"], emb, obj.get("question"), obj.get("answer")))
        except (KeyError, ValueError) as exc:
            raise IngestionError(f"bad query: {exc}", line=lineno) from None
    return queries


def accounting_table(plan):
    g = plan.guarantee()
    rows = [
        ("sigma", f"{plan.sigma:.6g}"),
        ("alpha_star", f"{plan.budget.alpha_star:g}"),
        ("per-query epsilon (RDP)", f"{plan.cost.epsilon_t:.6g}"),
        ("per-query delta", f"{plan.cost.delta_t:.6g}"),
        ("max uses per record", str(plan.uses_per_record)),
        ("epsilon_max (RDP)", f"{plan.budget.epsilon_max:.6g}"),
        ("delta_max", f"{plan.budget.delta_max:.6g}"),
        ("guarantee epsilon", f"{g.epsilon_hat:.6g}"),
        ("guarantee delta", f"{g.delta_hat:.6g}"),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


def cmd_index_build(args):
    index = read_corpus(args.corpus)
    if len(index) == 0:
        raise IngestionError("corpus has no records")
    s = norm_summary(index)
    print(f"records: {s['records']}")
    print(f"dimension: {s['dimension']}")
    print(f"raw norm min/mean/max: {s['norm_min']:.6g} / {s['norm_mean']:.6g} / {s['norm_max']:.6g}")
    return EXIT_OK


def cmd_account(args):
    exp = load_experiment(args.config)
    print(accounting_table(build_plan(exp)))
    return EXIT_OK


def _make_llm(exp, args, config):
    behavior = MOCK_FLAGS.get(args.mock) if args.mock else exp.get("mock")
    if behavior:
        return llm_client.MockLLM(behavior, exp.get("mock_text", "N/A"))
    if config.retrieval_mode == "dummy-nn":
        return None
    ep = exp.get("endpoint", {})
    fields = {k: v for k, v in ep.items() if k in llm_client.EndpointConfig.__dataclass_fields__}
    return llm_client.ChatClient(llm_client.EndpointConfig(**fields))


def cmd_run(args):
    exp = load_experiment(args.config)
    for key in ("corpus", "queries"):
        if key not in exp:
            raise ConfigError(f"config is missing {key!r}")
    plan = build_plan(exp)
    config = build_run_config(exp, plan, args.seed)
    if args.dry_run:
        print(accounting_table(plan))
        return EXIT_OK
    index = read_corpus(exp["corpus"])
    queries = read_queries(exp["queries"], index.dimension)
    pfilter = PrivacyFilter.load(args.resume) if args.resume else None
    llm = _make_llm(exp, args, config)
    try:
        pipeline = Pipeline(index, config, llm, pfilter)
        _, _, report = pipeline.run(queries)
    finally:
        if isinstance(llm, llm_client.ChatClient):
            llm.close()
    output = exp.get("output", "report.json")
    checkpoint = exp.get("checkpoint", output + ".ledger.json")
    report["checkpoint"] = checkpoint
    with open(output, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    pipeline.filter.save(checkpoint)
    g = report["guarantee"]
    print(f"wrote {output}: {len(queries)} queries, {report['failures']} failed, "
          f"guarantee ({g['epsilon']:.4g}, {g['delta']:.3g})-DP")
    return EXIT_TRANSPORT if report["failures"] else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="dpicl", description="Private in-context learning with kNN retrieval.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index-build", help="validate a corpus and print a summary")
    p.add_argument("corpus")
    p.set_defaults(func=cmd_index_build)

    p = sub.add_parser("account", help="print the accounting table for a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("run", help="run an experiment and write a report")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--mock", choices=sorted(MOCK_FLAGS))
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--resume", metavar="PATH")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except BudgetViolationError as exc:
        print(f"privacy invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except LLMError as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (ConfigError, IngestionError, InvalidParameterError, InfeasibleError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
