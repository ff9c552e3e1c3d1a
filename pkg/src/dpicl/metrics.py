"""Answer-quality metrics: exact match, ROUGE-1/2/L, BLEU and ANLS.

Word-level metrics use the KSA tokenizer without stopword removal, so
punctuation and case do not count against a prediction.
"""

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

from dpicl.mechanisms import METRIC_TOKENIZER, tokenize

METRIC_NAMES = ("exact_match", "rouge1", "rouge2", "rougeL", "bleu", "anls")
BLEU_SMOOTHING = 1e-9
ANLS_THRESHOLD = 0.5


def _words(text):
    return tokenize(text or "", METRIC_TOKENIZER)


def exact_match(prediction, reference):
    return 1.0 if (prediction or "").strip().casefold() == (reference or "").strip().casefold() else 0.0


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap, n_pred, n_ref):
    if n_pred == 0 and n_ref == 0:
        return 1.0
    if overlap == 0:
        return 0.0
    precision, recall = overlap / n_pred, overlap / n_ref
    return 2 * precision * recall / (precision + recall)


def rouge_n(prediction, reference, n=1):
    """F1 over clipped n-gram overlap."""
    p, r = _ngrams(_words(prediction), n), _ngrams(_words(reference), n)
    overlap = sum((p & r).values())
    return _f1(overlap, sum(p.values()), sum(r.values()))


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(prediction, reference):
    p, r = _words(prediction), _words(reference)
    return _f1(_lcs_length(p, r), len(p), len(r))


def bleu(prediction, reference, max_n=4):
    """Sentence BLEU with uniform weights up to ``min(max_n, len(prediction))``.

    Zero n-gram matches are smoothed to ``1e-9`` so short answers are not
    zeroed outright by a missing 4-gram.
    """
    p, r = _words(prediction), _words(reference)
    if not p and not r:
        return 1.0
    if not p or not r:
        return 0.0
    orders = min(max_n, len(p))
    log_precision = 0.0
    for n in range(1, orders + 1):
        cand, ref = _ngrams(p, n), _ngrams(r, n)
        total = sum(cand.values())
        matched = sum((cand & ref).values())
        log_precision += math.log(max(matched, BLEU_SMOOTHING) / total)
    brevity = 1.0 if len(p) >= len(r) else math.exp(1.0 - len(r) / len(p))
    return min(1.0, brevity * math.exp(log_precision / orders))


def levenshtein(a, b):
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls(prediction, reference, threshold=ANLS_THRESHOLD):
    """Normalized Levenshtein similarity, zeroed below ``threshold``."""
    a = (prediction or "").strip().casefold()
    b = (reference or "").strip().casefold()
    if not a and not b:
        return 1.0
    s = 1.0 - levenshtein(a, b) / max(len(a), len(b))
    return s if s >= threshold else 0.0


def score(prediction, reference):
    return {
        "exact_match": exact_match(prediction, reference),
        "rouge1": rouge_n(prediction, reference, 1),
        "rouge2": rouge_n(prediction, reference, 2),
        "rougeL": rouge_l(prediction, reference),
        "bleu": bleu(prediction, reference),
        "anls": anls(prediction, reference),
    }


@dataclass
class MetricReport:
    per_query: List[Dict[str, float]] = field(default_factory=list)

    @property
    def means(self):
        if not self.per_query:
            return {name: math.nan for name in METRIC_NAMES}
        return {name: math.fsum(q[name] for q in self.per_query) / len(self.per_query) for name in METRIC_NAMES}

    def to_dict(self):
        return {"per_query": self.per_query, "means": self.means}


def evaluate(predictions: Sequence[str], references: Sequence[str]) -> MetricReport:
    if len(predictions) != len(references):
        raise ValueError("predictions and references differ in length")
    return MetricReport([score(p, r) for p, r in zip(predictions, references)])
