import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpicl.metrics import (
    METRIC_NAMES,
    anls,
    bleu,
    evaluate,
    exact_match,
    levenshtein,
    rouge_l,
    rouge_n,
    score,
)


def levenshtein_oracle(a, b):
    # full (len(a)+1) x (len(b)+1) table
    d = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    d[:, 0] = np.arange(len(a) + 1)
    d[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(d[-1, -1])


class TestExactMatch:
    @pytest.mark.parametrize("p,r,v", [("Paris", "paris", 1.0), ("Paris", "Paris, France", 0.0), ("", "", 1.0)])
    def test_examples(self, p, r, v):
        assert exact_match(p, r) == v

    def test_whitespace(self):
        assert exact_match("  paris\n", "PARIS") == 1.0


class TestRouge:
    def test_rouge1(self):
        assert rouge_n("the cat sat", "the cat", 1) == pytest.approx(0.8)

    def test_rouge2_identical(self):
        assert rouge_n("a b c", "a b c", 2) == 1.0

    def test_rouge_l(self):
        assert rouge_l("a b c d", "a x c d") == pytest.approx(0.75)

    def test_empty_conventions(self):
        assert rouge_n("", "", 1) == 1.0
        assert rouge_n("", "x", 1) == 0.0
        assert rouge_l("x", "") == 0.0

    def test_clipping(self):
        # only one "the" in the reference can match
        assert rouge_n("the the", "the cat", 1) == pytest.approx(0.5)


class TestBleu:
    def test_identical(self):
        assert bleu("the quick brown fox", "the quick brown fox") == pytest.approx(1.0)

    def test_brevity_penalty(self):
        value = bleu("the quick", "the quick brown fox")
        assert value == pytest.approx(math.exp(1 - 4 / 2))
        assert value < 1.0

    def test_clipped_repetition(self):
        assert bleu("the the the", "the cat") < 0.34

    def test_single_token(self):
        assert bleu("paris", "paris") == pytest.approx(1.0)


class TestAnls:
    def test_examples(self):
        assert anls("paris", "paris") == 1.0
        assert anls("paris", "pariss") == pytest.approx(5 / 6)
        assert anls("abcd", "wxyz") == 0.0

    def test_case_folded(self):
        assert anls("PARIS", "paris") == 1.0

    def test_threshold(self):
        assert anls("abcd", "abxy") == 0.5
        assert anls("abcd", "axyz") == 0.0


class TestLevenshtein:
    def test_against_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a = "".join(rng.choice(list("abc"), size=int(rng.integers(0, 12))))
            b = "".join(rng.choice(list("abc"), size=int(rng.integers(0, 12))))
            assert levenshtein(a, b) == levenshtein_oracle(a, b)

    def test_known(self):
        assert levenshtein("kitten", "sitting") == 3


texts = st.text(alphabet="ab cD.", max_size=15)


@given(texts, texts)
def test_range_and_symmetry(p, r):
    s = score(p, r)
    assert set(s) == set(METRIC_NAMES)
    assert all(0.0 <= v <= 1.0 for v in s.values())
    assert anls(p, r) == anls(r, p)


@given(st.text(alphabet="abc d", min_size=1, max_size=15).filter(lambda t: any(c.isalpha() for c in t)))
def test_identical_scores_one(text):
    assert all(v == pytest.approx(1.0) for v in score(text, text).values())


def test_report_means():
    report = evaluate(["paris", "lyon"], ["paris", "nice"])
    assert report.means["exact_match"] == 0.5
    assert report.to_dict()["per_query"][0]["anls"] == 1.0
    with pytest.raises(ValueError):
        evaluate(["a"], [])
