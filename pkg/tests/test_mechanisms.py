import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpicl.errors import InvalidParameterError
from dpicl.mechanisms import (
    KSA_TOKENIZER,
    METRIC_TOKENIZER,
    TokenHistogram,
    build_token_histogram,
    build_vote_histogram,
    count_gaps,
    find_best_k,
    gaussian_quantile,
    ptr_gap_test,
    rnm_gaussian,
    tokenize,
    top_k_with_ptr,
)

N_DRAWS = 100_000


def phi(x):
    # independent oracle for the standard normal CDF
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


class TestRnm:
    def test_noiseless(self):
        assert rnm_gaussian([5, 3], 0.0, rng=0) == 0
        assert rnm_gaussian([3, 5, 5], 0.0, rng=0) == 1  # smaller index on ties

    def test_two_class_closed_form(self):
        draws = rnm_gaussian([5, 3], 2.0, rng=123, size=N_DRAWS)
        p = phi(2 / (2 * math.sqrt(2)))
        assert p == pytest.approx(0.7602, abs=1e-4)
        assert abs(np.mean(draws == 0) - p) <= 0.006

    def test_symmetry(self):
        draws = rnm_gaussian([4, 4, 4], 1.5, rng=7, size=N_DRAWS)
        freq = np.bincount(draws, minlength=3) / N_DRAWS
        assert np.all(np.abs(freq - 1 / 3) < 5 * math.sqrt((1 / 3) * (2 / 3) / N_DRAWS))

    def test_random_instances(self):
        rng = np.random.default_rng(99)
        for i in range(20):
            counts = rng.integers(0, 10, size=2)
            sigma = float(rng.uniform(0.3, 6.0))
            p = phi((counts[0] - counts[1]) / (sigma * math.sqrt(2)))
            freq = np.mean(rnm_gaussian(counts, sigma, rng=i, size=N_DRAWS) == 0)
            assert abs(freq - p) <= 5 * math.sqrt(p * (1 - p) / N_DRAWS) + 1e-12

    def test_seeded(self):
        assert rnm_gaussian([1, 2, 3], 5.0, rng=4) == rnm_gaussian([1, 2, 3], 5.0, rng=4)

    def test_errors(self):
        with pytest.raises(InvalidParameterError):
            rnm_gaussian([], 1.0)
        with pytest.raises(InvalidParameterError):
            rnm_gaussian([1, 2], -1.0)


class TestHistograms:
    def test_votes(self):
        h = build_vote_histogram(["A", "A", "B"], ["A", "B", "C"])
        assert h.as_dict() == {"A": 2, "B": 1, "C": 0}
        assert h.counts.sum() == 3

    def test_votes_empty(self):
        assert build_vote_histogram([], ["A", "B"]).as_dict() == {"A": 0, "B": 0}

    def test_votes_drop_invalid(self):
        h = build_vote_histogram(["A", "zebra", None], ["A", "B"])
        assert h.as_dict() == {"A": 1, "B": 0}
        assert h.dropped == 2

    def test_tokens_set_semantics(self):
        assert build_token_histogram(["paris france", "paris"]).counts == {"paris": 2, "france": 1}
        assert build_token_histogram(["go go go"]).counts == {"go": 1}

    def test_tokenizer_rules(self):
        resp = ["The Answer!", "the answer"]
        assert build_token_histogram(resp, METRIC_TOKENIZER).counts == {"the": 2, "answer": 2}
        assert build_token_histogram(resp, KSA_TOKENIZER).counts == {"answer": 2}

    def test_tokenize_punctuation(self):
        assert tokenize("--Hello, world!! 42_x", METRIC_TOKENIZER) == ["hello", "world", "42", "x"]
        assert tokenize("...", METRIC_TOKENIZER) == []
        assert tokenize("Café Über", METRIC_TOKENIZER) == ["café", "über"]

    def test_empty_responses(self):
        h = build_token_histogram(["", "paris"])
        assert h.counts == {"paris": 1} and h.num_responses == 2

    @given(st.lists(st.text(alphabet="ab c.", max_size=12), max_size=8))
    def test_counts_bounded_by_responses(self, responses):
        h = build_token_histogram(responses)
        assert all(0 < c <= h.num_responses for c in h.counts.values())

    def test_ranked_tie_order(self):
        h = TokenHistogram({"b": 2, "a": 2, "c": 3}, 3)
        assert h.top_tokens(3) == ["c", "a", "b"]

    def test_gaps(self):
        h = TokenHistogram({"x": 5, "y": 3, "z": 3}, 5)
        assert count_gaps(h, [1, 2, 3, 4]).tolist() == [2.0, 0.0, 3.0, 0.0]

    def test_sensitivity_exhaustive(self):
        vocab = ["alpha", "beta", "gamma", "delta"]
        subsets = [" ".join(s) for r in range(len(vocab) + 1) for s in itertools.combinations(vocab, r)]
        rng = np.random.default_rng(5)
        ks = np.arange(1, 7)
        for _ in range(40):
            base = [subsets[i] for i in rng.integers(0, len(subsets), size=int(rng.integers(1, 6)))]
            h0 = build_token_histogram(base)
            g0 = count_gaps(h0, ks) if h0.counts else np.zeros(ks.size)
            for j in range(len(base)):
                for repl in subsets:
                    changed = base[:j] + [repl] + base[j + 1:]
                    h1 = build_token_histogram(changed)
                    for tok in vocab:
                        assert abs(h0.counts.get(tok, 0) - h1.counts.get(tok, 0)) <= 1
                    g1 = count_gaps(h1, ks) if h1.counts else np.zeros(ks.size)
                    assert np.max(np.abs(g0 - g1)) <= 2


class TestFindBestK:
    def test_noiseless_limit(self):
        h = TokenHistogram({"a": 9, "b": 5, "c": 5, "d": 1}, 9)  # gaps 4, 0, 4, 1
        assert find_best_k(h, math.inf, 1, 4) == 1
        assert find_best_k(h, math.inf, 2, 4) == 3

    def test_two_candidate_softmax(self):
        h = TokenHistogram({"a": 16, "b": 6}, 16)  # d_1 = 10, d_2 = 6
        draws = find_best_k(h, 1.0, 1, 2, rng=3, size=N_DRAWS)
        p = math.exp(2.5) / (math.exp(2.5) + math.exp(1.5))
        assert p == pytest.approx(0.7311, abs=1e-4)
        assert abs(np.mean(draws == 1) - p) <= 0.006

    def test_equal_gaps_uniform(self):
        h = TokenHistogram({}, 0)
        draws = find_best_k(h, 1.0, 3, 6, rng=4, size=N_DRAWS)
        freq = np.bincount(draws - 3, minlength=4) / N_DRAWS
        assert np.all(np.abs(freq - 0.25) < 5 * math.sqrt(0.25 * 0.75 / N_DRAWS))

    def test_total_variation_against_softmax(self):
        rng = np.random.default_rng(8)
        for trial in range(5):
            counts = {f"t{i}": int(c) for i, c in enumerate(rng.integers(1, 40, size=35))}
            h = TokenHistogram(counts, 40)
            eps = float(rng.uniform(0.5, 3.0))
            ks = np.arange(15, 31)
            logits = eps * count_gaps(h, ks) / 4
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            draws = find_best_k(h, eps, 15, 30, rng=trial, size=N_DRAWS)
            freq = np.bincount(draws - 15, minlength=ks.size) / N_DRAWS
            assert 0.5 * np.abs(freq - probs).sum() <= 0.02

    def test_in_range_and_seeded(self):
        h = TokenHistogram({"a": 3}, 3)
        k = find_best_k(h, 1.0, rng=11)
        assert 15 <= k <= 30
        assert k == find_best_k(h, 1.0, rng=11)

    @pytest.mark.parametrize("args", [(0.0, 1, 2), (1.0, 0, 2), (1.0, 5, 4)])
    def test_errors(self, args):
        with pytest.raises(InvalidParameterError):
            find_best_k(TokenHistogram({"a": 1}, 1), *args)


class TestPtr:
    def test_large_gap_releases(self):
        h = TokenHistogram({"eiffel": 1000, "tower": 1000}, 1000)
        rel = top_k_with_ptr(h, 2, 1.0, 0.05, rng=0)
        assert rel.released and rel.tokens == ("eiffel", "tower")
        assert rel.gap == 1000

    @pytest.mark.parametrize("gap,delta_i", [(0.0, 0.05), (1.0, 0.01), (2.0, 0.2)])
    def test_false_release_rate(self, gap, delta_i):
        passed, _ = ptr_gap_test(gap, 1.7, delta_i, rng=21, size=N_DRAWS)
        se = math.sqrt(delta_i * (1 - delta_i) / N_DRAWS)
        assert abs(passed.mean() - delta_i) <= 3 * se

    def test_exactness(self):
        rng = np.random.default_rng(6)
        releases = 0
        for i in range(300):
            counts = {f"w{j}": int(c) for j, c in enumerate(rng.integers(1, 10, size=12))}
            h = TokenHistogram(counts, 10)
            k = int(rng.integers(1, 12))
            rel = top_k_with_ptr(h, k, 0.5, 0.3, rng=i)
            if rel.released:
                releases += 1
                plain = sorted(counts, key=lambda t: (-counts[t], t))[:k]
                assert list(rel.tokens) == plain
            else:
                assert rel.tokens is None
        assert releases > 0

    def test_errors(self):
        h = TokenHistogram({"a": 1}, 1)
        with pytest.raises(InvalidParameterError):
            top_k_with_ptr(h, 0, 1.0, 0.1)
        with pytest.raises(InvalidParameterError):
            ptr_gap_test(3.0, 0.0, 0.1)
        with pytest.raises(InvalidParameterError):
            ptr_gap_test(3.0, 1.0, 0.0)


class TestQuantile:
    def test_median(self):
        assert gaussian_quantile(0.5, 3.0, 2.0) == 3.0

    def test_reference(self):
        assert gaussian_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)

    def test_affine(self):
        assert gaussian_quantile(0.975, 1.0, 2.0) == pytest.approx(1.0 + 2 * 1.959963985, abs=1e-8)

    def test_round_trip(self):
        for p in np.concatenate([np.logspace(-12, -1, 23), np.linspace(0.05, 0.95, 91), 1 - np.logspace(-9, -1, 17)]):
            assert abs(phi(gaussian_quantile(float(p))) - p) <= 1e-9

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.2, math.nan])
    def test_domain(self, p):
        with pytest.raises(InvalidParameterError):
            gaussian_quantile(p)
