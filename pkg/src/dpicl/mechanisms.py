"""Private aggregation of per-shard model outputs.

Classification votes go through Gaussian report-noisy-max. Free-text answers
are reduced to a token histogram (each response contributes a token at most
once), a gap index ``k`` is chosen with the exponential mechanism, and the
exact top-k tokens are released only if a noisy test says the gap
``H(k) - H(k+1)`` is safely above 2.

All samplers take ``rng`` as anything :func:`numpy.random.default_rng`
accepts, so a seed gives a reproducible draw and a shared ``Generator`` can be
threaded through many calls.
"""

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtri

from dpicl.errors import InvalidParameterError

DEFAULT_K_MIN = 15
DEFAULT_K_MAX = 30
# Exceeding this gap is what makes the top-k identical on all neighbors.
PTR_GAP_THRESHOLD = 2.0

ENGLISH_STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because been before being below
    between both but by can could did do does doing down during each few for from further had has have
    having he her here hers herself him himself his how i if in into is it its itself just me more most
    my myself no nor not now of off on once only or other our ours ourselves out over own same she should
    so some such than that the their theirs them themselves then there these they this those through to
    too under until up very was we were what when where which while who whom why will with would you
    your yours yourself yourselves
    """.split()
)

_TOKEN_RE = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class TokenizerConfig:
    lowercase: bool = True
    remove_stopwords: bool = True
    stopwords: frozenset = ENGLISH_STOPWORDS


KSA_TOKENIZER = TokenizerConfig(remove_stopwords=True)
METRIC_TOKENIZER = TokenizerConfig(remove_stopwords=False)


def tokenize(text, config=KSA_TOKENIZER):
    """Split on runs of non-alphanumeric characters, dropping punctuation."""
    if config.lowercase:
        text = text.lower()
    tokens = _TOKEN_RE.findall(text)
    if config.remove_stopwords:
        tokens = [t for t in tokens if t not in config.stopwords]
    return tokens


@dataclass(frozen=True)
class VoteHistogram:
    labels: Tuple[str, ...]
    counts: np.ndarray
    dropped: int = 0

    def as_dict(self):
        return {label: int(c) for label, c in zip(self.labels, self.counts)}


def build_vote_histogram(shard_labels: Iterable[Optional[str]], classes: Sequence[str]) -> VoteHistogram:
    """Count votes per class; labels outside ``classes`` (or None) are dropped."""
    classes = tuple(classes)
    if not classes:
        raise InvalidParameterError("class set must not be empty")
    position = {c: i for i, c in enumerate(classes)}
    counts = np.zeros(len(classes), dtype=np.int64)
    dropped = 0
    for label in shard_labels:
        i = position.get(label)
        if i is None:
            dropped += 1
        else:
            counts[i] += 1
    return VoteHistogram(classes, counts, dropped)


def rnm_gaussian(hist, sigma, rng=None, size=None):
    """Report-noisy-max: index of the largest count after N(0, sigma^2) noise per bin.

    ``hist`` may be a :class:`VoteHistogram` or a plain count vector. With
    ``size`` set, that many independent releases are returned as an array.
    """
    counts = np.asarray(hist.counts if isinstance(hist, VoteHistogram) else hist, dtype=float)
    if counts.ndim != 1 or counts.size == 0:
        raise InvalidParameterError("histogram must have at least one class")
    if not sigma >= 0.0:
        raise InvalidParameterError(f"sigma must be >= 0, got {sigma}")
    rng = np.random.default_rng(rng)
    shape = counts.shape if size is None else (size, counts.size)
    noisy = counts + sigma * rng.standard_normal(shape)
    return int(np.argmax(noisy)) if size is None else np.argmax(noisy, axis=1)


@dataclass(frozen=True)
class TokenHistogram:
    counts: Dict[str, int]
    num_responses: int

    def ranked(self):
        """Tokens sorted by descending count, then lexicographically."""
        return sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))

    def sorted_counts(self):
        return np.array(sorted(self.counts.values(), reverse=True), dtype=np.int64)

    def top_tokens(self, k):
        return [tok for tok, _ in self.ranked()[:k]]


def build_token_histogram(responses: Iterable[str], tokenizer: TokenizerConfig = KSA_TOKENIZER) -> TokenHistogram:
    counts = Counter()
    n = 0
    for text in responses:
        n += 1
        counts.update(set(tokenize(text or "", tokenizer)))
    return TokenHistogram(dict(counts), n)


def count_gaps(hist, ks):
    """``H(k) - H(k+1)`` for each k, with ``H(j) = 0`` past the vocabulary."""
    sorted_counts = hist.sorted_counts() if isinstance(hist, TokenHistogram) else np.sort(np.asarray(hist))[::-1]
    ks = np.asarray(ks, dtype=np.int64)
    padded = np.concatenate([sorted_counts, np.zeros(int(ks.max()) + 1, dtype=sorted_counts.dtype)])
    return (padded[ks - 1] - padded[ks]).astype(float)


def find_best_k(hist, epsilon_em, k_min=DEFAULT_K_MIN, k_max=DEFAULT_K_MAX, rng=None, size=None):
    """Exponential-mechanism choice of the gap index via Gumbel-max.

    Returns the k in ``[k_min, k_max]`` maximizing ``d_k + Gumbel(4/epsilon_em)``,
    i.e. a draw with probability proportional to ``exp(epsilon_em * d_k / 4)``.
    ``epsilon_em=inf`` gives the noiseless argmax (smallest k on ties).
    """
    if not epsilon_em > 0.0:
        raise InvalidParameterError(f"epsilon_em must be > 0, got {epsilon_em}")
    if not 1 <= k_min <= k_max:
        raise InvalidParameterError(f"need 1 <= k_min <= k_max, got {k_min}, {k_max}")
    ks = np.arange(k_min, k_max + 1)
    gaps = count_gaps(hist, ks)
    if math.isinf(epsilon_em):
        best = int(ks[np.argmax(gaps)])
        return best if size is None else np.full(size, best, dtype=np.int64)
    rng = np.random.default_rng(rng)
    scale = 4.0 / epsilon_em
    shape = gaps.shape if size is None else (size, gaps.size)
    noisy = gaps + rng.gumbel(0.0, scale, size=shape)
    return int(ks[np.argmax(noisy)]) if size is None else ks[np.argmax(noisy, axis=1)]


def gaussian_quantile(p, mean=0.0, std=1.0):
    """Inverse normal CDF."""
    if not 0.0 < p < 1.0:
        raise InvalidParameterError(f"p must lie in (0, 1), got {p}")
    if not std > 0.0:
        raise InvalidParameterError(f"std must be > 0, got {std}")
    return mean + std * float(ndtri(p))


@dataclass(frozen=True)
class KeywordRelease:
    """Outcome of the PTR test: released tokens, or ``None`` for fallback."""

    tokens: Optional[Tuple[str, ...]]
    k: int
    gap: float
    noisy_gap: float

    @property
    def released(self):
        return self.tokens is not None


def ptr_gap_test(gap, sigma, delta_i, rng=None, size=None):
    """Noisy test ``max(2, gap) + N(0, (2 sigma)^2) - Phi^{-1}(1 - delta_i; 0, 2 sigma) > 2``.

    Returns ``(passed, noisy_gap)``; arrays when ``size`` is given.
    """
    if not sigma > 0.0:
        raise InvalidParameterError(f"sigma must be > 0, got {sigma}")
    if not 0.0 < delta_i < 1.0:
        raise InvalidParameterError(f"delta_i must lie in (0, 1), got {delta_i}")
    rng = np.random.default_rng(rng)
    noise_std = 2.0 * sigma
    shift = gaussian_quantile(1.0 - delta_i, 0.0, noise_std)
    noisy = max(PTR_GAP_THRESHOLD, float(gap)) + noise_std * rng.standard_normal(size) - shift
    passed = noisy > PTR_GAP_THRESHOLD
    if size is None:
        return bool(passed), float(noisy)
    return passed, noisy


def top_k_with_ptr(hist: TokenHistogram, k, sigma, delta_i, rng=None) -> KeywordRelease:
    """Release the exact top-k tokens if the noisy gap test passes."""
    if k < 1:
        raise InvalidParameterError(f"k must be >= 1, got {k}")
    gap = float(count_gaps(hist, [k])[0])
    passed, noisy = ptr_gap_test(gap, sigma, delta_i, rng)
    tokens = tuple(hist.top_tokens(k)) if passed else None
    return KeywordRelease(tokens, int(k), gap, noisy)
