"""Exact inner-product retrieval over unit-normalized demonstration embeddings.

Ranking is by descending inner product with ties broken by smaller record id,
so the ranked order is a strict total order on records. Changing one record's
embedding therefore moves at most that record in or out of any top-k set,
which is what bounds the sensitivity of everything built on top of it.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from dpicl.errors import IngestionError, InvalidParameterError, PartitionError
from dpicl.privacy_core import SamplingConfig

DEFAULT_DIMENSION = 384


@dataclass(frozen=True)
class DemoRecord:
    id: int
    content: str
    answer: str
    embedding: np.ndarray = field(repr=False)
    question: Optional[str] = None
    raw_norm: float = field(default=1.0, repr=False, compare=False)


def ingest_record(record_id, content, answer, embedding, question=None, dimension=None):
    """Validate one raw record and rescale its embedding to unit norm."""
    if isinstance(record_id, bool) or not isinstance(record_id, (int, np.integer)) or record_id < 0:
        raise IngestionError(f"id must be a non-negative integer, got {record_id!r}", record_id)
    if not isinstance(content, str) or not content:
        raise IngestionError("content must be a non-empty string", record_id)
    if not isinstance(answer, str):
        raise IngestionError("answer must be a string", record_id)
    if question is not None and not isinstance(question, str):
        raise IngestionError("question must be a string when present", record_id)
    try:
        vec = np.asarray(embedding, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise IngestionError(f"embedding is not numeric: {exc}", record_id) from None
    if vec.ndim != 1 or vec.size == 0:
        raise IngestionError("embedding must be a non-empty 1-d sequence", record_id)
    if dimension is not None and vec.size != dimension:
        raise IngestionError(f"embedding dimension {vec.size} != corpus dimension {dimension}", record_id)
    if not np.all(np.isfinite(vec)):
        raise IngestionError("embedding contains NaN or infinite entries", record_id)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise IngestionError("embedding is the zero vector", record_id)
    vec = vec / norm
    vec.setflags(write=False)
    return DemoRecord(int(record_id), content, answer, vec, question, norm)


def normalize_query(embedding, dimension):
    vec = np.asarray(embedding, dtype=np.float64)
    if vec.shape != (dimension,):
        raise InvalidParameterError(f"query dimension {vec.shape} != index dimension {dimension}")
    if not np.all(np.isfinite(vec)):
        raise InvalidParameterError("query embedding has non-finite entries")
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise InvalidParameterError("query embedding is the zero vector")
    return vec / norm


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked ``(record id, similarity)`` pairs, best first."""

    ranked: Tuple[Tuple[int, float], ...]

    @property
    def ids(self):
        return [rid for rid, _ in self.ranked]

    @property
    def scores(self):
        return [s for _, s in self.ranked]

    def __len__(self):
        return len(self.ranked)


@dataclass(frozen=True)
class ShardPlan:
    batches: Tuple[Tuple[int, ...], ...]

    @property
    def num_shards(self):
        return len(self.batches)

    def all_ids(self):
        return [rid for batch in self.batches for rid in batch]


class FlatIndex:
    """Immutable exhaustive-search index.

    Records are stored sorted by id, so the row position doubles as the
    tie-break key.
    """

    def __init__(self, records: Iterable[DemoRecord], dimension: Optional[int] = None):
        records = sorted(records, key=lambda r: r.id)
        if dimension is None:
            if not records:
                raise InvalidParameterError("dimension is required for an empty index")
            dimension = records[0].embedding.size
        seen = set()
        for r in records:
            if r.id in seen:
                raise IngestionError("duplicate id", r.id)
            seen.add(r.id)
            if r.embedding.size != dimension:
                raise IngestionError(f"embedding dimension {r.embedding.size} != {dimension}", r.id)
        self.dimension = int(dimension)
        self.records: Tuple[DemoRecord, ...] = tuple(records)
        self.ids = np.array([r.id for r in records], dtype=np.int64)
        self.ids.setflags(write=False)
        if records:
            self.matrix = np.vstack([r.embedding for r in records])
        else:
            self.matrix = np.zeros((0, self.dimension))
        self.matrix.setflags(write=False)
        self._row = {r.id: i for i, r in enumerate(records)}

    def __len__(self):
        return len(self.records)

    def __getitem__(self, record_id):
        return self.records[self._row[record_id]]

    def __contains__(self, record_id):
        return record_id in self._row

    def rows(self, ids):
        return np.array([self._row[i] for i in ids], dtype=np.int64)

    def active_mask(self, active=None):
        """Boolean row mask from ``None`` (all), a boolean array, or a collection of ids."""
        if active is None:
            return np.ones(len(self), dtype=bool)
        if isinstance(active, np.ndarray) and active.dtype == bool:
            if active.shape != (len(self),):
                raise InvalidParameterError("boolean active mask has the wrong length")
            return active
        mask = np.zeros(len(self), dtype=bool)
        for rid in active:
            try:
                mask[self._row[int(rid)]] = True
            except KeyError:
                raise InvalidParameterError(f"active id {rid} is not in the index") from None
        return mask


def top_k(index: FlatIndex, query, k: int, active=None) -> RetrievalResult:
    """The ``min(k, |active|)`` active records with the largest inner product."""
    if k < 1:
        raise InvalidParameterError(f"k must be >= 1, got {k}")
    q = normalize_query(query, index.dimension)
    mask = index.active_mask(active)
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        return RetrievalResult(())
    scores = index.matrix[rows] @ q
    take = min(k, rows.size)
    if take < rows.size:
        # keep every row tied with the k-th score so the id tie-break is exact
        kth = np.partition(scores, rows.size - take)[rows.size - take]
        keep = scores >= kth
        rows, scores = rows[keep], scores[keep]
    order = np.lexsort((index.ids[rows], -scores))[:take]
    return RetrievalResult(tuple((int(index.ids[rows[i]]), float(scores[i])) for i in order))


def partition_shards(result: RetrievalResult, num_shards: int, n_shot: int, ragged: bool = False) -> ShardPlan:
    """Round-robin split by rank: shard j gets ranks j, j+M, j+2M, ...

    With ``ragged=True`` a short result is allowed and trailing shards simply
    receive fewer (possibly zero) demonstrations.
    """
    if num_shards < 1 or n_shot < 0:
        raise PartitionError(f"invalid layout num_shards={num_shards}, n_shot={n_shot}")
    expected = num_shards * n_shot
    if len(result) > expected or (not ragged and len(result) != expected):
        raise PartitionError(f"got {len(result)} retrieved records for {num_shards} x {n_shot} shards")
    ids = result.ids
    return ShardPlan(tuple(tuple(ids[j::num_shards]) for j in range(num_shards)))


def poisson_sample(index: FlatIndex, gamma, num_shards: int, n_shot: int, rng=None) -> ShardPlan:
    """Poisson-subsample the corpus and deal the sample into shards at random.

    Each record is kept independently with probability ``gamma``. The sample is
    shuffled and truncated to ``num_shards * n_shot``; shards are filled
    round-robin, so a small sample gives ragged (possibly empty) shards.
    """
    if not isinstance(gamma, SamplingConfig):
        gamma = SamplingConfig(float(gamma))
    if num_shards < 1 or n_shot < 0:
        raise InvalidParameterError(f"invalid layout num_shards={num_shards}, n_shot={n_shot}")
    rng = np.random.default_rng(rng)
    keep = rng.random(len(index)) < gamma.gamma
    sampled = index.ids[keep]
    sampled = rng.permutation(sampled)[: num_shards * n_shot]
    return ShardPlan(tuple(tuple(int(i) for i in sampled[j::num_shards]) for j in range(num_shards)))


def read_corpus(path) -> FlatIndex:
    """Load a JSON-lines corpus whose first line is ``{"dimension": d}``."""
    records = []
    dimension = None
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if dimension is None:
                if set(obj) != {"dimension"} or not isinstance(obj["dimension"], int) or obj["dimension"] < 1:
                    raise IngestionError('first line must be a {"dimension": d} header', line=lineno)
                dimension = obj["dimension"]
                continue
            rid = obj.get("id")
            try:
                if rid in seen:
                    raise IngestionError("duplicate id", rid)
                extra = set(obj) - {"id", "content", "question", "answer", "embedding"}
                if extra:
                    raise IngestionError(f"unknown keys {sorted(extra)}", rid)
                rec = ingest_record(
                    rid,
                    obj.get("content"),
                    obj.get("answer"),
                    obj.get("embedding"),
                    question=obj.get("question"),
                    dimension=dimension,
                )
            except IngestionError as exc:
                raise IngestionError(str(exc), line=lineno) from None
            seen.add(rec.id)
            records.append(rec)
    if dimension is None:
        raise IngestionError("corpus file is empty")
    return FlatIndex(records, dimension)


def write_corpus(path, records: Sequence[DemoRecord], dimension: int):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"dimension": dimension}) + "\n")
        for r in records:
            obj = {"id": r.id, "content": r.content, "answer": r.answer, "embedding": [float(x) for x in r.embedding]}
            if r.question is not None:
                obj["question"] = r.question
            fh.write(json.dumps(obj) + "\n")


def norm_summary(index: FlatIndex):
    """Record count, dimension and statistics of the embeddings' norms before normalization."""
    norms = np.array([r.raw_norm for r in index.records])
    return {
        "records": len(index),
        "dimension": index.dimension,
        "norm_min": float(norms.min()) if norms.size else math.nan,
        "norm_max": float(norms.max()) if norms.size else math.nan,
        "norm_mean": float(norms.mean()) if norms.size else math.nan,
    }
