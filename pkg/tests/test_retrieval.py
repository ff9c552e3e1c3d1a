import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpicl.errors import IngestionError, InvalidParameterError, PartitionError
from dpicl.retrieval import (
    FlatIndex,
    RetrievalResult,
    ingest_record,
    normalize_query,
    partition_shards,
    poisson_sample,
    read_corpus,
    top_k,
    write_corpus,
)


def make_index(vectors, ids=None):
    ids = range(len(vectors)) if ids is None else ids
    return FlatIndex([ingest_record(i, f"doc {i}", "x", v) for i, v in zip(ids, vectors)])


def brute_force(index, query, k, active=None):
    # same float scores as the index, ordered by a plain full sort
    scores = index.matrix @ normalize_query(query, index.dimension)
    pairs = [(float(s), rid) for s, rid in zip(scores, index.ids) if active is None or rid in active]
    pairs.sort(key=lambda p: (-p[0], p[1]))
    return [rid for _, rid in pairs[:k]]


class TestIngest:
    def test_normalizes(self):
        r = ingest_record(0, "a", "b", [3, 4])
        np.testing.assert_allclose(r.embedding, [0.6, 0.8])
        assert r.raw_norm == 5.0

    @pytest.mark.parametrize("vec", [[0, 0], [np.nan, 1.0], [np.inf, 1.0], []])
    def test_bad_vectors(self, vec):
        with pytest.raises(IngestionError, match="record 7"):
            ingest_record(7, "a", "b", vec)

    def test_dimension_mismatch(self):
        with pytest.raises(IngestionError):
            ingest_record(1, "a", "b", [1, 2, 3], dimension=2)

    @pytest.mark.parametrize("rid", [-1, 1.5, "3", True])
    def test_bad_id(self, rid):
        with pytest.raises(IngestionError):
            ingest_record(rid, "a", "b", [1, 0])

    def test_empty_content(self):
        with pytest.raises(IngestionError):
            ingest_record(1, "", "b", [1, 0])

    def test_duplicate_ids(self):
        recs = [ingest_record(1, "a", "b", [1, 0]), ingest_record(1, "c", "d", [0, 1])]
        with pytest.raises(IngestionError, match="duplicate"):
            FlatIndex(recs)


class TestTopK:
    @pytest.fixture
    def index(self):
        return make_index([[1, 0], [0, 1], [0.9, 0.43589]], ids=[0, 1, 2])  # a, b, c

    def test_order(self, index):
        res = top_k(index, [1, 0], 2)
        assert res.ids == [0, 2]
        assert res.scores[0] == pytest.approx(1.0)
        assert res.scores[1] == pytest.approx(0.9, abs=1e-5)

    def test_mask(self, index):
        assert top_k(index, [1, 0], 2, active={1, 2}).ids == [2, 1]

    def test_tie_smaller_id(self):
        idx = make_index([[1, 1], [1, 1], [0, 1]], ids=[5, 3, 9])
        assert top_k(idx, [1, 1], 1).ids == [3]

    def test_empty_active(self, index):
        assert len(top_k(index, [1, 0], 2, active=set())) == 0

    def test_fewer_active_than_k(self, index):
        assert top_k(index, [1, 0], 10, active={1}).ids == [1]

    def test_bad_k(self, index):
        with pytest.raises(InvalidParameterError):
            top_k(index, [1, 0], 0)

    def test_unknown_active_id(self, index):
        with pytest.raises(InvalidParameterError):
            top_k(index, [1, 0], 1, active={42})

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n, d = int(rng.integers(1, 80)), int(rng.integers(1, 8))
            # coarse grid values make exact ties common
            vecs = rng.integers(-2, 3, size=(n, d)).astype(float)
            vecs[np.all(vecs == 0, axis=1), 0] = 1.0
            ids = rng.permutation(1000)[:n]
            idx = make_index(vecs, ids)
            q = rng.integers(-2, 3, size=d).astype(float)
            q[0] = q[0] or 1.0
            k = int(rng.integers(1, n + 3))
            active = set(rng.choice(ids, size=int(rng.integers(0, n + 1)), replace=False).tolist())
            assert top_k(idx, q, k, active).ids == brute_force(idx, q, k, active)
            assert top_k(idx, q, k).ids == brute_force(idx, q, k)

    def test_stability_under_substitution(self):
        rng = np.random.default_rng(11)
        for trial in range(300):
            n, d = int(rng.integers(2, 120)), int(rng.integers(1, 16))
            vecs = rng.standard_normal((n, d))
            if trial % 3 == 0:
                vecs = np.round(vecs)  # force ties
                vecs[np.all(vecs == 0, axis=1), 0] = 1.0
            q = rng.standard_normal(d)
            j = int(rng.integers(n))
            sub = vecs.copy()
            sub[j] = rng.standard_normal(d)
            a, b = make_index(vecs), make_index(sub)
            for k in (1, 4, 40):
                ra, rb = set(top_k(a, q, k).ids), set(top_k(b, q, k).ids)
                assert len(ra ^ rb) <= 2

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        idx = make_index(rng.standard_normal((50, 5)))
        q = rng.standard_normal(5)
        assert top_k(idx, q, 7) == top_k(idx, q, 7)


class TestPartition:
    def ranked(self, n):
        return RetrievalResult(tuple((i, 1.0 - i / 100) for i in range(1, n + 1)))

    def test_round_robin(self):
        plan = partition_shards(self.ranked(8), 2, 4)
        assert plan.batches == ((1, 3, 5, 7), (2, 4, 6, 8))

    def test_single_shard(self):
        assert partition_shards(self.ranked(8), 1, 8).batches == (tuple(range(1, 9)),)

    def test_one_shot(self):
        assert partition_shards(self.ranked(8), 8, 1).batches == tuple((i,) for i in range(1, 9))

    def test_mismatch(self):
        with pytest.raises(PartitionError):
            partition_shards(self.ranked(7), 2, 4)

    def test_ragged(self):
        plan = partition_shards(self.ranked(3), 2, 4, ragged=True)
        assert plan.batches == ((1, 3), (2,))
        assert partition_shards(self.ranked(0), 3, 2, ragged=True).batches == ((), (), ())

    @given(st.integers(1, 12), st.integers(0, 6))
    def test_disjoint_cover(self, m, n_shot):
        plan = partition_shards(self.ranked(m * n_shot), m, n_shot)
        ids = plan.all_ids()
        assert sorted(ids) == list(range(1, m * n_shot + 1))
        assert all(len(b) == n_shot for b in plan.batches)


class TestPoisson:
    @pytest.fixture
    def index(self):
        return make_index(np.eye(40))

    def test_gamma_zero(self, index):
        assert poisson_sample(index, 0.0, 4, 10, rng=0).all_ids() == []

    def test_gamma_one_full_cover(self, index):
        plan = poisson_sample(index, 1.0, 4, 10, rng=0)
        assert sorted(plan.all_ids()) == list(range(40))
        assert [len(b) for b in plan.batches] == [10] * 4

    def test_deterministic(self, index):
        assert poisson_sample(index, 0.3, 4, 10, rng=5) == poisson_sample(index, 0.3, 4, 10, rng=5)

    def test_sample_size_statistics(self):
        # Bernoulli(0.5) draws over N=1000: mean size must sit near 500
        index = make_index(np.ones((1000, 1)))
        rng = np.random.default_rng(0)
        sizes = [len(poisson_sample(index, 0.5, 1, 1000, rng=rng).all_ids()) for _ in range(2000)]
        mean = np.mean(sizes)
        # stderr of the mean over 2000 trials is sqrt(250 / 2000)
        assert abs(mean - 500) < 5 * np.sqrt(250 / 2000)
        assert abs(np.var(sizes) - 250) < 40


class TestCorpusFile:
    def test_round_trip(self, tmp_path):
        recs = [ingest_record(i, f"t{i}", "a", [i + 1.0, 1.0], question="q?" if i else None) for i in range(3)]
        path = tmp_path / "c.jsonl"
        write_corpus(path, recs, 2)
        idx = read_corpus(path)
        assert len(idx) == 3 and idx.dimension == 2
        assert idx[1].question == "q?" and idx[0].question is None
        np.testing.assert_allclose(idx.matrix, np.vstack([r.embedding for r in recs]))

    def test_line_number_in_error(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(
            json.dumps({"dimension": 2}) + "\n"
            + json.dumps({"id": 0, "content": "a", "answer": "b", "embedding": [1, 0]}) + "\n"
            + json.dumps({"id": 1, "content": "a", "answer": "b", "embedding": [1, 0, 0]}) + "\n"
        )
        with pytest.raises(IngestionError, match="line 3"):
            read_corpus(path)

    def test_empty(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text("")
        with pytest.raises(IngestionError):
            read_corpus(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps({"id": 0, "content": "a", "answer": "b", "embedding": [1, 0]}) + "\n")
        with pytest.raises(IngestionError, match="header"):
            read_corpus(path)
