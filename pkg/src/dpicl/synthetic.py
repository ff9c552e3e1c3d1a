"""Synthetic clustered corpora for offline runs.

Each class is a random direction on the unit sphere; records and queries are
that direction plus isotropic noise, renormalized.
"""

import numpy as np

from dpicl.pipeline import Query
from dpicl.retrieval import DEFAULT_DIMENSION, FlatIndex, ingest_record

CITY_ANSWERS = ("eiffel tower", "big ben", "colosseum rome", "brandenburg gate")


def _cluster_points(rng, centers, labels, spread):
    pts = centers[labels] + spread * rng.standard_normal((labels.size, centers.shape[1])) / np.sqrt(centers.shape[1])
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def make_clustered_task(
    n_records=2000,
    n_queries=100,
    n_classes=4,
    dimension=DEFAULT_DIMENSION,
    class_weights=None,
    spread=0.5,
    seed=0,
    qa=False,
):
    """Build ``(index, queries, classes)`` for a clustered task.

    With ``qa=True`` each record gets a question and a class-specific answer
    phrase from :data:`CITY_ANSWERS` (cycled), and queries carry the matching
    ground-truth answer.
    """
    rng = np.random.default_rng(seed)
    classes = tuple(f"class{c}" for c in range(n_classes))
    weights = np.full(n_classes, 1.0 / n_classes) if class_weights is None else np.asarray(class_weights, float)
    weights = weights / weights.sum()
    centers = rng.standard_normal((n_classes, dimension))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    rec_labels = rng.choice(n_classes, size=n_records, p=weights)
    q_labels = rng.choice(n_classes, size=n_queries, p=weights)
    rec_vecs = _cluster_points(rng, centers, rec_labels, spread)
    q_vecs = _cluster_points(rng, centers, q_labels, spread)

    def answer(c):
        return CITY_ANSWERS[c % len(CITY_ANSWERS)] if qa else classes[c]

    records = [
        ingest_record(
            i,
            f"synthetic document {i} about topic {c}",
            answer(c),
            v,
            question="Which landmark is described?" if qa else None,
        )
        for i, (c, v) in enumerate(zip(rec_labels.tolist(), rec_vecs))
    ]
    queries = [
        Query(
            f"q{j}",
            f"synthetic query {j} about topic {c}",
            v,
            question="Which landmark is described?" if qa else None,
            answer=answer(c),
        )
        for j, (c, v) in enumerate(zip(q_labels.tolist(), q_vecs))
    ]
    return FlatIndex(records, dimension), queries, classes
