"""Retrieval metrics (mAP, CMC), self/cross tests and the two compatibility
criteria: the strict pairwise one and the anchor/positive/negative triplet one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EmptySetError, ParameterError, ProtocolError, UndefinedQueryError
from .model import EncoderParams, encode
from .numeric import as_vec, zero_pad

CMC_KS = (1, 5, 10)


@dataclass
class RetrievalTask:
    query_ids: np.ndarray
    query_labels: np.ndarray
    query_emb: np.ndarray
    gallery_ids: np.ndarray
    gallery_labels: np.ndarray
    gallery_emb: np.ndarray
    distance: str = "cosine"

    def __post_init__(self):
        self.query_ids = np.asarray(self.query_ids, dtype=np.int64)
        self.gallery_ids = np.asarray(self.gallery_ids, dtype=np.int64)
        self.query_labels = np.asarray(self.query_labels, dtype=np.int64)
        self.gallery_labels = np.asarray(self.gallery_labels, dtype=np.int64)
        self.query_emb = np.atleast_2d(as_vec(self.query_emb))
        self.gallery_emb = np.atleast_2d(as_vec(self.gallery_emb))


@dataclass
class RetrievalMetrics:
    mAP: float
    cmc: dict

    def to_dict(self) -> dict:
        return {"mAP": self.mAP, "cmc": {str(k): v for k, v in self.cmc.items()}}


@dataclass
class CriterionReport:
    eq3_rate: float | None
    eq12_rate: float | None
    triplet_count: int
    pair_count: int
    sampled: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def align_dims(old_emb, dim: int) -> np.ndarray:
    """Zero-pad old embeddings (vector or rows) up to ``dim`` entries."""
    return zero_pad(old_emb, dim)


def distance_matrix(A, B, distance: str = "cosine") -> np.ndarray:
    A, B = np.atleast_2d(as_vec(A)), np.atleast_2d(as_vec(B))
    if A.shape[1] != B.shape[1]:
        raise DimensionError(f"dimension mismatch {A.shape[1]} vs {B.shape[1]}; align first")
    if distance == "cosine":
        An = A / np.linalg.norm(A, axis=1, keepdims=True)
        Bn = B / np.linalg.norm(B, axis=1, keepdims=True)
        return 1.0 - An @ Bn.T
    if distance == "euclidean":
        sq = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2 * A @ B.T
        return np.sqrt(np.maximum(sq, 0.0))
    raise ParameterError(f"unknown distance {distance!r}")


def average_precision(ranked_labels, query_label) -> float:
    hits = np.asarray(ranked_labels) == query_label
    n_pos = int(hits.sum())
    if n_pos == 0:
        raise UndefinedQueryError("query has no positive in the gallery")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def evaluate(task: RetrievalTask, ks=CMC_KS) -> RetrievalMetrics:
    if len(task.query_ids) == 0:
        raise EmptySetError("no queries")
    if set(task.query_ids.tolist()) & set(task.gallery_ids.tolist()):
        raise ProtocolError("query and gallery ids overlap")
    dist = distance_matrix(task.query_emb, task.gallery_emb, task.distance)
    aps = np.empty(len(task.query_ids))
    hit_at = {k: 0 for k in ks}
    for q in range(len(task.query_ids)):
        order = np.lexsort((task.gallery_ids, dist[q]))
        ranked = task.gallery_labels[order]
        aps[q] = average_precision(ranked, task.query_labels[q])
        first = int(np.argmax(ranked == task.query_labels[q]))
        for k in ks:
            if first < k:
                hit_at[k] += 1
    n = len(task.query_ids)
    return RetrievalMetrics(float(aps.mean()), {k: hit_at[k] / n for k in ks})


def _embed(encoder: EncoderParams, samples) -> np.ndarray:
    return encode(encoder, np.stack([s.x for s in samples]))


def make_task(query_samples, query_emb, gallery_samples, gallery_emb, distance="cosine") -> RetrievalTask:
    return RetrievalTask(
        [s.id for s in query_samples], [s.label for s in query_samples], query_emb,
        [s.id for s in gallery_samples], [s.label for s in gallery_samples], gallery_emb,
        distance,
    )


def self_test(encoder: EncoderParams, queries, gallery, distance="cosine") -> RetrievalMetrics:
    return evaluate(make_task(queries, _embed(encoder, queries), gallery, _embed(encoder, gallery), distance))


def cross_test(new_encoder: EncoderParams, old_encoder: EncoderParams, queries, gallery,
               distance="cosine") -> RetrievalMetrics:
    q = _embed(new_encoder, queries)
    g = align_dims(_embed(old_encoder, gallery), q.shape[1])
    return evaluate(make_task(queries, q, gallery, g, distance))


def _count_less(row, pos_cols, neg_cols):
    """Number of (j, k) with row[j] < row[k], j in pos_cols, k in neg_cols."""
    neg = np.sort(row[neg_cols])
    return int(np.sum(len(neg) - np.searchsorted(neg, row[pos_cols], side="right")))


def criterion_report(new_embs, old_embs, labels, max_triplets: int = 2_000_000, rng=None,
                     distance="cosine") -> CriterionReport:
    """Satisfaction rates of both compatibility criteria.

    Pairs and triplets use distinct indices (j != i). Pairs satisfy the strict
    criterion with non-strict inequalities; triplets need d(new_i, old_j) <
    d(new_i, old_k) strictly. Above ``max_triplets`` items, a seeded uniform
    sample of that size is scored instead.
    """
    new_embs, old_embs = np.atleast_2d(as_vec(new_embs)), np.atleast_2d(as_vec(old_embs))
    labels = np.asarray(labels)
    if new_embs.shape[0] != old_embs.shape[0] or len(labels) != new_embs.shape[0]:
        raise DimensionError("new, old and labels must describe the same samples")
    if len(np.unique(labels)) < 2:
        raise ProtocolError("criterion report needs at least two labels")
    n = len(labels)
    d_no = distance_matrix(new_embs, old_embs, distance)
    d_oo = distance_matrix(old_embs, old_embs, distance)
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(n, dtype=bool)

    pair_count = n * (n - 1)
    triplet_per_anchor = np.array([(same[i].sum() - 1) * (~same[i]).sum() for i in range(n)], dtype=np.int64)
    triplet_count = int(triplet_per_anchor.sum())
    sampled = max(pair_count, triplet_count) > max_triplets

    if not sampled:
        ok = np.where(same, d_no <= d_oo, d_no >= d_oo) & off_diag
        eq12 = ok.sum() / pair_count if pair_count else None
        good = 0
        for i in range(n):
            pos = np.flatnonzero(same[i] & off_diag[i])
            neg = np.flatnonzero(~same[i])
            if len(pos) and len(neg):
                good += _count_less(d_no[i], pos, neg)
        eq3 = good / triplet_count if triplet_count else None
        return CriterionReport(_f(eq3), _f(eq12), triplet_count, pair_count, False)

    if rng is None:
        raise ParameterError("sampling requested but no rng given")
    m = int(max_triplets)
    # pairs: uniform over ordered (i, j), i != j
    i = rng.integers(0, n, size=m)
    j = rng.integers(0, n - 1, size=m)
    j = j + (j >= i)
    ok = np.where(same[i, j], d_no[i, j] <= d_oo[i, j], d_no[i, j] >= d_oo[i, j])
    eq12 = float(ok.mean())
    eq3 = None
    if triplet_count:
        ai = rng.choice(n, size=m, p=triplet_per_anchor / triplet_count)
        hits = 0
        for a in np.unique(ai):
            k_draw = int(np.sum(ai == a))
            pos = np.flatnonzero(same[a] & off_diag[a])
            neg = np.flatnonzero(~same[a])
            pj = pos[rng.integers(0, len(pos), size=k_draw)]
            nk = neg[rng.integers(0, len(neg), size=k_draw)]
            hits += int(np.sum(d_no[a, pj] < d_no[a, nk]))
        eq3 = hits / m
    return CriterionReport(_f(eq3), _f(eq12), triplet_count, pair_count, True)


def _f(x):
    return None if x is None else float(x)
