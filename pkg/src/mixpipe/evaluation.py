"""Rank-k / mAP retrieval evaluation under the cross-camera protocol."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import DimMismatch, Split, ValidationError, check_embeddings, pairwise_similarity

log = logging.getLogger(__name__)

RANKS = (1, 5, 10)


class NoValidGallery(ValidationError):
    code = "no_valid_gallery"


@dataclass(frozen=True)
class RetrievalResult:
    rank_k: dict = field(default_factory=dict)
    mAP: float = 0.0
    n_queries_evaluated: int = 0
    n_queries_skipped: int = 0

    @property
    def rank1(self):
        return self.rank_k[1]

    def as_row(self):
        return "\t".join(
            [f"{self.rank_k[k]:.6f}" for k in RANKS] + [f"{self.mAP:.6f}", str(self.n_queries_evaluated)]
        )

    def describe(self):
        return (
            f"Rank-1  {100 * self.rank_k[1]:6.2f}%\n"
            f"Rank-5  {100 * self.rank_k[5]:6.2f}%\n"
            f"Rank-10 {100 * self.rank_k[10]:6.2f}%\n"
            f"mAP     {100 * self.mAP:6.2f}%\n"
            f"queries {self.n_queries_evaluated} evaluated, {self.n_queries_skipped} skipped\n"
        )


def _as_arrays(records):
    ids = np.array([r.sample_id for r in records], dtype=np.int64)
    pids = np.array([r.pid for r in records], dtype=np.int64)
    cams = np.array([r.context_id for r in records], dtype=np.int64)
    return ids, pids, cams


def evaluate_similarity(S, q_pids, q_cams, g_ids, g_pids, g_cams):
    """Rank-k and mAP from a precomputed ``queries x gallery`` score matrix."""
    S = np.asarray(S, dtype=np.float64)
    hits = {k: 0 for k in RANKS}
    aps = []
    skipped = 0
    for qi in range(S.shape[0]):
        valid = ~((g_pids == q_pids[qi]) & (g_cams == q_cams[qi]))
        idx = np.flatnonzero(valid)
        # descending score, ties by ascending gallery sample id
        order = idx[np.lexsort((g_ids[idx], -S[qi, idx]))]
        match = g_pids[order] == q_pids[qi]
        if not match.any():
            skipped += 1
            continue
        first = int(np.argmax(match))
        for k in RANKS:
            hits[k] += first < k
        positions = np.flatnonzero(match) + 1
        aps.append(np.mean(np.arange(1, positions.size + 1) / positions))
    if not aps:
        raise NoValidGallery("no query has a valid gallery match")
    n = len(aps)
    return RetrievalResult({k: hits[k] / n for k in RANKS}, float(np.mean(aps)), n, skipped)


def evaluate(query_embeddings, query_records, gallery_embeddings, gallery_records):
    """Rank gallery by cosine similarity; same-pid same-camera items are excluded."""
    Q = check_embeddings(query_embeddings, name="query embeddings")
    G = check_embeddings(gallery_embeddings, name="gallery embeddings")
    if Q.shape[1] != G.shape[1]:
        raise DimMismatch(f"query dim {Q.shape[1]} != gallery dim {G.shape[1]}")
    q_records = list(query_records)
    g_records = list(gallery_records)
    if len(q_records) != Q.shape[0] or len(g_records) != G.shape[0]:
        raise DimMismatch("record lists and embedding rows disagree")
    _, q_pids, q_cams = _as_arrays(q_records)
    g_ids, g_pids, g_cams = _as_arrays(g_records)
    result = evaluate_similarity(pairwise_similarity(Q, G), q_pids, q_cams, g_ids, g_pids, g_cams)
    if result.n_queries_skipped:
        log.info("%d queries had no valid gallery match", result.n_queries_skipped)
    return result


def evaluate_manifest(manifest, embeddings):
    """Evaluate using the query and gallery splits of one manifest."""
    X = np.asarray(embeddings)
    rows = manifest.row_index()
    q = [r for r in manifest.records if r.split is Split.QUERY]
    g = [r for r in manifest.records if r.split is Split.GALLERY]
    return evaluate(
        X[[rows[r.sample_id] for r in q]].reshape(len(q), X.shape[1]), q,
        X[[rows[r.sample_id] for r in g]].reshape(len(g), X.shape[1]), g,
    )
