"""Embedding-operation counts for K-subset vs full centroid recomputation."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .centroids import initialize_centroids, recompute_full
from .core import Source, Split, embeddings_for
from .relabel import select_epoch_subset


class CountingEncoder:
    """Wraps an embedding function and counts the rows it embeds."""

    def __init__(self, fn=None):
        self.fn = fn
        self.count = 0

    def __call__(self, rows):
        rows = np.asarray(rows)
        self.count += rows.shape[0]
        return self.fn(rows) if self.fn is not None else rows


class BenchRow(NamedTuple):
    label: str
    embeddings_per_epoch: int
    naive_ratio: float


def bench_centroids(manifest, embeddings, k_values, rng, embed=None):
    """Embedding calls needed per epoch for each K and for the naive baseline.

    Counts are measured by routing every row through a counting encoder.
    """
    train = manifest.select(split=Split.TRAIN)
    single = train.select(source=Source.SINGLE)
    X = embeddings_for(manifest, embeddings, single.sample_ids)

    naive = CountingEncoder(embed)
    recompute_full(single, naive(X))
    rows = []
    for k in k_values:
        counter = CountingEncoder(embed)
        subset = select_epoch_subset(single, k, rng)
        ids = [s for pid in sorted(subset) for s in subset[pid]]
        labels = [pid for pid in sorted(subset) for _ in subset[pid]]
        initialize_centroids(counter(embeddings_for(single, X, ids)), labels)
        rows.append(BenchRow(f"K={k}", counter.count, naive.count / counter.count))
    rows.append(BenchRow("naive", naive.count, 1.0))
    return rows


def format_bench(rows):
    lines = ["method\tembeddings_per_epoch\tnaive_ratio"]
    lines += [f"{r.label}\t{r.embeddings_per_epoch}\t{r.naive_ratio:.6f}" for r in rows]
    return "\n".join(lines) + "\n"
