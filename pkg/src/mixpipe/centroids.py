"""Centroid memory for single-camera identities with EMA updates."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    ZERO_NORM_EPS,
    DimMismatch,
    EmptyGroup,
    ParseError,
    Source,
    ValidationError,
    check_embeddings,
    read_embeddings,
    write_embeddings,
)


class UnknownPid(ValidationError):
    code = "unknown_pid"


@dataclass(frozen=True)
class CentroidsMemory:
    """Mapping pid -> unnormalised centroid. Operations return new instances."""

    dim: int
    entries: dict = field(default_factory=dict)
    epoch_stamp: int = 0

    def __post_init__(self):
        clean = {}
        for pid in sorted(self.entries):
            v = np.asarray(self.entries[pid], dtype=np.float64)
            if v.shape != (self.dim,):
                raise DimMismatch(f"centroid {pid} has shape {v.shape}, expected ({self.dim},)")
            if not np.all(np.isfinite(v)):
                raise ValidationError(f"centroid {pid} is not finite")
            if np.linalg.norm(v) < ZERO_NORM_EPS:
                raise ValidationError(f"centroid {pid} has zero norm")
            v = v.copy()
            v.setflags(write=False)
            clean[int(pid)] = v
        object.__setattr__(self, "entries", clean)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, pid):
        return pid in self.entries

    def __getitem__(self, pid):
        return self.entries[pid]

    @property
    def pids(self):
        return np.array(sorted(self.entries), dtype=np.int64)

    def matrix(self, pids=None):
        pids = self.pids if pids is None else pids
        if len(pids) == 0:
            return np.zeros((0, self.dim))
        return np.vstack([self.entries[int(p)] for p in pids])

    def restrict(self, pids):
        keep = set(int(p) for p in pids)
        return CentroidsMemory(
            self.dim, {p: v for p, v in self.entries.items() if p in keep}, self.epoch_stamp
        )


def group_means(features, labels):
    """Per-label mean of feature rows: ``{label: mean}``."""
    X = check_embeddings(features).astype(np.float64)
    labels = np.asarray(labels)
    if labels.shape[0] != X.shape[0]:
        raise DimMismatch(f"{labels.shape[0]} labels for {X.shape[0]} rows")
    out = {}
    for lab in np.unique(labels):
        out[int(lab)] = X[labels == lab].mean(axis=0)
    return out


def initialize_centroids(features, labels, pids=None):
    """Bootstrap memory: each centroid is the mean of its provided rows.

    ``pids`` lists identities that must be present; one without rows raises
    ``EmptyGroup``.
    """
    X = check_embeddings(features)
    means = group_means(X, labels)
    if pids is not None:
        for p in pids:
            if int(p) not in means:
                raise EmptyGroup(int(p))
    return CentroidsMemory(X.shape[1], means, 0)


def ema_update(memory: CentroidsMemory, per_pid_means, alpha):
    """mu <- alpha * mu + (1 - alpha) * mean for every pid in ``per_pid_means``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    entries = dict(memory.entries)
    for pid, mean in per_pid_means.items():
        pid = int(pid)
        if pid not in entries:
            raise UnknownPid(f"pid {pid} is not in memory")
        mean = np.asarray(mean, dtype=np.float64)
        if mean.shape != (memory.dim,):
            raise DimMismatch(f"mean for pid {pid} has shape {mean.shape}")
        entries[pid] = alpha * entries[pid] + (1.0 - alpha) * mean
    return CentroidsMemory(memory.dim, entries, memory.epoch_stamp + 1)


def recompute_full(manifest, embeddings):
    """Exact per-pid means over every single-camera image (naive baseline)."""
    X = check_embeddings(embeddings)
    if X.shape[0] != len(manifest):
        raise DimMismatch(f"{X.shape[0]} embedding rows for {len(manifest)} records")
    single = np.array([r.source is Source.SINGLE for r in manifest.records], dtype=bool)
    if not single.any():
        raise EmptyGroup("<any single-camera pid>")
    return initialize_centroids(X[single], manifest.pids[single])


def apply_merge(memory: CentroidsMemory, pid_mapping):
    """Collapse each merge group onto its canonical pid (unweighted mean)."""
    groups = {}
    for pid in memory.entries:
        canon = int(pid_mapping.get(pid, pid))
        groups.setdefault(canon, []).append(pid)
    entries = {}
    for canon, members in groups.items():
        if canon not in memory.entries:
            raise UnknownPid(f"canonical pid {canon} is not in memory")
        if len(members) == 1:
            entries[canon] = memory.entries[members[0]]
        else:
            entries[canon] = np.mean([memory.entries[m] for m in sorted(members)], axis=0)
    return CentroidsMemory(memory.dim, entries, memory.epoch_stamp)


def write_memory(memory: CentroidsMemory, path):
    """Write centroids to ``path`` plus a ``path.pids`` sidecar."""
    path = Path(path)
    pids = memory.pids
    write_embeddings(memory.matrix(pids).reshape(len(pids), memory.dim), path)
    lines = [f"# epoch_stamp = {memory.epoch_stamp}", "# row_index\tpid"]
    lines += [f"{i}\t{p}" for i, p in enumerate(pids)]
    sidecar(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".pids")


def read_memory(path):
    path = Path(path)
    X = read_embeddings(path)
    stamp = 0
    pids = []
    for lineno, line in enumerate(sidecar(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition("=")
            if key.strip() == "epoch_stamp":
                stamp = int(val)
            continue
        parts = line.split("\t")
        if len(parts) != 2 or int(parts[0]) != len(pids):
            raise ParseError("expected 'row_index<TAB>pid' in row order", lineno)
        pids.append(int(parts[1]))
    if len(pids) != X.shape[0]:
        raise ParseError(f"sidecar lists {len(pids)} pids for {X.shape[0]} rows")
    return CentroidsMemory(X.shape[1], dict(zip(pids, X.astype(np.float64))), stamp)
