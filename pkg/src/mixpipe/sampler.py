"""Mixed mini-batch sampling: strategy-driven assignment of multi-camera pids
to single-camera pids, a FIFO exclusion queue and camera-diverse batches."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import (
    DatasetManifest,
    EmptyGroup,
    ParseError,
    Source,
    Split,
    Strategy,
    ValidationError,
    check_embeddings,
    pairwise_similarity,
)


class NotEnoughCandidates(ValidationError):
    code = "not_enough_candidates"


class Infeasible(ValidationError):
    code = "infeasible"


# ---------------------------------------------------------------------------
# assignment


def _shortest_augmenting(cost):
    """Rectangular Hungarian method (n <= m) with row/column potentials.

    Returns ``(assignment, u, v)`` where ``u[i] + v[j] <= cost[i, j]`` holds
    for every edge and with equality on matched ones.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)  # column -> row (1-based), 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            slack = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(slack)) + 1
            delta = slack[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    assignment = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if match[j]:
            assignment[match[j] - 1] = j - 1
    return assignment, u[1:], v[1:]


def _optimal_total(cost):
    if cost.shape[0] == 0:
        return 0.0
    a, _, _ = _shortest_augmenting(cost)
    return float(cost[np.arange(cost.shape[0]), a].sum())


def hungarian_assign(cost):
    """Minimum-cost assignment of every row to a distinct column.

    Among optimal assignments the lexicographically smallest column vector
    is returned. Returns ``(columns, total_cost)``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise Infeasible(f"cost must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n > m:
        raise Infeasible(f"{n} rows cannot be matched into {m} columns")
    if not np.all(np.isfinite(cost)):
        raise Infeasible("cost matrix has non-finite entries")
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    assignment, u, v = _shortest_augmenting(cost)
    best = float(cost[np.arange(n), assignment].sum())
    tol = 1e-9 * max(1.0, float(np.abs(cost).max())) * n

    # Every optimal assignment uses only edges that are tight under the
    # optimal potentials, so ties only need checking among tight columns.
    chosen = []
    taken = np.zeros(m, dtype=bool)
    remaining = best
    for i in range(n):
        reduced = cost[i] - u[i] - v
        cands = [j for j in np.flatnonzero(reduced <= tol) if not taken[j]]
        pick = None
        if len(cands) == 1:
            pick = int(cands[0])
        else:
            fallback = None
            for j in cands:
                taken[j] = True
                rest = cost[i + 1:][:, ~taken]
                total = cost[i, j] + _optimal_total(rest)
                taken[j] = False
                if total <= remaining + tol:
                    pick = int(j)
                    break
                if fallback is None or total < fallback[0]:
                    fallback = (total, int(j))
            if pick is None:
                pick = fallback[1] if fallback else int(assignment[i])
        chosen.append(pick)
        taken[pick] = True
        remaining -= cost[i, pick]
    cols = np.array(chosen, dtype=np.int64)
    return cols, float(cost[np.arange(n), cols].sum())


def strategy_cost(S, strategy, rng=None):
    """Turn an ``n x m`` similarity matrix into an assignment cost."""
    S = np.asarray(S, dtype=np.float64)
    strategy = Strategy(strategy) if isinstance(strategy, str) else strategy
    if S.ndim != 2 or S.shape[1] < S.shape[0]:
        raise NotEnoughCandidates(f"need at least as many candidates as rows, got {S.shape}")
    if strategy is Strategy.HARD:
        return -S
    if strategy is Strategy.SOFT:
        return S.copy()
    if strategy is Strategy.MEAN:
        return np.abs(S - S.mean())
    if strategy is Strategy.MEDIAN:
        return np.abs(S - np.median(S))
    if rng is None:
        raise ValidationError("random strategy needs an rng")
    return rng.random(S.shape)


def assign_pairs(S, strategy, rng=None):
    """Column chosen for each row of ``S`` under ``strategy``."""
    cols, _ = hungarian_assign(strategy_cost(S, strategy, rng))
    return cols


# ---------------------------------------------------------------------------
# exclusion queue


def queue_capacity(queue_epochs, iterations_per_epoch, n_p, live_single_pids):
    return max(0, min(queue_epochs * iterations_per_epoch * n_p, live_single_pids - n_p))


class ExclusionQueue:
    """FIFO of recently used single-camera pids; oldest entries leave first."""

    def __init__(self, capacity):
        if capacity < 0:
            raise ValidationError("queue capacity must be >= 0")
        self.capacity = capacity
        self._items = deque()
        self._counts = {}

    def __len__(self):
        return len(self._items)

    def __contains__(self, pid):
        return self._counts.get(pid, 0) > 0

    def __iter__(self):
        return iter(self._items)

    def _evict(self):
        while len(self._items) > self.capacity:
            old = self._items.popleft()
            self._counts[old] -= 1
            if not self._counts[old]:
                del self._counts[old]

    def push(self, pids):
        for p in pids:
            p = int(p)
            self._items.append(p)
            self._counts[p] = self._counts.get(p, 0) + 1
            self._evict()

    def resize(self, capacity):
        if capacity < 0:
            raise ValidationError("queue capacity must be >= 0")
        self.capacity = capacity
        self._evict()


# ---------------------------------------------------------------------------
# pairing and batch composition


class Pair(NamedTuple):
    multi_pid: int
    single_pid: int
    similarity: float


def compute_multicam_centroids(selected_pids, manifest: DatasetManifest, embeddings):
    """Mean embedding of each selected multi-camera pid, one row per pid."""
    X = check_embeddings(embeddings)
    groups = manifest.by_pid(source=Source.MULTI, split=Split.TRAIN)
    index = manifest.row_index()
    rows = []
    for pid in selected_pids:
        ids = groups.get(int(pid))
        if not ids:
            raise EmptyGroup(int(pid))
        rows.append(X[[index[s] for s in ids]].astype(np.float64).mean(axis=0))
    return np.asarray(rows).reshape(len(rows), X.shape[1])


def next_pairs(multi_pool, memory, queue: ExclusionQueue, strategy, n_p, rng):
    """Pair ``n_p`` random multi-camera pids with distinct single-camera pids.

    ``multi_pool`` maps multi-camera pid -> centroid. Single-camera pids in
    ``queue`` are excluded; the chosen ones are pushed onto it.
    """
    pool = sorted(multi_pool)
    if len(pool) < n_p:
        raise NotEnoughCandidates(f"{len(pool)} multi-camera pids for n_p={n_p}")
    cands = [int(p) for p in memory.pids if int(p) not in queue]
    if len(cands) < n_p:
        raise NotEnoughCandidates(
            f"{len(cands)} single-camera pids outside the queue for n_p={n_p}"
        )
    picked = [pool[i] for i in rng.choice(len(pool), size=n_p, replace=False)]
    A = np.vstack([multi_pool[p] for p in picked])
    S = pairwise_similarity(A, memory.matrix(cands))
    cols = assign_pairs(S, strategy, rng)
    pairs = [Pair(int(picked[i]), cands[c], float(S[i, c])) for i, c in enumerate(cols)]
    queue.push(p.single_pid for p in pairs)
    return pairs


@dataclass(frozen=True)
class MiniBatchPlan:
    pairs: tuple
    sample_ids: tuple
    provenance: tuple  # (pid, source, context_id) per sample id

    def __len__(self):
        return len(self.sample_ids)


def _round_robin(by_camera, n_k, rng):
    cams = sorted(by_camera)
    order = [cams[i] for i in rng.permutation(len(cams))]
    pools = {c: [by_camera[c][i] for i in rng.permutation(len(by_camera[c]))] for c in order}
    seq = []
    depth = max(len(p) for p in pools.values())
    for r in range(depth):
        for c in order:
            if r < len(pools[c]):
                seq.append(pools[c][r])
    return [seq[i % len(seq)] for i in range(n_k)]


def compose_minibatch(pairs, manifest: DatasetManifest, n_k, rng, exclude=()):
    """Draw ``n_k`` images for every pid of every pair.

    Multi-camera images rotate over the pid's cameras so the batch covers as
    many cameras as possible; single-camera images are drawn uniformly,
    with replacement only when fewer than ``n_k`` exist.
    """
    excluded = set(int(s) for s in exclude)
    multi = {}
    single = {}
    for r in manifest.records:
        if r.split is not Split.TRAIN or r.sample_id in excluded:
            continue
        if r.source is Source.MULTI:
            multi.setdefault(r.pid, {}).setdefault(r.context_id, []).append(r.sample_id)
        else:
            single.setdefault(r.pid, []).append(r.sample_id)
    prov = {r.sample_id: (r.pid, r.source, r.context_id) for r in manifest.records}

    ids = []
    for pair in pairs:
        if pair.multi_pid not in multi:
            raise EmptyGroup(pair.multi_pid)
        if pair.single_pid not in single:
            raise EmptyGroup(pair.single_pid)
        ids.extend(_round_robin(multi[pair.multi_pid], n_k, rng))
        pool = single[pair.single_pid]
        chosen = rng.choice(len(pool), size=n_k, replace=len(pool) < n_k)
        ids.extend(pool[i] for i in chosen)
    return MiniBatchPlan(tuple(pairs), tuple(int(s) for s in ids), tuple(prov[s] for s in ids))


def plan_violations(plan: MiniBatchPlan, manifest: DatasetManifest, n_p, n_k):
    """List of human-readable violations of the batch-shape invariants."""
    problems = []
    if len(plan.sample_ids) != 2 * n_p * n_k:
        problems.append(f"{len(plan.sample_ids)} samples, expected {2 * n_p * n_k}")
    multi = {p.multi_pid for p in plan.pairs}
    single = {p.single_pid for p in plan.pairs}
    if len(plan.pairs) != n_p or len(multi) != n_p or len(single) != n_p:
        problems.append(f"pids not distinct: {len(multi)} multi / {len(single)} single")
    per_slot = {}
    for sid, (pid, source, ctx) in zip(plan.sample_ids, plan.provenance):
        per_slot.setdefault((pid, source), []).append(ctx)
    for (pid, source), ctxs in per_slot.items():
        if len(ctxs) != n_k:
            problems.append(f"pid {pid} has {len(ctxs)} images, expected {n_k}")
        if source is Source.MULTI:
            available = {
                r.context_id
                for r in manifest.records
                if r.pid == pid and r.source is Source.MULTI and r.split is Split.TRAIN
            }
            want = min(n_k, len(available))
            if len(set(ctxs)) != want:
                problems.append(f"pid {pid} spans {len(set(ctxs))} cameras, expected {want}")
    return problems


class BatchSampler:
    """Stateful per-stream sampler: holds the exclusion queue across epochs.

    Call :meth:`start_epoch` after each refinement pass, then
    :meth:`next_batch` once per iteration.
    """

    def __init__(self, config, rng):
        self.config = config
        self.rng = rng
        self.queue = ExclusionQueue(0)
        self.multi_centroids = {}

    def start_epoch(self, manifest, embeddings, memory, removed=()):
        self.manifest = manifest
        self.embeddings = embeddings
        self.removed = set(int(s) for s in removed)
        active = manifest.without(self.removed).by_pid(source=Source.SINGLE, split=Split.TRAIN)
        self.memory = memory.restrict(active)
        cfg = self.config
        self.queue.resize(
            queue_capacity(cfg.queue_epochs, cfg.iterations_per_epoch, cfg.n_p, len(self.memory))
        )
        multi_pids = sorted(manifest.by_pid(source=Source.MULTI, split=Split.TRAIN))
        mats = compute_multicam_centroids(multi_pids, manifest, embeddings)
        self.multi_centroids = dict(zip(multi_pids, mats))

    def refresh_multi_centroids(self, embeddings):
        pids = sorted(self.multi_centroids)
        self.multi_centroids = dict(zip(pids, compute_multicam_centroids(pids, self.manifest, embeddings)))

    def next_batch(self):
        cfg = self.config
        pairs = next_pairs(
            self.multi_centroids, self.memory, self.queue, cfg.strategy, cfg.n_p, self.rng
        )
        return compose_minibatch(pairs, self.manifest, cfg.n_k, self.rng, exclude=self.removed)


# ---------------------------------------------------------------------------
# text format


def format_plan(index, plan: MiniBatchPlan):
    pairs = ",".join(f"{p.multi_pid}:{p.single_pid}:{p.similarity:.6f}" for p in plan.pairs)
    return "\t".join([str(index), pairs] + [str(s) for s in plan.sample_ids])


def parse_plan_line(line, lineno=None):
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 2:
        raise ParseError("expected batch index, pairs and sample ids", lineno)
    try:
        index = int(parts[0])
        pairs = []
        for item in parts[1].split(","):
            m, s, sim = item.split(":")
            pairs.append(Pair(int(m), int(s), float(sim)))
        ids = tuple(int(x) for x in parts[2:])
    except ValueError:
        raise ParseError("malformed plan line", lineno) from None
    return index, tuple(pairs), ids


def write_plans(plans, path):
    Path(path).write_text("".join(format_plan(i, p) + "\n" for i, p in enumerate(plans)), encoding="utf-8")
