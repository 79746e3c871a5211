"""Per-epoch pseudo-label refinement: filtering, relabeling and pid merging."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .centroids import CentroidsMemory, apply_merge, ema_update, group_means, initialize_centroids
from .core import (
    DatasetManifest,
    DimMismatch,
    ParseError,
    Source,
    Split,
    ValidationError,
    check_embeddings,
    embeddings_for,
    format_kv,
    normalize_rows,
    pairwise_similarity,
    parse_kv,
)

log = logging.getLogger(__name__)


class MissingCentroid(ValidationError):
    code = "missing_centroid"

    def __init__(self, pid):
        super().__init__(f"no centroid for pid {pid}")
        self.pid = pid


class Verdict(enum.Enum):
    KEEP = "keep"
    REMOVE = "remove"
    RELABEL = "relabel"


@dataclass(frozen=True)
class SampleDecision:
    sample_id: int
    verdict: Verdict
    best_sim: float
    new_pid: int | None = None


@dataclass
class RefinementReport:
    n_input_images: int = 0
    n_removed: int = 0
    n_relabeled: int = 0
    n_kept: int = 0
    pids_before: int = 0
    pids_after: int = 0
    merge_components: list = field(default_factory=list)
    n_embedded: int = 0
    n_skipped_pids: int = 0
    removed_ids: tuple = ()
    epoch: int = 0

    def check(self):
        assert self.n_input_images == self.n_removed + self.n_relabeled + self.n_kept
        assert self.pids_after <= self.pids_before

    def to_text(self):
        comps = ";".join(",".join(str(p) for p in c) for c in self.merge_components)
        return format_kv(
            {
                "epoch": self.epoch,
                "n_input_images": self.n_input_images,
                "n_removed": self.n_removed,
                "n_relabeled": self.n_relabeled,
                "n_kept": self.n_kept,
                "pids_before": self.pids_before,
                "pids_after": self.pids_after,
                "merge_components": comps,
                "n_embedded": self.n_embedded,
                "n_skipped_pids": self.n_skipped_pids,
                "removed_ids": ",".join(str(s) for s in self.removed_ids),
            }
        )

    @classmethod
    def from_text(cls, text):
        kv = parse_kv(text)
        try:
            comps = [
                [int(p) for p in c.split(",")] for c in kv.pop("merge_components").split(";") if c
            ]
            removed = tuple(int(s) for s in kv.pop("removed_ids").split(",") if s)
            return cls(
                merge_components=comps, removed_ids=removed, **{k: int(v) for k, v in kv.items()}
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"bad refinement report: {exc}") from None


def cumulative_report(reports):
    """Totals over several epochs; pid counts span first-before to last-after."""
    if not reports:
        return RefinementReport()
    return RefinementReport(
        n_input_images=sum(r.n_input_images for r in reports),
        n_removed=sum(r.n_removed for r in reports),
        n_relabeled=sum(r.n_relabeled for r in reports),
        n_kept=sum(r.n_kept for r in reports),
        pids_before=reports[0].pids_before,
        pids_after=reports[-1].pids_after,
        merge_components=[c for r in reports for c in r.merge_components],
        n_embedded=sum(r.n_embedded for r in reports),
        n_skipped_pids=sum(r.n_skipped_pids for r in reports),
        epoch=reports[-1].epoch,
    )


def select_epoch_subset(manifest: DatasetManifest, k_per_pid, rng):
    """Draw up to ``k_per_pid`` images per single-camera pid without replacement."""
    if k_per_pid < 1:
        raise ValidationError("k_per_pid must be >= 1")
    groups = manifest.by_pid(source=Source.SINGLE, split=Split.TRAIN)
    subset = {}
    for pid in sorted(groups):
        ids = groups[pid]
        if not ids:
            continue
        take = min(k_per_pid, len(ids))
        chosen = rng.choice(len(ids), size=take, replace=False)
        subset[pid] = sorted(ids[i] for i in chosen)
    return subset


def filter_and_relabel(features, labels, memory: CentroidsMemory, tau_remove, tau_rel, sample_ids=None):
    """Decide keep / remove / relabel for each row against a frozen memory.

    The best match is taken over every centroid (ties go to the smallest pid).
    Below ``tau_remove`` the sample is removed; a foreign best match above
    ``tau_rel`` relabels it; anything else keeps its label.
    """
    if tau_remove > tau_rel:
        raise ValidationError("tau_remove must not exceed tau_rel")
    X = check_embeddings(features)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != X.shape[0]:
        raise DimMismatch(f"{labels.shape[0]} labels for {X.shape[0]} rows")
    if sample_ids is None:
        sample_ids = np.arange(X.shape[0])
    for lab in np.unique(labels):
        if int(lab) not in memory:
            raise MissingCentroid(int(lab))
    if X.shape[0] == 0:
        return []
    if X.shape[1] != memory.dim:
        raise DimMismatch(f"features have dim {X.shape[1]}, memory has {memory.dim}")
    pids = memory.pids
    S = pairwise_similarity(X, memory.matrix(pids))
    best = np.argmax(S, axis=1)  # first maximum = smallest pid
    decisions = []
    for i, sid in enumerate(sample_ids):
        s_max = float(S[i, best[i]])
        k_star = int(pids[best[i]])
        if s_max < tau_remove:
            decisions.append(SampleDecision(int(sid), Verdict.REMOVE, s_max))
        elif k_star != labels[i] and s_max > tau_rel:
            decisions.append(SampleDecision(int(sid), Verdict.RELABEL, s_max, k_star))
        else:
            decisions.append(SampleDecision(int(sid), Verdict.KEEP, s_max))
    return decisions


def connected_components(adjacency):
    """Component label (smallest member index) per node of a boolean graph."""
    n = adjacency.shape[0]
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    rows, cols = np.nonzero(np.triu(adjacency, k=1))
    for a, b in zip(rows.tolist(), cols.tolist()):
        ra, rb = find(a), find(b)
        if ra != rb:
            # keep the smaller index as root
            if ra < rb:
                parent[rb] = ra
            else:
                parent[ra] = rb
    return np.array([find(i) for i in range(n)], dtype=np.int64)


def merge_pids(memory: CentroidsMemory, tau_merge):
    """Merge pids whose centroids are connected at similarity >= ``tau_merge``.

    Returns ``(pid_mapping, merged_memory)``; every pid maps to the smallest
    pid of its component.
    """
    if len(memory) == 0:
        raise ValidationError("cannot merge an empty memory")
    pids = memory.pids
    S = pairwise_similarity(memory.matrix(pids), memory.matrix(pids))
    adj = S >= tau_merge
    np.fill_diagonal(adj, False)
    roots = connected_components(adj | adj.T)
    mapping = {int(p): int(pids[r]) for p, r in zip(pids, roots)}
    return mapping, apply_merge(memory, mapping)


def merge_groups(mapping):
    groups = {}
    for p, c in mapping.items():
        groups.setdefault(c, []).append(p)
    return [sorted(g) for c, g in sorted(groups.items()) if len(g) > 1]


class Refinement(NamedTuple):
    decisions: list
    labels: np.ndarray  # refined label per row, -1 where removed
    memory: CentroidsMemory
    mapping: dict


def refine(emb, labels, memory, tau_remove, tau_rel, tau_merge, alpha,
           merge_before_ema=False, sample_ids=None):
    """Filter/relabel against ``memory``, EMA-update it with the surviving
    rows, then merge pids. The default order is update-then-merge."""
    labels = np.asarray(labels, dtype=np.int64)
    decisions = filter_and_relabel(emb, labels, memory, tau_remove, tau_rel, sample_ids)
    new_labels = labels.copy()
    for i, d in enumerate(decisions):
        if d.verdict is Verdict.RELABEL:
            new_labels[i] = d.new_pid
    keep = np.array([d.verdict is not Verdict.REMOVE for d in decisions], dtype=bool)
    emb = np.asarray(emb, dtype=np.float64)

    def update(mem, mapping=None):
        labs = new_labels[keep]
        if mapping:
            labs = np.array([mapping.get(int(p), int(p)) for p in labs], dtype=np.int64)
        if labs.size == 0:
            return replace(mem, epoch_stamp=mem.epoch_stamp + 1)
        return ema_update(mem, group_means(emb[keep], labs), alpha)

    if merge_before_ema:
        mapping, memory = merge_pids(memory, tau_merge)
        memory = update(memory, mapping)
    else:
        memory = update(memory)
        mapping, memory = merge_pids(memory, tau_merge)
    final = np.array([mapping.get(int(p), int(p)) for p in new_labels], dtype=np.int64)
    final[~keep] = -1
    return Refinement(decisions, final, memory, mapping)


class EpochResult(NamedTuple):
    manifest: DatasetManifest
    memory: CentroidsMemory
    report: RefinementReport


def run_relabeling_epoch(
    manifest: DatasetManifest,
    features,
    memory: CentroidsMemory | None,
    config,
    rng,
    embed=None,
    epoch=0,
):
    """One refinement pass over the single-camera data.

    ``features`` are rows aligned with ``manifest``; ``embed`` (the momentum
    encoder) maps them to embeddings, identity when omitted. Returns the
    relabeled + merged manifest (removed samples stay in it; their ids are in
    ``report.removed_ids`` and are dropped only for this epoch's sampling),
    the updated memory and the report.
    """
    features = np.asarray(features)
    if features.shape[0] != len(manifest):
        raise DimMismatch(f"{features.shape[0]} feature rows for {len(manifest)} records")
    groups = manifest.by_pid(source=Source.SINGLE, split=Split.TRAIN)
    subset = select_epoch_subset(manifest, config.k_per_pid, rng)
    ids = [s for pid in sorted(subset) for s in subset[pid]]
    labels = np.array([pid for pid in sorted(subset) for _ in subset[pid]], dtype=np.int64)
    raw = embeddings_for(manifest, features, ids).reshape(len(ids), features.shape[1])
    emb = embed(raw) if embed is not None else raw
    emb = np.asarray(emb, dtype=np.float64)
    normalize_rows(emb, "subset embeddings")

    report = RefinementReport(epoch=epoch, pids_before=len(groups), n_embedded=len(ids))
    if memory is None:
        memory = initialize_centroids(emb, labels)
    step = refine(
        emb, labels, memory, config.tau_remove, config.tau_rel, config.tau_merge,
        config.alpha, getattr(config, "merge_before_ema", False), ids,
    )
    decisions, memory, mapping = step.decisions, step.memory, step.mapping
    removed = [d.sample_id for d in decisions if d.verdict is Verdict.REMOVE]
    report.n_removed = len(removed)
    report.n_relabeled = sum(d.verdict is Verdict.RELABEL for d in decisions)
    report.n_kept = sum(d.verdict is Verdict.KEEP for d in decisions)
    report.n_input_images = len(decisions)
    report.merge_components = merge_groups(mapping)

    relabeled = {d.sample_id: d.new_pid for d in decisions if d.verdict is Verdict.RELABEL}
    video = manifest.video_of()
    records = []
    for r in manifest.records:
        if r.source is Source.SINGLE and r.split is Split.TRAIN:
            pid = mapping.get(relabeled.get(r.sample_id, r.pid), relabeled.get(r.sample_id, r.pid))
            if pid != r.pid:
                r = replace(r, pid=pid, context_id=video[pid])
        records.append(r)
    refined = DatasetManifest(tuple(records))

    live = refined.by_pid(source=Source.SINGLE, split=Split.TRAIN)
    memory = memory.restrict(live)
    missing = sorted(set(live) - set(memory.entries))
    if missing:
        raise MissingCentroid(missing[0])
    report.pids_after = len(live)
    report.removed_ids = tuple(sorted(removed))
    report.check()
    log.debug(
        "epoch %d: %d kept, %d relabeled, %d removed, pids %d -> %d",
        epoch, report.n_kept, report.n_relabeled, report.n_removed,
        report.pids_before, report.pids_after,
    )
    return EpochResult(refined, memory, report)


def write_report(report: RefinementReport, path):
    Path(path).write_text(report.to_text(), encoding="utf-8")


def read_report(path):
    return RefinementReport.from_text(Path(path).read_text(encoding="utf-8"))
