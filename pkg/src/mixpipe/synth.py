"""Synthetic identity clusters with injected pseudo-label noise.

Identities are unit anchors on the sphere; each image is its anchor plus
isotropic Gaussian noise, renormalised. Single-camera identities then receive
the three tracking errors the relabeling stage is meant to repair: junk
images, mislabeled images and fragmented identities.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    ConfigError,
    DatasetManifest,
    ParseError,
    SampleRecord,
    Source,
    Split,
    ValidationError,
    format_kv,
    parse_kv,
)

JUNK = -1
MAX_REJECTIONS = 10_000


class InfeasibleSpec(ValidationError):
    code = "infeasible_spec"


class EmptyPrediction(ValidationError):
    code = "empty_prediction"


@dataclass(frozen=True)
class SynthSpec:
    num_multicam_pids: int = 20
    num_singlecam_pids: int = 60
    images_per_pid: int = 8
    num_cameras: int = 4
    dim_raw: int = 64
    intra_noise_sigma: float = 0.03
    min_inter_angle_cos: float = 0.3
    frag_rate: float = 0.0
    frag_parts: int = 3
    mislabel_rate: float = 0.0
    junk_rate: float = 0.0
    seed: int = 0
    # held-out multi-camera identities, split into query/gallery
    num_eval_pids: int = 0
    # anchors live in a random subspace of this dimension (0 = full space)
    anchor_rank: int = 0
    tau_remove: float = 0.5

    def __post_init__(self):
        for name in ("frag_rate", "mislabel_rate", "junk_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.frag_parts < 2:
            raise ConfigError("frag_parts must be >= 2")
        if self.num_cameras < 2:
            raise ConfigError("num_cameras must be >= 2")
        if self.images_per_pid < 1 or self.dim_raw < 1:
            raise ConfigError("images_per_pid and dim_raw must be >= 1")
        if min(self.num_multicam_pids, self.num_singlecam_pids, self.num_eval_pids) < 0:
            raise ConfigError("pid counts must be >= 0")
        if self.intra_noise_sigma < 0:
            raise ConfigError("intra_noise_sigma must be >= 0")
        if not 0 <= self.anchor_rank <= self.dim_raw:
            raise ConfigError("anchor_rank must lie in [0, dim_raw]")
        if self.num_eval_pids and self.images_per_pid < 2:
            raise ConfigError("eval identities need >= 2 images")

    @classmethod
    def from_file(cls, path):
        values = parse_kv(Path(path).read_text(encoding="utf-8"), str(path))
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown spec key {key!r}")
            try:
                kwargs[key] = float(raw) if types[key] == "float" else int(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return cls(**kwargs)

    def to_text(self):
        return format_kv(dataclasses.asdict(self))


@dataclass
class GroundTruth:
    true_pid: dict = field(default_factory=dict)
    fragment_map: dict = field(default_factory=dict)
    mislabel_set: set = field(default_factory=set)
    anchors: np.ndarray | None = None
    anchor_pids: np.ndarray | None = None

    @property
    def junk_ids(self):
        return sorted(s for s, p in self.true_pid.items() if p == JUNK)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sample_anchors(spec, n, rng):
    if spec.anchor_rank and spec.anchor_rank < spec.dim_raw:
        basis, _ = np.linalg.qr(rng.standard_normal((spec.dim_raw, spec.anchor_rank)))
    else:
        basis = None
    anchors = []
    failures = 0
    while len(anchors) < n:
        g = rng.standard_normal(spec.anchor_rank or spec.dim_raw)
        cand = _unit(basis @ g if basis is not None else g)
        if anchors and np.max(np.asarray(anchors) @ cand) > spec.min_inter_angle_cos:
            failures += 1
            if failures >= MAX_REJECTIONS:
                raise InfeasibleSpec(
                    f"could not place anchor {len(anchors) + 1}/{n} with cosine "
                    f"<= {spec.min_inter_angle_cos} after {MAX_REJECTIONS} tries"
                )
            continue
        failures = 0
        anchors.append(cand)
    return np.asarray(anchors).reshape(n, spec.dim_raw)


def _images(anchor, count, sigma, rng, bias=None):
    noise = rng.normal(0.0, sigma, size=(count, anchor.shape[0]))
    X = anchor[None, :] + noise
    if bias is not None:
        X = X + bias
    return _unit(X)


def generate(spec: SynthSpec):
    """Build ``(manifest, raw_features, ground_truth)`` deterministically from ``spec``.

    Raw feature rows follow the manifest's ascending sample-id order.
    """
    rng = np.random.default_rng(spec.seed)
    n_train_m = spec.num_multicam_pids
    n_eval = spec.num_eval_pids
    n_single = spec.num_singlecam_pids
    anchors = _sample_anchors(spec, n_train_m + n_eval + n_single, rng)
    anchor_pids = np.arange(len(anchors))

    biases = rng.standard_normal((spec.num_cameras, spec.dim_raw))
    biases = _unit(biases) * spec.intra_noise_sigma

    records = []
    rows = []
    truth = {}
    sid = 0

    for pid in range(n_train_m + n_eval):
        cams = np.arange(spec.images_per_pid) % spec.num_cameras
        X = np.vstack(
            [_images(anchors[pid], 1, spec.intra_noise_sigma, rng, biases[c]) for c in cams]
        )
        for j, c in enumerate(cams):
            split = Split.TRAIN
            if pid >= n_train_m:
                split = Split.QUERY if j == 0 else Split.GALLERY
            records.append(SampleRecord(sid, pid, Source.MULTI, int(c), split))
            rows.append(X[j])
            truth[sid] = pid
            sid += 1

    first_single = n_train_m + n_eval
    single_ids = {}  # true pid -> sample ids
    stored = {}  # sample id -> stored pid
    for k in range(n_single):
        pid = first_single + k
        X = _images(anchors[pid], spec.images_per_pid, spec.intra_noise_sigma, rng)
        ids = []
        for x in X:
            rows.append(x)
            truth[sid] = pid
            stored[sid] = pid
            ids.append(sid)
            sid += 1
        single_ids[pid] = ids
    video = {first_single + k: k for k in range(n_single)}

    # fragmentation: contiguous parts of an identity's images get fresh pids
    fragment_map = {}
    next_pid = first_single + n_single
    n_frag = int(round(spec.frag_rate * n_single))
    can_split = [p for p, ids in single_ids.items() if len(ids) >= spec.frag_parts]
    n_frag = min(n_frag, len(can_split))
    for pid in sorted(rng.choice(can_split, size=n_frag, replace=False).tolist()):
        parts = np.array_split(np.asarray(single_ids[pid]), spec.frag_parts)
        for part in parts[1:]:
            fragment_map[next_pid] = pid
            video[next_pid] = video[pid]
            for s in part:
                stored[int(s)] = next_pid
            next_pid += 1

    # mislabeling: stored pid moves to another identity's (primary) pid
    mislabel_set = set()
    n_mis = int(round(spec.mislabel_rate * len(stored)))
    if n_single >= 2 and n_mis:
        sizes = {}
        for s, p in stored.items():
            sizes[p] = sizes.get(p, 0) + 1
        order = rng.permutation(sorted(stored))
        for s in order:
            if len(mislabel_set) == n_mis:
                break
            s = int(s)
            if sizes[stored[s]] <= 1:
                continue
            others = [p for p in single_ids if p != truth[s]]
            target = int(others[rng.integers(len(others))])
            sizes[stored[s]] -= 1
            sizes[target] = sizes.get(target, 0) + 1
            stored[s] = target
            mislabel_set.add(s)

    for s in sorted(stored):
        p = stored[s]
        records.append(SampleRecord(s, p, Source.SINGLE, video[p], Split.TRAIN))

    # junk: random unit vectors far from every anchor, hidden inside tracklets
    n_junk = int(round(spec.junk_rate * len(stored)))
    limit = spec.tau_remove - 0.05
    live_pids = sorted(set(stored.values()))
    for _ in range(n_junk):
        failures = 0
        while True:
            cand = _unit(rng.standard_normal(spec.dim_raw))
            if np.max(anchors @ cand) < limit:
                break
            failures += 1
            if failures >= MAX_REJECTIONS:
                raise InfeasibleSpec("could not place a junk sample away from all anchors")
        p = live_pids[rng.integers(len(live_pids))] if live_pids else first_single
        video.setdefault(p, len(video))
        records.append(SampleRecord(sid, int(p), Source.SINGLE, video[p], Split.TRAIN))
        rows.append(cand)
        truth[sid] = JUNK
        sid += 1

    manifest = DatasetManifest(tuple(records))
    raw = np.asarray(rows, dtype=np.float32).reshape(len(rows), spec.dim_raw)
    gt = GroundTruth(truth, fragment_map, mislabel_set, anchors, anchor_pids)
    return manifest, raw, gt


def score_partition(predicted, ground_truth):
    """Pairwise precision, recall and F1 of a predicted clustering.

    ``predicted`` maps sample id -> pid. Junk samples are dropped before
    counting. Precision is 1.0 when no pair is predicted together, recall is
    1.0 when the truth has no same-cluster pair.
    """
    truth = ground_truth.true_pid if isinstance(ground_truth, GroundTruth) else ground_truth
    ids = [s for s in sorted(predicted) if truth[s] != JUNK]
    if not ids:
        raise EmptyPrediction("no scorable samples in the prediction")
    p = np.array([predicted[s] for s in ids])
    t = np.array([truth[s] for s in ids])
    iu = np.triu_indices(len(ids), k=1)
    same_p = (p[:, None] == p[None, :])[iu]
    same_t = (t[:, None] == t[None, :])[iu]
    tp = int(np.sum(same_p & same_t))
    n_pred = int(same_p.sum())
    n_true = int(same_t.sum())
    precision = tp / n_pred if n_pred else 1.0
    recall = tp / n_true if n_true else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def write_ground_truth(gt: GroundTruth, path):
    lines = ["sample_id\ttrue_pid"]
    lines += [f"{s}\t{p}" for s, p in sorted(gt.true_pid.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_ground_truth(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t") != ["sample_id", "true_pid"]:
        raise ParseError("missing 'sample_id\\ttrue_pid' header", 1)
    truth = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError("expected 2 tab-separated fields", lineno)
        try:
            truth[int(parts[0])] = int(parts[1])
        except ValueError:
            raise ParseError("non-integer field", lineno) from None
    return GroundTruth(true_pid=truth)


def nearest_anchor(raw, gt: GroundTruth):
    """Nearest-anchor identity for each raw feature row."""
    if gt.anchors is None:
        raise ValidationError("ground truth carries no anchors")
    sims = np.asarray(raw, dtype=np.float64) @ gt.anchors.T
    return gt.anchor_pids[np.argmax(sims, axis=1)]
