"""Domain types, cosine similarity, file formats and the pipeline config."""

from __future__ import annotations

import dataclasses
import enum
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

ZERO_NORM_EPS = 1e-12

EMBEDDING_MAGIC = b"MXEB"
EMBEDDING_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class MixpipeError(Exception):
    """Base class; ``code`` is the machine-readable tag printed by the CLI."""

    code = "error"
    exit_code = 4


class ValidationError(MixpipeError, ValueError):
    code = "validation_error"


class ZeroNormVector(ValidationError):
    code = "zero_norm_vector"

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class DimMismatch(ValidationError):
    code = "dim_mismatch"


class EmptyGroup(ValidationError):
    code = "empty_group"

    def __init__(self, pid):
        super().__init__(f"no feature rows for pid {pid}")
        self.pid = pid


class ParseError(ValidationError):
    code = "parse_error"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateSampleId(ValidationError):
    code = "duplicate_sample_id"


class CrossVideoPid(ValidationError):
    code = "cross_video_pid"


class ConfigError(ValidationError):
    code = "config_error"


class FormatError(MixpipeError):
    code = "format_error"
    exit_code = 3


class BadMagic(FormatError):
    code = "bad_magic"


class TruncatedFile(FormatError):
    code = "truncated_file"


# ---------------------------------------------------------------------------
# similarity


def _threads():
    try:
        n = int(os.environ.get("MIXPIPE_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimMismatch(f"vector dims differ: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        raise ZeroNormVector("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize_rows(X, name="matrix"):
    """Return float64 rows scaled to unit norm; raises on zero-norm rows."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimMismatch(f"{name} must be 2-D, got shape {X.shape}")
    norms = np.linalg.norm(X, axis=1)
    bad = np.flatnonzero(norms < ZERO_NORM_EPS)
    if bad.size:
        raise ZeroNormVector(f"{name} row {bad[0]} has zero norm", row=int(bad[0]))
    return X / norms[:, None]


def pairwise_similarity(A, B, chunk_rows=4096):
    """Cosine similarity between every row of ``A`` and every row of ``B``.

    Row blocks of ``A`` are independent; large inputs are split across
    ``MIXPIPE_THREADS`` workers.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise DimMismatch(f"incompatible shapes {A.shape} and {B.shape}")
    An = normalize_rows(A, "A")
    Bn = normalize_rows(B, "B")
    if A.shape[0] <= chunk_rows or _threads() == 1:
        return np.clip(An @ Bn.T, -1.0, 1.0)
    out = np.empty((A.shape[0], B.shape[0]))

    def block(start):
        stop = min(start + chunk_rows, A.shape[0])
        out[start:stop] = np.clip(An[start:stop] @ Bn.T, -1.0, 1.0)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        list(pool.map(block, range(0, A.shape[0], chunk_rows)))
    return out


# ---------------------------------------------------------------------------
# embeddings


def check_embeddings(X, dim=None, name="embeddings"):
    """Validate an embedding matrix and return it as a 2-D float array."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise DimMismatch(f"{name} must be 2-D, got shape {X.shape}")
    if X.shape[0] > 0 and X.shape[1] == 0:
        raise DimMismatch(f"{name} has rows but dim 0")
    if dim is not None and X.shape[1] != dim:
        raise DimMismatch(f"{name} has dim {X.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{name} contains NaN or Inf")
    return X


def write_embeddings(matrix, path):
    X = check_embeddings(matrix)
    rows, dim = X.shape
    data = np.ascontiguousarray(X, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, dim, rows))
        fh.write(data.tobytes())


def read_embeddings(path, dim=None):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if len(raw) >= 4 and raw[:4] != EMBEDDING_MAGIC:
            raise BadMagic(f"{path}: bad magic {raw[:4]!r}")
        raise TruncatedFile(f"{path}: header needs {_HEADER.size} bytes, got {len(raw)}")
    magic, version, file_dim, rows = _HEADER.unpack_from(raw)
    if magic != EMBEDDING_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != EMBEDDING_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim is not None and file_dim != dim:
        raise DimMismatch(f"{path}: dim {file_dim}, expected {dim}")
    expected = _HEADER.size + 4 * rows * file_dim
    if len(raw) < expected:
        raise TruncatedFile(f"{path}: expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes")
    X = np.frombuffer(raw, dtype="<f4", count=rows * file_dim, offset=_HEADER.size)
    return X.reshape(rows, file_dim).astype(np.float32)


# ---------------------------------------------------------------------------
# manifests


class Source(enum.Enum):
    MULTI = "M"
    SINGLE = "S"


class Split(enum.Enum):
    TRAIN = "train"
    QUERY = "query"
    GALLERY = "gallery"


@dataclass(frozen=True)
class SampleRecord:
    sample_id: int
    pid: int
    source: Source
    context_id: int
    split: Split = Split.TRAIN

    @property
    def is_single(self):
        return self.source is Source.SINGLE


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable, validated list of sample records.

    Records are kept sorted by ``sample_id``; that order is also the row order
    of every embedding matrix paired with the manifest.
    """

    records: tuple = ()

    def __post_init__(self):
        recs = tuple(sorted(self.records, key=lambda r: r.sample_id))
        object.__setattr__(self, "records", recs)
        seen = set()
        for r in recs:
            if r.sample_id < 0:
                raise ValidationError(f"negative sample_id {r.sample_id}")
            if r.sample_id in seen:
                raise DuplicateSampleId(f"duplicate sample_id {r.sample_id}")
            seen.add(r.sample_id)
        videos = {}
        for r in recs:
            if r.source is Source.SINGLE:
                v = videos.setdefault(r.pid, r.context_id)
                if v != r.context_id:
                    raise CrossVideoPid(
                        f"single-camera pid {r.pid} appears in videos {v} and {r.context_id}"
                    )
        multi = {r.pid for r in recs if r.source is Source.MULTI}
        clash = multi & set(videos)
        if clash:
            raise ValidationError(
                f"pid {min(clash)} used by both multi- and single-camera records"
            )

    def __len__(self):
        return len(self.records)

    @property
    def sample_ids(self):
        return np.array([r.sample_id for r in self.records], dtype=np.int64)

    @property
    def pids(self):
        return np.array([r.pid for r in self.records], dtype=np.int64)

    def select(self, source=None, split=None):
        return DatasetManifest(
            tuple(
                r
                for r in self.records
                if (source is None or r.source is source)
                and (split is None or r.split is split)
            )
        )

    def without(self, sample_ids):
        drop = set(int(s) for s in sample_ids)
        return DatasetManifest(tuple(r for r in self.records if r.sample_id not in drop))

    def row_index(self):
        return {r.sample_id: i for i, r in enumerate(self.records)}

    def by_pid(self, source=None, split=None):
        """Map pid -> list of sample ids (ascending)."""
        groups = {}
        for r in self.records:
            if (source is None or r.source is source) and (split is None or r.split is split):
                groups.setdefault(r.pid, []).append(r.sample_id)
        return groups

    def video_of(self):
        return {r.pid: r.context_id for r in self.records if r.source is Source.SINGLE}

    @property
    def counts(self):
        m = [r for r in self.records if r.source is Source.MULTI]
        s = [r for r in self.records if r.source is Source.SINGLE]
        return {
            "N_m": len(m),
            "N_s": len(s),
            "M_m": len({r.pid for r in m}),
            "M_s": len({r.pid for r in s}),
            "K_m": len({r.context_id for r in m}),
        }


_COUNT_KEYS = ("N_m", "N_s", "M_m", "M_s", "K_m")


def write_manifest(manifest, path):
    c = manifest.counts
    lines = ["# mixpipe manifest", "# counts " + " ".join(f"{k}={c[k]}" for k in _COUNT_KEYS)]
    lines.append("# sample_id\tpid\tsource\tcontext_id\tsplit")
    for r in manifest.records:
        lines.append(f"{r.sample_id}\t{r.pid}\t{r.source.value}\t{r.context_id}\t{r.split.value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_int(tok, what, lineno):
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"bad {what} {tok!r}", lineno) from None


def parse_manifest(text):
    records = []
    declared = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped[1:].strip()
            if body.startswith("counts "):
                declared = {}
                for item in body[len("counts "):].split():
                    key, _, val = item.partition("=")
                    if key not in _COUNT_KEYS:
                        raise ParseError(f"unknown count {key!r}", lineno)
                    declared[key] = _parse_int(val, key, lineno)
            continue
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) != 5:
            raise ParseError(f"expected 5 tab-separated fields, got {len(parts)}", lineno)
        sid = _parse_int(parts[0], "sample_id", lineno)
        pid = _parse_int(parts[1], "pid", lineno)
        try:
            source = Source(parts[2])
        except ValueError:
            raise ParseError(f"bad source {parts[2]!r}", lineno) from None
        ctx = _parse_int(parts[3], "context_id", lineno)
        try:
            split = Split(parts[4])
        except ValueError:
            raise ParseError(f"bad split {parts[4]!r}", lineno) from None
        records.append(SampleRecord(sid, pid, source, ctx, split))
    manifest = DatasetManifest(tuple(records))
    if declared is not None:
        actual = manifest.counts
        for key, val in declared.items():
            if actual[key] != val:
                raise ParseError(f"header declares {key}={val} but records give {actual[key]}")
    return manifest


def read_manifest(path):
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


def embeddings_for(manifest, embeddings, sample_ids):
    """Rows of ``embeddings`` (aligned with ``manifest``) for ``sample_ids``."""
    index = manifest.row_index()
    return np.asarray(embeddings)[[index[int(s)] for s in sample_ids]]


# ---------------------------------------------------------------------------
# key = value files


def parse_kv(text, source="<text>"):
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ParseError(f"{source}: expected 'key = value'", lineno)
        key = key.strip()
        if key in out:
            raise ParseError(f"{source}: duplicate key {key!r}", lineno)
        out[key] = value.strip()
    return out


def format_kv(items: Mapping) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


class Strategy(enum.Enum):
    RANDOM = "random"
    HARD = "hard"
    SOFT = "soft"
    MEAN = "mean"
    MEDIAN = "median"


@dataclass(frozen=True)
class PipelineConfig:
    tau_rel: float = 0.6
    tau_remove: float = 0.5
    tau_merge: float = 0.8
    alpha: float = 0.3
    k_per_pid: int = 4
    lambda_momentum: float = 0.999
    n_p: int = 8
    n_k: int = 4
    queue_epochs: int = 30
    iterations_per_epoch: int = 400
    w_ins: float = 1.0
    w_aug: float = 1.0
    w_cen: float = 1.0
    w_cc: float = 0.5
    strategy: Strategy = Strategy.MEDIAN
    seed: int = 0
    # toy-scale training knobs
    epochs: int = 20
    d_out: int = 0  # 0 = same as input dim
    learning_rate: float = 0.05
    temperature: float = 0.1
    aug_sigma: float = 0.05
    encoder_init: str = "random"
    merge_before_ema: bool = False
    momentum_per_iteration: bool = True
    fresh_centroids: bool = False

    def __post_init__(self):
        if isinstance(self.strategy, str):
            object.__setattr__(self, "strategy", Strategy(self.strategy.lower()))
        self.validate()

    def validate(self):
        if not 0.0 <= self.tau_remove <= self.tau_rel <= 1.0:
            raise ConfigError("need 0 <= tau_remove <= tau_rel <= 1")
        if not -1.0 <= self.tau_merge <= 1.0:
            raise ConfigError("tau_merge must lie in [-1, 1]")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if not 0.0 <= self.lambda_momentum < 1.0:
            raise ConfigError("lambda_momentum must lie in [0, 1)")
        for name in ("n_p", "n_k", "k_per_pid"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("queue_epochs", "iterations_per_epoch", "epochs", "d_out", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.temperature <= 0 or self.aug_sigma < 0 or self.learning_rate < 0:
            raise ConfigError("temperature must be > 0; aug_sigma, learning_rate >= 0")
        if self.encoder_init not in ("random", "identity"):
            raise ConfigError("encoder_init must be 'random' or 'identity'")

    @property
    def loss_weights(self):
        return (self.w_ins, self.w_aug, self.w_cen, self.w_cc)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, enum.Enum) else v
        return out

    @classmethod
    def from_mapping(cls, values: Mapping):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, types[key], raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        return cls.from_mapping(parse_kv(Path(path).read_text(encoding="utf-8"), str(path)))

    def to_text(self):
        return format_kv({k: _fmt(v) for k, v in self.to_dict().items()})


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key, typ, raw):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "Strategy":
            return Strategy(raw.lower())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def group_rows(labels: Iterable[int]):
    """Map label -> array of row indices, labels in ascending order."""
    labels = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels)
    out = {}
    for lab in np.unique(labels):
        out[int(lab)] = np.flatnonzero(labels == lab)
    return out



STREAMS = ("gen", "relabel", "sampler", "train")


def rng_streams(seed):
    """Independent generators per pipeline stage, split from one seed in a fixed order."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}
