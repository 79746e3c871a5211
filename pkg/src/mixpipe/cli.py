"""Command-line entry point: ``mixpipe <subcommand> [options]``.

Every run writes ``run.meta`` into its output directory; ``mixpipe replay
run.meta --out DIR`` re-executes it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .centroids import ema_update, group_means, initialize_centroids, read_memory, recompute_full, write_memory
from .core import (
    MixpipeError,
    PipelineConfig,
    Source,
    Split,
    Strategy,
    ValidationError,
    embeddings_for,
    format_kv,
    parse_kv,
    read_embeddings,
    read_manifest,
    rng_streams,
    write_embeddings,
    write_manifest,
)
from .evaluation import evaluate_manifest
from .relabel import run_relabeling_epoch, select_epoch_subset, write_report
from .sampler import BatchSampler, write_plans
from .synth import SynthSpec, generate, write_ground_truth
from .trainloop import encode, read_encoder, run_training, write_curve, write_encoder

log = logging.getLogger("mixpipe")

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4

SUBCOMMANDS = ("gen", "relabel", "centroids", "sample", "train", "eval", "bench")
INPUT_ARGS = ("spec", "config", "manifest", "features", "memory", "encoder")


class UsageError(MixpipeError):
    code = "usage_error"
    exit_code = EXIT_USAGE


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"usage_error: {message}\n")


def _common(p, out=True):
    p.add_argument("--config", type=Path, help="key = value pipeline config")
    p.add_argument("--seed", type=int, help="override the config seed")
    if out:
        p.add_argument("--out", "--out-dir", dest="out", type=Path, default=Path("."))
    p.add_argument("--quiet", action="store_true")


def _data(p, memory=False, encoder=True):
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True, help="raw feature / embedding file")
    if encoder:
        p.add_argument("--encoder", type=Path, help="encoder file; rows are embedded with it")
    if memory:
        p.add_argument("--memory", type=Path, help="centroid memory file (.pids sidecar alongside)")


def build_parser():
    parser = _Parser(prog="mixpipe", description="mixed-data pseudo-label pipeline")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic noisy dataset")
    p.add_argument("--spec", type=Path, help="key = value SynthSpec file")
    _common(p)

    p = sub.add_parser("relabel", help="run one refinement epoch")
    _data(p, memory=True)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--k", type=int, help="images per pid in the epoch subset")
    _common(p)

    p = sub.add_parser("centroids", help="build or EMA-update the centroid memory")
    _data(p, memory=True)
    p.add_argument("--k", type=int, help="use a K-image subset per pid instead of all images")
    _common(p)

    p = sub.add_parser("sample", help="emit mixed mini-batch plans")
    _data(p, memory=True)
    p.add_argument("--strategy", choices=[s.value for s in Strategy])
    p.add_argument("--iterations", type=int)
    p.add_argument("--fresh-centroids", action="store_true")
    _common(p)

    p = sub.add_parser("train", help="train the toy encoder")
    _data(p, encoder=False)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--strategy", choices=[s.value for s in Strategy])
    _common(p)

    p = sub.add_parser("eval", help="Rank-k / mAP on the query and gallery splits")
    _data(p)
    _common(p)

    p = sub.add_parser("bench", help="embedding-op counts: K-subset vs naive")
    _data(p)
    p.add_argument("--k", default="2,4,8", help="comma-separated K values")
    _common(p)

    p = sub.add_parser("replay", help="re-run a recorded run.meta")
    p.add_argument("meta", type=Path)
    p.add_argument("--out", "--out-dir", dest="out", type=Path, default=Path("."))
    p.add_argument("--quiet", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# config resolution and run.meta


def resolve_config(args):
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "strategy", None):
        changes["strategy"] = Strategy(args.strategy)
    if getattr(args, "iterations", None) is not None:
        changes["iterations_per_epoch"] = args.iterations
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    if getattr(args, "k", None) is not None and args.subcommand == "relabel":
        changes["k_per_pid"] = args.k
    if getattr(args, "fresh_centroids", False):
        changes["fresh_centroids"] = True
    return cfg.replace(**changes) if changes else cfg


def resolve_spec(args):
    spec = SynthSpec.from_file(args.spec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec = SynthSpec(**{**spec.__dict__, "seed": args.seed})
    return spec


def _meta_args(args):
    out = {}
    for key, val in sorted(vars(args).items()):
        if key in ("out", "quiet", "func"):
            continue
        if isinstance(val, Path):
            val = str(val.resolve())
        out[key] = val
    return out


def write_meta(out_dir, args, config=None, spec=None):
    items = {"subcommand": args.subcommand, "args": json.dumps(_meta_args(args), sort_keys=True)}
    if config is not None:
        items["seed"] = config.seed
        for k, v in PipelineConfig.to_dict(config).items():
            items[f"config.{k}"] = str(v).lower() if isinstance(v, bool) else v
    if spec is not None:
        items["seed"] = spec.seed
        for k, v in spec.__dict__.items():
            items[f"spec.{k}"] = v
    (out_dir / "run.meta").write_text("# mixpipe run.meta\n" + format_kv(items), encoding="utf-8")


def read_meta(path):
    kv = parse_kv(Path(path).read_text(encoding="utf-8"), str(path))
    try:
        sub = kv["subcommand"]
        ns = json.loads(kv["args"])
    except (KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: malformed run.meta ({exc})") from None
    for key in INPUT_ARGS:
        if ns.get(key) is not None:
            ns[key] = Path(ns[key])
    args = argparse.Namespace(**ns)
    config = spec = None
    cfg = {k[len("config."):]: v for k, v in kv.items() if k.startswith("config.")}
    if cfg:
        config = PipelineConfig.from_mapping(cfg)
    sp = {k[len("spec."):]: v for k, v in kv.items() if k.startswith("spec.")}
    if sp:
        types = {k: type(v) for k, v in SynthSpec().__dict__.items()}
        spec = SynthSpec(**{k: types[k](v) for k, v in sp.items()})
    return sub, args, config, spec


# ---------------------------------------------------------------------------
# subcommands


def _load(args):
    manifest = read_manifest(args.manifest)
    X = read_embeddings(args.features)
    if X.shape[0] != len(manifest):
        raise ValidationError(f"{args.features}: {X.shape[0]} rows for {len(manifest)} records")
    encoder = read_encoder(args.encoder) if getattr(args, "encoder", None) else None
    return manifest, X, encoder


def _embed_fn(encoder):
    return (lambda R: encode(encoder, R)) if encoder is not None else None


def cmd_gen(args, out, config=None, spec=None):
    spec = spec or resolve_spec(args)
    manifest, raw, gt = generate(spec)
    write_manifest(manifest, out / "manifest.tsv")
    write_embeddings(raw, out / "raw.bin")
    write_ground_truth(gt, out / "truth.tsv")
    (out / "spec.cfg").write_text(spec.to_text(), encoding="utf-8")
    write_meta(out, args, spec=spec)
    log.info("generated %d samples (%s)", len(manifest), manifest.counts)


def cmd_relabel(args, out, config=None, spec=None):
    config = config or resolve_config(args)
    manifest, X, encoder = _load(args)
    memory = read_memory(args.memory) if args.memory else None
    rng = rng_streams(config.seed)["relabel"]
    refined, memory, report = run_relabeling_epoch(
        manifest, X, memory, config, rng, embed=_embed_fn(encoder), epoch=args.epoch
    )
    write_manifest(refined, out / "manifest.tsv")
    write_memory(memory, out / "memory.bin")
    write_report(report, out / "report.txt")
    write_meta(out, args, config=config)
    log.info(
        "removed %d, relabeled %d, kept %d; pids %d -> %d",
        report.n_removed, report.n_relabeled, report.n_kept, report.pids_before, report.pids_after,
    )


def cmd_centroids(args, out, config=None, spec=None):
    config = config or resolve_config(args)
    manifest, X, encoder = _load(args)
    train = manifest.select(split=Split.TRAIN)
    single = train.select(source=Source.SINGLE)
    rows = embeddings_for(manifest, X, single.sample_ids)
    if encoder is not None:
        rows = encode(encoder, rows)
    if args.k is None:
        memory = recompute_full(single, rows)
    else:
        rng = rng_streams(config.seed)["relabel"]
        subset = select_epoch_subset(single, args.k, rng)
        ids = [s for pid in sorted(subset) for s in subset[pid]]
        labels = np.array([pid for pid in sorted(subset) for _ in subset[pid]])
        sub_rows = embeddings_for(single, rows, ids)
        if args.memory:
            memory = ema_update(read_memory(args.memory), group_means(sub_rows, labels), config.alpha)
        else:
            memory = initialize_centroids(sub_rows, labels)
    write_memory(memory, out / "memory.bin")
    write_meta(out, args, config=config)


def cmd_sample(args, out, config=None, spec=None):
    config = config or resolve_config(args)
    manifest, X, encoder = _load(args)
    emb = encode(encoder, X) if encoder is not None else X
    if args.memory:
        memory = read_memory(args.memory)
    else:
        single = manifest.select(source=Source.SINGLE, split=Split.TRAIN)
        memory = recompute_full(single, embeddings_for(manifest, emb, single.sample_ids))
    sampler = BatchSampler(config, rng_streams(config.seed)["sampler"])
    sampler.start_epoch(manifest, emb, memory)
    plans = [sampler.next_batch() for _ in range(config.iterations_per_epoch)]
    write_plans(plans, out / "plans.txt")
    write_meta(out, args, config=config)


def cmd_train(args, out, config=None, spec=None):
    config = config or resolve_config(args)
    manifest, X, _ = _load(args)
    result = run_training(manifest, X, config)
    write_encoder(result.encoder, out / "encoder.bin")
    write_encoder(result.momentum_encoder, out / "momentum_encoder.bin")
    write_curve(result.loss_curve, out / "loss_curve.tsv")
    reports = out / "reports"
    reports.mkdir(exist_ok=True)
    for r in result.reports:
        write_report(r, reports / f"epoch_{r.epoch:03d}.txt")
    if result.memory is not None:
        write_memory(result.memory, out / "memory.bin")
        write_manifest(result.manifest, out / "manifest.tsv")
    write_meta(out, args, config=config)


def cmd_eval(args, out, config=None, spec=None):
    config = config or resolve_config(args)
    manifest, X, encoder = _load(args)
    emb = encode(encoder, X) if encoder is not None else X
    result = evaluate_manifest(manifest, emb)
    line = result.as_row()
    print(line)
    if not args.quiet:
        print(result.describe(), end="")
    (out / "eval.tsv").write_text("rank1\trank5\trank10\tmAP\tn_queries\n" + line + "\n", encoding="utf-8")
    write_meta(out, args, config=config)


def cmd_bench(args, out, config=None, spec=None):
    config = config or resolve_config(args)
    manifest, X, encoder = _load(args)
    try:
        ks = [int(k) for k in str(args.k).split(",") if k]
    except ValueError:
        raise UsageError(f"--k must be comma-separated integers, got {args.k!r}") from None
    rows = bench_mod.bench_centroids(
        manifest, X, ks, rng_streams(config.seed)["relabel"], embed=_embed_fn(encoder)
    )
    text = bench_mod.format_bench(rows)
    print(text, end="")
    (out / "bench.tsv").write_text(text, encoding="utf-8")
    write_meta(out, args, config=config)


HANDLERS = {
    "gen": cmd_gen,
    "relabel": cmd_relabel,
    "centroids": cmd_centroids,
    "sample": cmd_sample,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def _check_inputs(args):
    for key in INPUT_ARGS:
        path = getattr(args, key, None)
        if path is not None and not Path(path).exists():
            raise FileNotFoundError(f"input file not found: {path}")


def dispatch(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = spec = None
        out = args.out
        if args.subcommand == "replay":
            sub, args, config, spec = read_meta(args.meta)
            args.out, args.quiet = out, False
        else:
            sub = args.subcommand
        _check_inputs(args)
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[sub](args, out, config=config, spec=spec)
    except MixpipeError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"io_error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
