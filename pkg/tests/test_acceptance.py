"""Acceptance criteria 1-11, each reported as a single PASS/FAIL line."""

import time

import numpy as np
import pytest

from mixpipe.bench import bench_centroids
from mixpipe.centroids import CentroidsMemory, ema_update, initialize_centroids, recompute_full
from mixpipe.cli import dispatch
from mixpipe.core import PipelineConfig, Source, Split, Strategy, embeddings_for, rng_streams
from mixpipe.evaluation import evaluate_manifest
from mixpipe.losses import augmentation_loss, camera_centroids_loss, centroids_loss, instance_loss
from mixpipe.relabel import run_relabeling_epoch
from mixpipe.sampler import (
    BatchSampler,
    ExclusionQueue,
    hungarian_assign,
    plan_violations,
    queue_capacity,
    strategy_cost,
)
from mixpipe.synth import SynthSpec, generate, nearest_anchor, score_partition
from mixpipe.trainloop import EncoderParams, encode, momentum_update, run_training
from oracles import finite_difference, relative_error, subset_dp_minimum
from report import verdict


def test_c01_hungarian_matches_brute_force():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    mismatches = 0
    trials = 1000
    for t in range(trials):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(n, 11))
        # dyadic costs keep every partial sum exact, so totals compare with ==
        if t % 2:
            cost = rng.integers(0, 2**20, size=(n, m)) / 2.0**20
        else:
            cost = rng.integers(0, 4, size=(n, m)).astype(float)
        cols, total = hungarian_assign(cost)
        assert len(set(cols.tolist())) == n
        if total != subset_dp_minimum(cost):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    verdict(1, "Hungarian total == brute-force minimum", mismatches == 0 and elapsed < 10,
            f"{trials} matrices, {mismatches} mismatches, {elapsed:.2f}s")


def test_c02_ema_closed_form_and_alpha_zero():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 16))
        pids = rng.choice(1000, size=int(rng.integers(1, 8)), replace=False)
        mem = CentroidsMemory(d, {int(p): rng.normal(size=d) for p in pids})
        alpha = float(rng.random())
        means = {int(p): rng.normal(size=d) for p in pids if rng.random() < 0.7}
        out = ema_update(mem, means, alpha)
        for p in mem.pids:
            expect = alpha * mem[p] + (1 - alpha) * means[p] if p in means else mem[p]
            worst = max(worst, float(np.max(np.abs(out[p] - expect))))

    spec = SynthSpec(num_multicam_pids=0, num_singlecam_pids=20, images_per_pid=6, dim_raw=16, seed=2)
    manifest, raw, _ = generate(spec)
    single = manifest.select(source=Source.SINGLE)
    X = embeddings_for(manifest, raw, single.sample_ids).astype(np.float64)
    labels = [r.pid for r in single.records]
    stale = initialize_centroids(rng.normal(size=X.shape), labels)
    from mixpipe.centroids import group_means

    updated = ema_update(stale, group_means(X, labels), 0.0)
    full = recompute_full(single, X)
    rel = max(
        np.linalg.norm(updated[p] - full[p]) / np.linalg.norm(full[p]) for p in full.pids
    )
    verdict(2, "EMA closed form and alpha=0 == full recompute", worst <= 1e-6 and rel <= 1e-5,
            f"max abs err {worst:.1e}, alpha=0 rel err {rel:.1e}")


def test_c03_relabeling_on_separable_data():
    t0 = time.perf_counter()
    spec = SynthSpec(num_multicam_pids=8, num_singlecam_pids=60, images_per_pid=12, dim_raw=64,
                     intra_noise_sigma=0.03, frag_rate=0.1, mislabel_rate=0.01, junk_rate=0.015,
                     seed=0)
    manifest, raw, gt = generate(spec)
    ids = [s for s, p in gt.true_pid.items() if p >= 0 and p >= spec.num_multicam_pids]
    X = raw[[manifest.row_index()[s] for s in ids]].astype(np.float64)
    t = np.array([gt.true_pid[s] for s in ids])
    S = X @ X.T
    same = t[:, None] == t[None, :]
    A = gt.anchors[spec.num_multicam_pids:]
    inter = A @ A.T
    np.fill_diagonal(inter, -1)
    separable = S[same].min() > 0.9 and inter.max() < 0.3

    # K covers every image, so every junk sample is seen in the first epoch
    config = PipelineConfig(tau_rel=0.6, tau_remove=0.5, tau_merge=0.8, k_per_pid=64)
    res = run_relabeling_epoch(manifest, raw, None, config, np.random.default_rng(0))
    removed = set(res.report.removed_ids)
    pred = {r.sample_id: r.pid for r in res.manifest.records
            if r.source is Source.SINGLE and r.sample_id not in removed}
    _, _, f1 = score_partition(pred, gt)
    delta = res.report.pids_before - res.report.pids_after
    surplus = len(gt.fragment_map)
    elapsed = time.perf_counter() - t0
    ok = (separable and f1 == 1.0 and len(removed) == len(gt.junk_ids)
          and removed == set(gt.junk_ids) and delta == surplus and elapsed < 30
          and len(gt.mislabel_set) > 0)
    verdict(3, "one epoch repairs junk, mislabels and fragments", ok,
            f"F1={f1:.3f}, removed {len(removed)}/{len(gt.junk_ids)} junk, "
            f"pid delta {delta} vs surplus {surplus}, {elapsed:.2f}s")


@pytest.fixture(scope="module")
def batch_data():
    spec = SynthSpec(num_multicam_pids=20, num_singlecam_pids=60, images_per_pid=8,
                     num_cameras=4, dim_raw=32, seed=4)
    manifest, raw, _ = generate(spec)
    single = manifest.by_pid(source=Source.SINGLE, split=Split.TRAIN)
    idx = manifest.row_index()
    memory = CentroidsMemory(raw.shape[1], {
        p: raw[[idx[s] for s in ids]].astype(np.float64).mean(axis=0) for p, ids in single.items()
    })
    return manifest, raw.astype(np.float64), memory


def test_c04_batch_shape_invariants(batch_data):
    manifest, raw, memory = batch_data
    config = PipelineConfig(n_p=8, n_k=4, iterations_per_epoch=100)
    sampler = BatchSampler(config, np.random.default_rng(5))
    violations = []
    sizes = set()
    for epoch in range(10):
        sampler.start_epoch(manifest, raw, memory)
        for _ in range(100):
            plan = sampler.next_batch()
            sizes.add(len(plan))
            violations += plan_violations(plan, manifest, 8, 4)
    verdict(4, "1000 batches of 64 with 8+8 pids and full camera spread",
            not violations and sizes == {64}, f"{len(violations)} violations, sizes {sorted(sizes)}")


def test_c05_queue_exclusion_window(batch_data):
    manifest, raw, memory = batch_data
    config = PipelineConfig(n_p=8, n_k=4, iterations_per_epoch=5, queue_epochs=30)
    capacity = queue_capacity(30, 5, 8, len(memory))
    sampler = BatchSampler(config, np.random.default_rng(6))
    last = {}
    pushes = 0
    violations = 0
    for epoch in range(30):
        sampler.start_epoch(manifest, raw, memory)
        for _ in range(config.iterations_per_epoch):
            plan = sampler.next_batch()
            start = pushes
            for pair in plan.pairs:
                p = pair.single_pid
                # still inside the window if fewer than `capacity` pushes followed it
                if p in last and start - last[p] <= capacity:
                    violations += 1
                last[p] = pushes
                pushes += 1
    verdict(5, "no single-camera pid recurs inside the queue window", violations == 0 and capacity > 0,
            f"capacity {capacity}, {pushes} pushes over 30 epochs, {violations} violations")


def test_c06_strategy_ordering(batch_data):
    manifest, raw, memory = batch_data
    rng = np.random.default_rng(7)
    multi = manifest.by_pid(source=Source.MULTI, split=Split.TRAIN)
    idx = manifest.row_index()
    cents = np.array([raw[[idx[s] for s in multi[p]]].mean(axis=0) for p in sorted(multi)])
    C = memory.matrix()
    order_violations = 0
    dev = {Strategy.MEDIAN: [], Strategy.RANDOM: []}
    iterations = 200
    for _ in range(iterations):
        rows = rng.choice(len(cents), size=8, replace=False)
        cols = rng.choice(len(C), size=40, replace=False)
        A = cents[rows] / np.linalg.norm(cents[rows], axis=1, keepdims=True)
        B = C[cols] / np.linalg.norm(C[cols], axis=1, keepdims=True)
        S = A @ B.T
        totals = {}
        for strat in Strategy:
            chosen, _ = hungarian_assign(strategy_cost(S, strat, rng))
            sims = S[np.arange(8), chosen]
            totals[strat] = sims.sum()
            if strat in dev:
                dev[strat].append(np.abs(sims - np.median(S)).mean())
        lo, hi = totals[Strategy.SOFT] - 1e-12, totals[Strategy.HARD] + 1e-12
        for strat in (Strategy.RANDOM, Strategy.MEAN, Strategy.MEDIAN):
            if not lo <= totals[strat] <= hi:
                order_violations += 1
    med, rnd = np.mean(dev[Strategy.MEDIAN]), np.mean(dev[Strategy.RANDOM])
    verdict(6, "Soft <= Random/Mean/Median <= Hard; Median nearest the median",
            order_violations == 0 and med <= rnd,
            f"{iterations} iterations, {order_violations} ordering violations, "
            f"median dev {med:.4f} vs random {rnd:.4f}")


def test_c07_gradient_checks():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        n_pid, k, d = int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(3, 7))
        pids = np.repeat(np.arange(n_pid) * 7 + 3, k)
        cams = np.tile(np.arange(k), n_pid)
        cams[:k] = -1 if rng.random() < 0.3 else cams[:k]
        E = rng.normal(size=(len(pids), d))
        E_aug = E + 0.3 * rng.normal(size=E.shape)
        cents = {int(p): rng.normal(size=d) for p in np.unique(pids)}
        cents[999] = rng.normal(size=d)

        _, g = instance_loss(E, pids)
        worst = max(worst, relative_error(g, finite_difference(lambda Z: instance_loss(Z, pids)[0], E)))
        _, gE, gA = augmentation_loss(E, E_aug, pids)
        worst = max(worst, relative_error(gE, finite_difference(lambda Z: augmentation_loss(Z, E_aug, pids)[0], E)))
        worst = max(worst, relative_error(gA, finite_difference(lambda Z: augmentation_loss(E, Z, pids)[0], E_aug)))
        _, g = centroids_loss(E, pids, cents)
        worst = max(worst, relative_error(g, finite_difference(lambda Z: centroids_loss(Z, pids, cents)[0], E)))
        _, g = camera_centroids_loss(E, pids, cams)
        fd = finite_difference(lambda Z: camera_centroids_loss(Z, pids, cams)[0], E)
        worst = max(worst, relative_error(g, fd))
    verdict(7, "analytic loss gradients match central differences", worst <= 1e-4,
            f"50 batches, worst relative error {worst:.1e}")


def test_c08_momentum_contraction():
    rng = np.random.default_rng(9)
    theta_e = EncoderParams(rng.normal(size=(5, 7)), rng.normal(size=5))
    theta_m = EncoderParams(rng.normal(size=(5, 7)), rng.normal(size=5))

    def dist(a, b):
        return np.sqrt(np.sum((a.weights - b.weights) ** 2) + np.sum((a.bias - b.bias) ** 2))

    worst = 0.0
    prev = dist(theta_m, theta_e)
    for _ in range(10):
        theta_m = momentum_update(theta_m, theta_e, 0.999)
        cur = dist(theta_m, theta_e)
        worst = max(worst, abs(cur / prev - 0.999))
        prev = cur
    verdict(8, "momentum gap contracts by 0.999 per step", worst <= 1e-9,
            f"worst ratio error {worst:.1e}")


@pytest.mark.slow
def test_c10_training_improves_rank1():
    t0 = time.perf_counter()
    spec = SynthSpec(num_multicam_pids=20, num_singlecam_pids=40, num_eval_pids=60,
                     images_per_pid=8, dim_raw=64, anchor_rank=32, intra_noise_sigma=0.15,
                     min_inter_angle_cos=0.3, seed=4)
    manifest, raw, gt = generate(spec)
    separable = float(np.mean(nearest_anchor(raw, gt) == [gt.true_pid[s] for s in manifest.sample_ids]))
    config = PipelineConfig(iterations_per_epoch=400, epochs=20, seed=3)
    result = run_training(manifest, raw, config)
    before = evaluate_manifest(manifest, encode(result.initial_momentum_encoder, raw)).rank1
    after = evaluate_manifest(manifest, encode(result.momentum_encoder, raw)).rank1
    elapsed = time.perf_counter() - t0
    verdict(10, "20 epochs raise momentum-encoder Rank-1", separable == 1.0 and after > before and elapsed < 300,
            f"Rank-1 {before:.3f} -> {after:.3f}, {elapsed:.1f}s")


def test_c09_subset_embedding_ratio():
    spec = SynthSpec(num_multicam_pids=0, num_singlecam_pids=30, images_per_pid=24, dim_raw=16, seed=10)
    manifest, raw, _ = generate(spec)
    rows = {r.label: r for r in bench_centroids(manifest, raw, [2, 4, 8], np.random.default_rng(0))}
    ratio = rows["naive"].embeddings_per_epoch / rows["K=4"].embeddings_per_epoch
    counts = [rows[f"K={k}"].embeddings_per_epoch for k in (2, 4, 8)]
    linear = counts[1] == 2 * counts[0] and counts[2] == 4 * counts[0]
    verdict(9, "naive / K=4 embedding ratio is 6 and counts scale with K", ratio == 6.0 and linear,
            f"ratio {ratio}, counts K=2,4,8: {counts}")


def test_c11_replay_is_byte_identical(tmp_path):
    data = tmp_path / "data"
    spec_file = tmp_path / "spec.cfg"
    spec_file.write_text("num_multicam_pids = 10\nnum_singlecam_pids = 20\nnum_eval_pids = 6\n"
                         "dim_raw = 16\nfrag_rate = 0.1\njunk_rate = 0.02\nseed = 5\n")
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 2\niterations_per_epoch = 5\nn_p = 4\nn_k = 2\nseed = 9\n")
    assert dispatch(["gen", "--spec", str(spec_file), "--out", str(data), "--quiet"]) == 0
    first = tmp_path / "first"
    assert dispatch(["train", "--config", str(cfg), "--manifest", str(data / "manifest.tsv"),
                     "--features", str(data / "raw.bin"), "--out", str(first), "--quiet"]) == 0
    outputs = []
    for name in ("second", "third"):
        out = tmp_path / name
        assert dispatch(["replay", str(first / "run.meta"), "--out", str(out)]) == 0
        outputs.append(out)
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    differing = [
        str(f) for f in files for out in outputs
        if not (out / f).is_file() or (out / f).read_bytes() != (first / f).read_bytes()
    ]
    extra = [
        str(p.relative_to(out)) for out in outputs for p in out.rglob("*")
        if p.is_file() and p.relative_to(out) not in files
    ]
    verdict(11, "replaying run.meta reproduces every file byte for byte",
            len(files) > 3 and not differing and not extra,
            f"{len(files)} files compared across 3 runs, {len(differing)} differ")
