"""Toy encoder / momentum-encoder training loop over the mixed sampler."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    DimMismatch,
    PipelineConfig,
    Source,
    ValidationError,
    check_embeddings,
    read_embeddings,
    rng_streams,
    write_embeddings,
)
from .losses import (
    augmentation_loss,
    camera_centroids_loss,
    centroids_loss,
    instance_loss,
    total_loss,
)
from .relabel import run_relabeling_epoch
from .sampler import BatchSampler

log = logging.getLogger(__name__)

CURVE_HEADER = ("epoch", "iteration", "l_ins", "l_aug", "l_cen", "l_cc", "total")


class ShapeMismatch(ValidationError):
    code = "shape_mismatch"


@dataclass(frozen=True)
class EncoderParams:
    weights: np.ndarray  # d_out x d_in
    bias: np.ndarray  # d_out

    def __post_init__(self):
        W = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ShapeMismatch(f"weights {W.shape} and bias {b.shape} disagree")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValidationError("encoder parameters must be finite")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias", b)

    @property
    def d_in(self):
        return self.weights.shape[1]

    @property
    def d_out(self):
        return self.weights.shape[0]


def init_encoder(d_in, d_out, rng, kind="random"):
    if kind == "identity":
        return EncoderParams(np.eye(d_out, d_in), np.zeros(d_out))
    return EncoderParams(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in)), np.zeros(d_out))


def encode(params: EncoderParams, raw):
    X = check_embeddings(raw, name="raw features")
    if X.shape[1] != params.d_in:
        raise DimMismatch(f"raw dim {X.shape[1]} != encoder input dim {params.d_in}")
    return X.astype(np.float64) @ params.weights.T + params.bias


def momentum_update(theta_m: EncoderParams, theta_e: EncoderParams, lam):
    """theta_m <- lam * theta_m + (1 - lam) * theta_e, elementwise."""
    if theta_m.weights.shape != theta_e.weights.shape or theta_m.bias.shape != theta_e.bias.shape:
        raise ShapeMismatch("encoder shapes differ")
    if not 0.0 <= lam < 1.0:
        raise ValidationError(f"momentum must lie in [0, 1), got {lam}")
    return EncoderParams(
        lam * theta_m.weights + (1.0 - lam) * theta_e.weights,
        lam * theta_m.bias + (1.0 - lam) * theta_e.bias,
    )


def write_encoder(params: EncoderParams, path):
    """Rows: the d_in columns of the weight matrix, then the bias."""
    write_embeddings(np.vstack([params.weights.T, params.bias[None, :]]), path)


def read_encoder(path):
    M = read_embeddings(path).astype(np.float64)
    if M.shape[0] < 2:
        raise ShapeMismatch(f"{path}: encoder file needs at least 2 rows")
    return EncoderParams(M[:-1].T.copy(), M[-1].copy())


def batch_losses(E, E_aug, pids, cams, centroids, config):
    """All four losses and their weighted gradient w.r.t. ``E`` and ``E_aug``."""
    T = config.temperature
    l_ins, g_ins = instance_loss(E, pids, T)
    l_aug, g_aug, g_aug_view = augmentation_loss(E, E_aug, pids, T)
    l_cen, g_cen = centroids_loss(E, pids, centroids, T)
    l_cc, g_cc = camera_centroids_loss(E, pids, cams)
    w_ins, w_aug, w_cen, w_cc = config.loss_weights
    breakdown = total_loss(l_ins, l_aug, l_cen, l_cc, config.loss_weights)
    dE = w_ins * g_ins + w_aug * g_aug + w_cen * g_cen + w_cc * g_cc
    return breakdown, dE, w_aug * g_aug_view


@dataclass
class TrainResult:
    encoder: EncoderParams
    momentum_encoder: EncoderParams
    initial_momentum_encoder: EncoderParams
    reports: list = field(default_factory=list)
    loss_curve: list = field(default_factory=list)
    memory: object = None
    manifest: object = None


def run_training(manifest, raw, config: PipelineConfig, epochs=None, rngs=None):
    """Relabel -> sample -> step loop; returns both encoders, reports and the loss curve.

    Only training-split records take part. The momentum encoder embeds the
    relabeling subset and the multi-camera centroids.
    """
    raw = check_embeddings(raw, name="raw features")
    if raw.shape[0] != len(manifest):
        raise DimMismatch(f"{raw.shape[0]} raw rows for {len(manifest)} records")
    epochs = config.epochs if epochs is None else epochs
    rngs = rngs or rng_streams(config.seed)
    d_out = config.d_out or raw.shape[1]
    theta_e = init_encoder(raw.shape[1], d_out, rngs["train"], config.encoder_init)
    theta_m = theta_e
    initial = theta_m
    sampler = BatchSampler(config, rngs["sampler"])
    index = manifest.row_index()
    memory = None
    reports = []
    curve = []

    for epoch in range(epochs):
        manifest, memory, report = run_relabeling_epoch(
            manifest, raw, memory, config, rngs["relabel"],
            embed=lambda R, m=theta_m: encode(m, R), epoch=epoch,
        )
        reports.append(report)
        sampler.start_epoch(manifest, encode(theta_m, raw), memory, report.removed_ids)
        records = {r.sample_id: r for r in manifest.records}
        for it in range(config.iterations_per_epoch):
            plan = sampler.next_batch()
            rows = [index[s] for s in plan.sample_ids]
            X = raw[rows].astype(np.float64)
            pids = np.array([records[s].pid for s in plan.sample_ids])
            cams = np.array(
                [records[s].context_id if records[s].source is Source.MULTI else -1
                 for s in plan.sample_ids]
            )
            X_aug = X + rngs["train"].normal(0.0, config.aug_sigma, size=X.shape)
            centroids = dict(sampler.multi_centroids)
            centroids.update(sampler.memory.entries)
            losses, dE, dA = batch_losses(
                encode(theta_e, X), encode(theta_e, X_aug), pids, cams, centroids, config
            )
            grad_W = dE.T @ X + dA.T @ X_aug
            grad_b = dE.sum(axis=0) + dA.sum(axis=0)
            theta_e = EncoderParams(
                theta_e.weights - config.learning_rate * grad_W,
                theta_e.bias - config.learning_rate * grad_b,
            )
            if config.momentum_per_iteration:
                theta_m = momentum_update(theta_m, theta_e, config.lambda_momentum)
            if config.fresh_centroids:
                sampler.refresh_multi_centroids(encode(theta_m, raw))
            curve.append((epoch, it, losses.l_ins, losses.l_aug, losses.l_cen, losses.l_cc, losses.total))
        if not config.momentum_per_iteration and config.iterations_per_epoch:
            theta_m = momentum_update(theta_m, theta_e, config.lambda_momentum)
        if curve:
            log.info("epoch %d: loss %.4f", epoch, curve[-1][-1])

    return TrainResult(theta_e, theta_m, initial, reports, curve, memory, manifest)


def format_curve(curve):
    lines = ["\t".join(CURVE_HEADER)]
    for row in curve:
        lines.append("\t".join([str(row[0]), str(row[1])] + [repr(float(v)) for v in row[2:]]))
    return "\n".join(lines) + "\n"


def write_curve(curve, path):
    Path(path).write_text(format_curve(curve), encoding="utf-8")

