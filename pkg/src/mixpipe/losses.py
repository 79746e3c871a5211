"""Reference forms of the four training losses, with analytic gradients.

All losses operate on L2-normalised embeddings; gradients are returned with
respect to the unnormalised inputs. Each function returns ``(loss, grad...)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ValidationError, check_embeddings
from .relabel import MissingCentroid


class DegenerateBatch(ValidationError):
    code = "degenerate_batch"


def _normalize(E):
    E = np.asarray(E, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DegenerateBatch("batch contains a zero-norm embedding")
    Z = E / norms

    def backward(G):
        return (G - np.sum(G * Z, axis=1, keepdims=True) * Z) / norms

    return Z, backward


def _log_softmax(logits):
    shift = logits - logits.max(axis=1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))


def _check_batch(E, pids, min_per_pid):
    E = check_embeddings(E)
    pids = np.asarray(pids)
    if pids.shape[0] != E.shape[0]:
        raise DegenerateBatch(f"{pids.shape[0]} labels for {E.shape[0]} rows")
    uniq, counts = np.unique(pids, return_counts=True)
    if uniq.size < 2:
        raise DegenerateBatch("batch needs at least two pids")
    if counts.min() < min_per_pid:
        raise DegenerateBatch(f"every pid needs at least {min_per_pid} samples")
    return E, pids


def instance_loss(E, pids, temperature=0.1):
    """Supervised contrastive loss: every same-pid row is a positive."""
    E, pids = _check_batch(E, pids, 2)
    n = E.shape[0]
    Z, back = _normalize(E)
    logits = Z @ Z.T / temperature
    eye = np.eye(n, dtype=bool)
    logits[eye] = -np.inf
    logp = _log_softmax(logits)
    pos = (pids[:, None] == pids[None, :]) & ~eye
    n_pos = pos.sum(axis=1)
    loss = -np.sum(np.where(pos, logp, 0.0), axis=1) / n_pos
    prob = np.exp(logp)
    G = (prob - pos / n_pos[:, None]) / n
    G[eye] = 0.0
    dZ = (G + G.T) @ Z / temperature
    return float(loss.mean()), back(dZ)


def augmentation_loss(E, E_aug, pids, temperature=0.1):
    """Each row must pick out its own augmented view among the augmented
    views of other identities. Returns ``(loss, grad_E, grad_E_aug)``."""
    E, pids = _check_batch(E, pids, 1)
    E_aug = check_embeddings(E_aug, dim=E.shape[1], name="augmented embeddings")
    if E_aug.shape[0] != E.shape[0]:
        raise DegenerateBatch("augmented batch has a different row count")
    n = E.shape[0]
    Z, back_z = _normalize(E)
    A, back_a = _normalize(E_aug)
    eye = np.eye(n, dtype=bool)
    allowed = (pids[:, None] != pids[None, :]) | eye
    logits = np.where(allowed, Z @ A.T / temperature, -np.inf)
    logp = _log_softmax(logits)
    loss = -np.mean(np.diag(logp))
    G = (np.exp(logp) - eye) / n
    dZ = G @ A / temperature
    dA = G.T @ Z / temperature
    return float(loss), back_z(dZ), back_a(dA)


def centroids_loss(E, pids, centroids, temperature=0.1):
    """Softmax over the centroids of the pids present in the batch.

    ``centroids`` maps pid -> vector (a :class:`CentroidsMemory` works).
    """
    E, pids = _check_batch(E, pids, 1)
    batch_pids = np.unique(pids)
    for p in batch_pids:
        if int(p) not in centroids:
            raise MissingCentroid(int(p))
    C = np.vstack([np.asarray(centroids[int(p)], dtype=np.float64) for p in batch_pids])
    if C.shape[1] != E.shape[1]:
        raise DegenerateBatch(f"centroid dim {C.shape[1]} != embedding dim {E.shape[1]}")
    C = C / np.linalg.norm(C, axis=1, keepdims=True)
    n = E.shape[0]
    Z, back = _normalize(E)
    target = np.searchsorted(batch_pids, pids)
    logp = _log_softmax(Z @ C.T / temperature)
    loss = -np.mean(logp[np.arange(n), target])
    G = np.exp(logp)
    G[np.arange(n), target] -= 1.0
    dZ = G @ C / temperature / n
    return float(loss), back(dZ)


def camera_centroids_loss(E, pids, camera_ids):
    """Pull each instance toward its pid's centroids on the other cameras.

    Centroids are per-(pid, camera) means of the batch's normalised
    embeddings; the loss is the mean of ``1 - cos`` over (instance,
    other-camera centroid) pairs. Rows with a negative camera id (single-camera
    data) are ignored, as are pids seen on one camera only.
    """
    E = check_embeddings(E)
    pids = np.asarray(pids)
    cams = np.asarray(camera_ids)
    if not (pids.shape[0] == cams.shape[0] == E.shape[0]):
        raise DegenerateBatch("labels, cameras and rows disagree in length")
    grad = np.zeros_like(E, dtype=np.float64)
    valid = cams >= 0
    if not valid.any():
        return 0.0, grad
    Z, back = _normalize(E)

    groups = {}
    for i in np.flatnonzero(valid):
        groups.setdefault((int(pids[i]), int(cams[i])), []).append(i)
    terms = []  # (instance row, group key)
    for i in np.flatnonzero(valid):
        for (p, c) in groups:
            if p == pids[i] and c != cams[i]:
                terms.append((i, (p, c)))
    if not terms:
        return 0.0, grad
    n_terms = len(terms)

    units = {}
    norms = {}
    for key, members in groups.items():
        C = Z[members].mean(axis=0)
        norms[key] = np.linalg.norm(C)
        units[key] = C / norms[key]

    loss = 0.0
    dZ = np.zeros_like(Z)
    d_unit = {key: np.zeros(Z.shape[1]) for key in groups}
    for i, key in terms:
        u = units[key]
        loss += 1.0 - Z[i] @ u
        dZ[i] -= u / n_terms
        d_unit[key] -= Z[i] / n_terms
    for key, members in groups.items():
        g = d_unit[key]
        if not g.any():
            continue
        u = units[key]
        dC = (g - (g @ u) * u) / norms[key]
        dZ[members] += dC / len(members)
    return float(loss / n_terms), back(dZ)


@dataclass(frozen=True)
class LossBreakdown:
    l_ins: float
    l_aug: float
    l_cen: float
    l_cc: float
    total: float


def total_loss(l_ins, l_aug, l_cen, l_cc, weights=(1.0, 1.0, 1.0, 0.5)):
    w_ins, w_aug, w_cen, w_cc = weights
    total = w_ins * l_ins + w_aug * l_aug + w_cen * l_cen + w_cc * l_cc
    return LossBreakdown(l_ins, l_aug, l_cen, l_cc, total)
