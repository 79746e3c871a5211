"""scikit-learn style wrappers so the pipeline composes with sklearn tooling."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .centroids import initialize_centroids
from .core import DatasetManifest, PipelineConfig, check_embeddings
from .evaluation import evaluate_manifest
from .relabel import refine
from .trainloop import encode, run_training


class PseudoLabelRefiner(BaseEstimator):
    """Refine noisy pseudo-labels against an EMA centroid memory.

    ``fit`` bootstraps the memory from the per-label means of ``X`` and runs
    one filter / relabel / merge pass. Each ``partial_fit`` runs another pass
    against the memory carried over from the previous call, which is how the
    per-epoch refinement is meant to be driven.

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
        Refined labels of the last pass; ``-1`` marks removed samples.
    centroids_ : CentroidsMemory
    decisions_ : list of SampleDecision
    pid_mapping_ : dict
    """

    def __init__(self, tau_rel=0.6, tau_remove=0.5, tau_merge=0.8, alpha=0.3, merge_before_ema=False):
        self.tau_rel = tau_rel
        self.tau_remove = tau_remove
        self.tau_merge = tau_merge
        self.alpha = alpha
        self.merge_before_ema = merge_before_ema

    def _pass(self, X, y, memory):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if memory is None:
            memory = initialize_centroids(X, y)
        step = refine(
            X, y, memory, self.tau_remove, self.tau_rel, self.tau_merge,
            self.alpha, self.merge_before_ema,
        )
        self.labels_ = step.labels
        self.centroids_ = step.memory
        self.decisions_ = step.decisions
        self.pid_mapping_ = step.mapping
        self.n_features_in_ = X.shape[1]
        return self

    def fit(self, X, y):
        return self._pass(X, y, None)

    def partial_fit(self, X, y):
        return self._pass(X, y, getattr(self, "centroids_", None))

    def fit_predict(self, X, y):
        return self.fit(X, y).labels_

    def predict(self, X):
        """Nearest centroid pid for each row (no thresholds applied)."""
        check_is_fitted(self, "centroids_")
        X = check_array(X, dtype=np.float64)
        pids = self.centroids_.pids
        C = self.centroids_.matrix(pids)
        Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
        Cn = C / np.linalg.norm(C, axis=1, keepdims=True)
        return pids[np.argmax(Xn @ Cn.T, axis=1)]


class MixTrainer(BaseEstimator, TransformerMixin):
    """Train the toy encoder on mixed multi-/single-camera data.

    ``fit(X, manifest=...)`` runs the full relabel / sample / step loop on
    raw feature rows aligned with ``manifest``. ``transform`` embeds with the
    momentum encoder, which is the one used at inference time.
    """

    def __init__(
        self,
        epochs=20,
        iterations_per_epoch=400,
        n_p=8,
        n_k=4,
        k_per_pid=4,
        strategy="median",
        tau_rel=0.6,
        tau_remove=0.5,
        tau_merge=0.8,
        alpha=0.3,
        lambda_momentum=0.999,
        queue_epochs=30,
        learning_rate=0.05,
        temperature=0.1,
        aug_sigma=0.05,
        d_out=0,
        encoder_init="random",
        seed=0,
    ):
        self.epochs = epochs
        self.iterations_per_epoch = iterations_per_epoch
        self.n_p = n_p
        self.n_k = n_k
        self.k_per_pid = k_per_pid
        self.strategy = strategy
        self.tau_rel = tau_rel
        self.tau_remove = tau_remove
        self.tau_merge = tau_merge
        self.alpha = alpha
        self.lambda_momentum = lambda_momentum
        self.queue_epochs = queue_epochs
        self.learning_rate = learning_rate
        self.temperature = temperature
        self.aug_sigma = aug_sigma
        self.d_out = d_out
        self.encoder_init = encoder_init
        self.seed = seed

    def to_config(self):
        return PipelineConfig.from_mapping(self.get_params())

    def fit(self, X, y=None, manifest=None):
        if not isinstance(manifest, DatasetManifest):
            raise TypeError("fit needs manifest=DatasetManifest aligned with X")
        X = check_embeddings(check_array(X, dtype=np.float64))
        result = run_training(manifest, X, self.to_config())
        self.encoder_ = result.encoder
        self.momentum_encoder_ = result.momentum_encoder
        self.initial_encoder_ = result.initial_momentum_encoder
        self.reports_ = result.reports
        self.loss_curve_ = result.loss_curve
        self.centroids_ = result.memory
        self.manifest_ = result.manifest
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "momentum_encoder_")
        return encode(self.momentum_encoder_, check_array(X, dtype=np.float64))

    def score(self, X, y=None, manifest=None):
        """Rank-1 on the query/gallery splits of ``manifest``."""
        return evaluate_manifest(manifest, self.transform(X)).rank1
