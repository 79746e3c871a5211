"""Pseudo-label refinement, EMA centroid memory and Hungarian mixed-batch
sampling for metric learning on embedding vectors."""

from .centroids import CentroidsMemory, apply_merge, ema_update, initialize_centroids, recompute_full
from .core import (
    DatasetManifest,
    PipelineConfig,
    SampleRecord,
    Source,
    Split,
    Strategy,
    cosine_similarity,
    pairwise_similarity,
    read_embeddings,
    read_manifest,
    write_embeddings,
    write_manifest,
)
from .estimators import MixTrainer, PseudoLabelRefiner
from .evaluation import RetrievalResult, evaluate
from .relabel import RefinementReport, filter_and_relabel, merge_pids, run_relabeling_epoch
from .sampler import ExclusionQueue, compose_minibatch, hungarian_assign, next_pairs, strategy_cost
from .synth import GroundTruth, SynthSpec, generate, score_partition
from .trainloop import EncoderParams, encode, momentum_update, run_training

__version__ = "0.1.0"
