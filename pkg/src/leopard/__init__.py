"""Streaming cross-domain classification under extreme label scarcity."""
from .clustering import ClusterSet, predict, similarity, target_distribution, kl_loss, update_allegiance
from .harness import (ExperimentConfig, label_proportion_sweep, proxy_h_divergence, run_baseline_ae_kmeans,
                      run_experiment)
from .learner import Ablation, Learner, LearnerConfig, compute_cd_loss, compute_cluster_loss, evaluate_batch
from .network import LeopardModel, ModelConfig
from .stream import Domain, StreamBatch, StreamConfig, generate_synthetic_streams, mask_labels
from .structure import DriftDetector, DriftState

__all__ = ["Ablation", "ClusterSet", "Domain", "DriftDetector", "DriftState", "ExperimentConfig", "Learner",
           "LearnerConfig", "LeopardModel", "ModelConfig", "StreamBatch", "StreamConfig", "compute_cd_loss",
           "compute_cluster_loss", "evaluate_batch", "generate_synthetic_streams", "kl_loss",
           "label_proportion_sweep", "mask_labels", "predict", "proxy_h_divergence", "run_baseline_ae_kmeans",
           "run_experiment", "similarity", "target_distribution", "update_allegiance"]
