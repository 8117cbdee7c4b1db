"""Partially relevant video retrieval over precomputed feature packs.

Dual-branch text/video alignment trained with triplet + InfoNCE objectives,
extended by pseudo-positive pair mining across samples, redundant-feature
mining within samples, and self-supervised temporal coherence prediction.
"""

from .config import ExperimentConfig, TrainConfig
from .encoders import EncodedBatch, EncoderConfig
from .featurepack import (
    FeaturePack,
    PackError,
    SyntheticSpec,
    generate_synthetic,
    read_pack,
    write_pack,
)
from .evaluation import MetricReport, RetrievalResult, evaluate, fused_similarity
from .ice import MiningInput, PseudoPairSet, mask_paired, mine_pseudo_pairs
from .irm import IrmConfig, RedundancyHead, redundant_features
from .losses import LossConfig, base_loss, cosine, key_moment
from .model import PrvrModel
from .tcp import TcpConfig, group_labels, shuffle_subset
from .trainer import TrainResult, load_checkpoint, run_ablation, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "EncodedBatch",
    "EncoderConfig",
    "ExperimentConfig",
    "FeaturePack",
    "IrmConfig",
    "LossConfig",
    "MetricReport",
    "MiningInput",
    "PackError",
    "PrvrModel",
    "PseudoPairSet",
    "RedundancyHead",
    "RetrievalResult",
    "SyntheticSpec",
    "TcpConfig",
    "TrainConfig",
    "TrainResult",
    "base_loss",
    "cosine",
    "evaluate",
    "fused_similarity",
    "generate_synthetic",
    "group_labels",
    "key_moment",
    "load_checkpoint",
    "mask_paired",
    "mine_pseudo_pairs",
    "read_pack",
    "redundant_features",
    "run_ablation",
    "save_checkpoint",
    "shuffle_subset",
    "train",
    "write_pack",
]
