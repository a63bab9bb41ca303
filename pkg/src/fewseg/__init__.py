"""Few-shot semantic segmentation with stacked affinity transformers."""

from .attention import MaskedSqueezeAttention, MaskedSqueezeStack, downsample_mask
from .backbone import Backbone, BackboneSpec, FeaturePyramid, load_backbone
from .config import RunConfig, build_config, parse_config_file
from .correlation import Affinity, Hypercorrelation, cosine_affinity, level_correlation
from .episodes import (
    Episode,
    EpisodeDescriptor,
    EpisodeSampler,
    FoldSplit,
    build_fold_split,
    read_manifest,
    synthetic_split,
    test_pair_list,
    write_manifest,
)
from .evaluation import IoUAccumulator, MetricsReport, evaluate, kshot_merge
from .model import EpisodeModel
from .network import DualBranchBlock, FewShotSegmenter, combine_level_losses, total_loss
from .training import Trainer, count_learnable_params, seed_everything

__version__ = "0.1.0"

__all__ = [
    "Affinity",
    "Backbone",
    "BackboneSpec",
    "DualBranchBlock",
    "Episode",
    "EpisodeDescriptor",
    "EpisodeModel",
    "EpisodeSampler",
    "FeaturePyramid",
    "FewShotSegmenter",
    "FoldSplit",
    "Hypercorrelation",
    "IoUAccumulator",
    "MaskedSqueezeAttention",
    "MaskedSqueezeStack",
    "MetricsReport",
    "RunConfig",
    "Trainer",
    "build_config",
    "build_fold_split",
    "combine_level_losses",
    "cosine_affinity",
    "count_learnable_params",
    "downsample_mask",
    "evaluate",
    "kshot_merge",
    "level_correlation",
    "load_backbone",
    "parse_config_file",
    "read_manifest",
    "seed_everything",
    "synthetic_split",
    "test_pair_list",
    "total_loss",
    "write_manifest",
]
