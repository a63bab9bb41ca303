"""Backbone + segmentation network bundled for one-episode forward passes."""

from __future__ import annotations

import torch

from .backbone import Backbone, BackboneSpec, load_backbone
from .config import RunConfig
from .episodes import Episode
from .evaluation import kshot_merge, upsample_logits
from .network import FewShotSegmenter, binarize_logits, total_loss


class EpisodeModel:
    """Frozen backbone plus the trainable segmenter, sized for one image size.

    The backbone is probed once at construction to fix the per-level grids the
    network is built for; all episode images must match ``config.image_size``.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.backbone: Backbone = load_backbone(
            BackboneSpec(config.backbone, config.resolved_weights())
        )
        grids = self.backbone.grids(config.image_size)
        self.net = FewShotSegmenter(
            self.backbone.block_counts,
            grids,
            width=config.width,
            drop_rate=config.drop_rate,
            bi_transformer=config.bi_transformer,
        )

    def train(self) -> "EpisodeModel":
        self.net.train()
        return self

    def eval(self) -> "EpisodeModel":
        self.net.eval()
        return self

    def forward_episode(
        self,
        query_image: torch.Tensor,
        support_image: torch.Tensor,
        support_mask: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> dict[int, torch.Tensor]:
        """Logit maps {4, 3, 2, 1} for one query against one support pair."""
        query_pyr = self.backbone.extract(query_image)
        support_pyr = self.backbone.extract(support_image)
        return self.net(query_pyr, support_pyr, support_mask, generator)

    def episode_loss(self, episode: Episode, generator: torch.Generator | None = None) -> torch.Tensor:
        """Training loss of one episode (first support pair)."""
        logits = self.forward_episode(
            episode.query_image, episode.support_images[0], episode.support_masks[0], generator
        )
        return total_loss(logits, episode.query_mask, self.config.alpha)

    @torch.no_grad()
    def predict_episode(self, episode: Episode) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        """Final binary mask (at episode resolution) plus per-level pseudo masks.

        All supports are merged; the per-level intermediate masks come from
        the first support's forward pass.
        """
        was_training = self.net.training
        self.net.eval()
        try:
            size = tuple(episode.query_mask.shape)
            final_maps = []
            intermediates: dict[int, torch.Tensor] = {}
            for i, (img, msk) in enumerate(zip(episode.support_images, episode.support_masks)):
                logits = self.forward_episode(episode.query_image, img, msk)
                final_maps.append(upsample_logits(logits[1], size))
                if i == 0:
                    intermediates = {lvl: binarize_logits(logits[lvl]) for lvl in (4, 3, 2)}
            return kshot_merge(final_maps), intermediates
        finally:
            self.net.train(was_training)
