"""Coarse-to-fine segmentation network over correlation pyramids.

Per pyramid level (4 -> 3 -> 2) a dual-branch block squeezes the cross
correlation (query vs. support, guided by the support mask) and the self
correlation (query vs. itself, guided by the block's own intermediate
prediction used as a pseudo mask) down to one vector per query position, and
folds both into a running fusion token.  The token is bilinearly upsampled
between levels; after level 2 it is upsampled once more (x2) and decoded by
two conv blocks into the final 2-channel logits.

The total training loss is per-pixel 2-class cross-entropy on all four logit
maps, upsampled to the ground-truth size, weighted 0.7 for the final map and
0.1 for each intermediate one.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .attention import MaskedSqueezeStack, downsample_mask, first_stack_modes
from .backbone import FeaturePyramid
from .correlation import level_correlation

LOSS_ALPHA = 0.1  # weight of each intermediate level's loss term
DEFAULT_WIDTH = 20  # channel width of attention projections and the fusion token


class ConvBlock(nn.Module):
    """Two convolutions with ReLU after each, grid-preserving."""

    def __init__(self, in_ch: int, mid_ch: int, out_ch: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv2d(in_ch, mid_ch, kernel_size, 1, pad)
        self.conv2 = nn.Conv2d(mid_ch, out_ch, kernel_size, 1, pad)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.conv2(torch.relu(self.conv1(x))))


def binarize_logits(logits: torch.Tensor) -> torch.Tensor:
    """Hard 2-channel argmax: 0 iff channel 0 wins strictly, 1 otherwise (ties -> 1).

    The comparison cuts the autograd graph, so no gradient flows through the
    returned mask.
    """
    if logits.dim() != 3 or logits.shape[0] != 2:
        raise ValueError(f"expected [2,H,W] logits, got shape {tuple(logits.shape)}")
    return (logits[1] >= logits[0]).to(logits.dtype)


def conv_block_predict(x: torch.Tensor, block: ConvBlock, query_grid: tuple[int, int]) -> torch.Tensor:
    """Reshape squeezed features [N_q, 1, D] onto the query grid and predict logits."""
    h, w = query_grid
    if x.dim() != 3 or x.shape[0] != h * w or x.shape[1] != 1:
        raise ValueError(f"expected [{h * w}, 1, D] input for query grid {query_grid}, got {tuple(x.shape)}")
    grid = x[:, 0, :].reshape(h, w, -1).permute(2, 0, 1)
    return block(grid.unsqueeze(0))[0]


def upsample_token(token: torch.Tensor, src_grid: tuple[int, int], dst_grid: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resize a [N_q, 1, D] token field from one query grid to a larger one."""
    h, w = src_grid
    if token.dim() != 3 or token.shape[0] != h * w or token.shape[1] != 1:
        raise ValueError(f"expected [{h * w}, 1, D] token for grid {src_grid}, got {tuple(token.shape)}")
    if dst_grid[0] < h or dst_grid[1] < w:
        raise ValueError(f"cannot downscale token from {src_grid} to {dst_grid}")
    if tuple(dst_grid) == (h, w):
        return token
    field = token[:, 0, :].reshape(h, w, -1).permute(2, 0, 1).unsqueeze(0)
    field = F.interpolate(field, size=tuple(dst_grid), mode="bilinear", align_corners=True)
    return field[0].permute(1, 2, 0).reshape(dst_grid[0] * dst_grid[1], 1, -1)


class DualBranchBlock(nn.Module):
    """One pyramid level: squeeze cross (and optionally self) correlation, update the token.

    Args:
        in_dim: number of stacked affinities (backbone blocks) at this level.
        width: channel width of the squeeze stacks and the token.
        query_grid: (h, w) of the query positions at this level.
        support_grid: (h, w) the correlation support axis reshapes to.
        drop_rate: element-drop probability on the self-branch layer inputs.
        self_branch: build and run the self-correlation branch.
        conv_kernel: kernel size of the prediction conv block.
    """

    def __init__(
        self,
        in_dim: int,
        width: int,
        query_grid: tuple[int, int],
        support_grid: tuple[int, int],
        drop_rate: float = 0.0,
        self_branch: bool = True,
        conv_kernel: int = 3,
    ):
        super().__init__()
        self.query_grid = tuple(query_grid)
        self.support_grid = tuple(support_grid)
        self.self_branch = self_branch
        if self_branch and (
            self.support_grid[0] > self.query_grid[0] or self.support_grid[1] > self.query_grid[1]
        ):
            # the pseudo mask is predicted on the query grid and then shrunk
            # onto the support grid, so the support grid cannot be larger
            raise ValueError(
                f"self branch needs support grid {self.support_grid} <= query grid {self.query_grid}"
            )
        modes_1 = first_stack_modes(self.support_grid)
        self.stack_qs_1 = MaskedSqueezeStack(in_dim, width, self.support_grid, modes_1)
        self.stack_qs_2 = MaskedSqueezeStack(width, width, self.stack_qs_1.out_grid, ("halve", "collapse"))
        if self_branch:
            self.stack_qq_1 = MaskedSqueezeStack(
                in_dim, width, self.support_grid, modes_1, drop_rate, self_branch=True
            )
            self.stack_qq_2 = MaskedSqueezeStack(
                width, width, self.stack_qq_1.out_grid, ("halve", "collapse"), drop_rate, self_branch=True
            )
        self.predict = ConvBlock(width, width, 2, conv_kernel)

    def _squeeze(
        self,
        stack_1: MaskedSqueezeStack,
        stack_2: MaskedSqueezeStack,
        corr: torch.Tensor,
        mask: torch.Tensor,
        token: torch.Tensor,
        generator: torch.Generator | None,
    ) -> torch.Tensor:
        squeezed = stack_1(corr, mask, generator)
        squeezed = squeezed + token  # broadcast [N_q, 1, D] over the support axis
        mask_2 = downsample_mask(mask, stack_1.out_grid)
        return stack_2(squeezed, mask_2, generator)

    def cross_branch(
        self, x_qs: torch.Tensor, support_mask: torch.Tensor, token: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Squeeze the cross correlation to [N_q, 1, D] under the support mask."""
        return self._squeeze(self.stack_qs_1, self.stack_qs_2, x_qs, support_mask, token, generator)

    def self_branch_forward(
        self, x_qq: torch.Tensor, pseudo_mask: torch.Tensor, token: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Squeeze the self correlation to [N_q, 1, D] under the pseudo mask."""
        return self._squeeze(self.stack_qq_1, self.stack_qq_2, x_qq, pseudo_mask, token, generator)

    def forward(
        self,
        x_qs: torch.Tensor,
        x_qq: torch.Tensor | None,
        support_mask: torch.Tensor,
        token: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (updated token [N_q, 1, D], logits [2, h_q, w_q])."""
        if tuple(support_mask.shape) != self.support_grid:
            raise ValueError(
                f"support mask shape {tuple(support_mask.shape)} does not match grid {self.support_grid}"
            )
        x_bar_qs = self.cross_branch(x_qs, support_mask, token, generator)
        logits = conv_block_predict(x_bar_qs, self.predict, self.query_grid)
        if self.self_branch:
            if x_qq is None:
                raise ValueError("self branch enabled but no self correlation given")
            pseudo = binarize_logits(logits.detach())
            pseudo = downsample_mask(pseudo, self.support_grid)
            x_bar_qq = self.self_branch_forward(x_qq, pseudo, token, generator)
            token = token + x_bar_qs + x_bar_qq
        else:
            token = token + x_bar_qs
        return token, logits


class FewShotSegmenter(nn.Module):
    """Pyramid of dual-branch blocks plus the two final decoders.

    Consumes query/support feature pyramids of one episode (a single support)
    and produces logits at every level: keys 4/3/2 on the query grids and key
    1 on the x2-upsampled level-2 grid.
    """

    def __init__(
        self,
        block_counts: dict[int, int],
        query_grids: dict[int, tuple[int, int]],
        width: int = DEFAULT_WIDTH,
        drop_rate: float = 0.0,
        bi_transformer: bool = True,
        conv_kernel: int = 3,
    ):
        super().__init__()
        self.block_counts = dict(block_counts)
        self.query_grids = {lvl: tuple(g) for lvl, g in query_grids.items()}
        # Support features at level 2 are 2x average-pooled before correlation,
        # so the support grid there is half the query grid.
        h2, w2 = self.query_grids[2]
        if h2 % 2 or w2 % 2:
            raise ValueError(f"level-2 grid must be even for support pooling, got {(h2, w2)}")
        self.support_grids = {
            4: self.query_grids[4],
            3: self.query_grids[3],
            2: (h2 // 2, w2 // 2),
        }
        self.width = width
        self.bi_transformer = bi_transformer
        self.blocks = nn.ModuleDict(
            {
                str(lvl): DualBranchBlock(
                    block_counts[lvl],
                    width,
                    self.query_grids[lvl],
                    self.support_grids[lvl],
                    drop_rate=drop_rate,
                    self_branch=bi_transformer,
                    conv_kernel=conv_kernel,
                )
                for lvl in (4, 3, 2)
            }
        )
        self.decoder_a = ConvBlock(width, width, width, conv_kernel)
        self.decoder_b = ConvBlock(width, width, 2, conv_kernel)

    @staticmethod
    def _pool_support(feats: list[torch.Tensor]) -> list[torch.Tensor]:
        return [F.avg_pool2d(f.unsqueeze(0), 2, 2)[0] for f in feats]

    def forward(
        self,
        query_pyr: FeaturePyramid,
        support_pyr: FeaturePyramid,
        support_mask: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> dict[int, torch.Tensor]:
        for lvl in (4, 3, 2):
            if query_pyr.grid(lvl) != self.query_grids[lvl]:
                raise ValueError(
                    f"query pyramid grid {query_pyr.grid(lvl)} at level {lvl} does not match "
                    f"the configured grid {self.query_grids[lvl]}"
                )
        out: dict[int, torch.Tensor] = {}
        n_q4 = self.query_grids[4][0] * self.query_grids[4][1]
        ref = query_pyr.levels[4][0]
        token = torch.zeros(n_q4, 1, self.width, dtype=ref.dtype, device=ref.device)
        for lvl in (4, 3, 2):
            feats_q = query_pyr.levels[lvl]
            feats_s = support_pyr.levels[lvl]
            if lvl == 2:
                feats_s = self._pool_support(feats_s)
            x_qs = level_correlation(feats_q, feats_s, "cross").values
            x_qq = None
            if self.bi_transformer:
                if lvl == 2:
                    # query against a pooled copy of itself; support axis is the pooled grid
                    x_qq = level_correlation(feats_q, self._pool_support(feats_q), "cross").values
                else:
                    x_qq = level_correlation(feats_q, feats_q, "self").values
            mask_l = downsample_mask(support_mask, self.support_grids[lvl]).to(x_qs.dtype)
            token, logits = self.blocks[str(lvl)](x_qs, x_qq, mask_l, token, generator)
            out[lvl] = logits
            if lvl != 2:
                token = upsample_token(token, self.query_grids[lvl], self.query_grids[lvl - 1])
        h2, w2 = self.query_grids[2]
        field = token[:, 0, :].reshape(h2, w2, self.width).permute(2, 0, 1).unsqueeze(0)
        field = F.interpolate(field, size=(2 * h2, 2 * w2), mode="bilinear", align_corners=True)
        out[1] = self.decoder_b(self.decoder_a(field))[0]
        return out


def combine_level_losses(losses: dict[int, torch.Tensor], alpha: float = LOSS_ALPHA):
    """Weight per-level losses: (1 - 3*alpha) * L_1 + alpha * (L_2 + L_3 + L_4)."""
    missing = {1, 2, 3, 4} - set(losses)
    if missing:
        raise ValueError(f"missing loss terms for levels {sorted(missing)}")
    return (1.0 - 3.0 * alpha) * losses[1] + alpha * (losses[2] + losses[3] + losses[4])


def total_loss(
    logit_maps: dict[int, torch.Tensor], gt_mask: torch.Tensor, alpha: float = LOSS_ALPHA
) -> torch.Tensor:
    """Cross-entropy of all four logit maps against the binary ground truth.

    Every map is bilinearly upsampled to the ground-truth size first.
    """
    missing = {1, 2, 3, 4} - set(logit_maps)
    if missing:
        raise ValueError(f"missing logit maps for levels {sorted(missing)}")
    if gt_mask.dim() != 2:
        raise ValueError(f"expected a 2D ground-truth mask, got shape {tuple(gt_mask.shape)}")
    target = gt_mask.long().unsqueeze(0)
    losses = {}
    for lvl, logits in logit_maps.items():
        up = F.interpolate(
            logits.unsqueeze(0), size=gt_mask.shape, mode="bilinear", align_corners=True
        )
        losses[lvl] = F.cross_entropy(up, target)
    return combine_level_losses(losses, alpha)
