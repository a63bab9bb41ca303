"""Masked attention layers that squeeze the support axis of a correlation tensor.

Each layer treats the query positions of a correlation tensor [N_q, S, D] as a
batch, runs convolutions over the support grid to form queries/keys/values and
a shortcut, and attends over the support positions with the value vectors
gated by a foreground mask.  Chaining two layers into a stack progressively
shrinks the support grid; the final stack of a block collapses it to a single
position.

Support-grid conv schedule (per layer "mode"):
  - "halve":    conv_Q/conv_SC are 3x3 stride 2 pad 1 (grid -> ceil(grid/2))
  - "keep":     conv_Q/conv_SC are 3x3 stride 1 pad 1 (grid unchanged)
  - "collapse": conv_Q/conv_SC use a grid-sized global kernel (grid -> 1x1)
conv_K/conv_V are always 3x3 stride 1 pad 1, so keys/values keep the input
grid.  There is no 1/sqrt(d) attention scaling.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

MODES = ("halve", "keep", "collapse")

# Largest side the first squeeze stack of a block may emit; grids above this
# get a second halving step instead of a size-preserving one.
FIRST_STACK_TARGET = 7


def drop_elements(
    x: torch.Tensor,
    rate: float,
    training: bool,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Zero each element independently with probability ``rate``.

    Plain zeroing without inverted rescaling.  Identity when not training or
    when rate is 0.  Draws from the global RNG unless ``generator`` is given.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, device=x.device) >= rate
    return x * keep.to(x.dtype)


def downsample_mask(mask: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Downsample a binary [H, W] mask to ``target``; any overlap marks foreground.

    Area-average pooling followed by "> 0", so a target cell is foreground iff
    at least one source pixel inside it is.
    """
    if mask.dim() != 2:
        raise ValueError(f"expected a 2D mask, got shape {tuple(mask.shape)}")
    h, w = target
    if h > mask.shape[0] or w > mask.shape[1]:
        raise ValueError(f"target {target} larger than mask {tuple(mask.shape)}")
    pooled = F.adaptive_avg_pool2d(mask[None, None].float(), (h, w))[0, 0]
    return (pooled > 0).to(mask.dtype)


def _out_grid(grid: tuple[int, int], mode: str) -> tuple[int, int]:
    h, w = grid
    if mode == "halve":
        return (h - 1) // 2 + 1, (w - 1) // 2 + 1
    if mode == "keep":
        return h, w
    if mode == "collapse":
        return 1, 1
    raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")


class MaskedSqueezeAttention(nn.Module):
    """One attention layer over the support grid, batched over query positions.

    Args:
        in_dim: channels of the incoming correlation tensor.
        hid_dim: width of the query/key projections.
        out_dim: width of the value/shortcut projections and the output.
        in_grid: (h, w) support grid the input's support axis reshapes to.
        mode: "halve", "keep", or "collapse" (see module docstring).
        drop_rate: element-zeroing probability for the layer input.
        self_branch: apply the drop (training mode only) — the drop is used
            on the self-correlation branch exclusively.
    """

    def __init__(
        self,
        in_dim: int,
        hid_dim: int,
        out_dim: int,
        in_grid: tuple[int, int],
        mode: str,
        drop_rate: float = 0.0,
        self_branch: bool = False,
    ):
        super().__init__()
        if not 0.0 <= drop_rate < 1.0:
            raise ValueError(f"drop rate must be in [0, 1), got {drop_rate}")
        self.in_dim = in_dim
        self.hid_dim = hid_dim
        self.out_dim = out_dim
        self.in_grid = tuple(in_grid)
        self.mode = mode
        self.drop_rate = drop_rate
        self.self_branch = self_branch
        self.out_grid = _out_grid(self.in_grid, mode)

        if mode == "halve":
            q_kwargs = dict(kernel_size=3, stride=2, padding=1)
        elif mode == "keep":
            q_kwargs = dict(kernel_size=3, stride=1, padding=1)
        else:  # collapse: one global window over the whole support grid
            q_kwargs = dict(kernel_size=self.in_grid, stride=1, padding=0)
        self.conv_q = nn.Conv2d(in_dim, hid_dim, **q_kwargs)
        self.conv_sc = nn.Conv2d(in_dim, out_dim, **q_kwargs)
        self.conv_k = nn.Conv2d(in_dim, hid_dim, 3, 1, 1)
        self.conv_v = nn.Conv2d(in_dim, out_dim, 3, 1, 1)
        self.mlp1 = nn.Sequential(nn.Linear(out_dim, out_dim), nn.ReLU(inplace=True), nn.Linear(out_dim, out_dim))
        self.mlp2 = nn.Sequential(nn.Linear(out_dim, out_dim), nn.ReLU(inplace=True), nn.Linear(out_dim, out_dim))
        self.norm1 = nn.LayerNorm(out_dim)
        self.norm2 = nn.LayerNorm(out_dim)

    def project(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Run the four support-grid convs; returns (x_q, x_k, x_v, x_sc) flattened."""
        n_q = x.shape[0]
        h, w = self.in_grid
        grid = x.transpose(1, 2).reshape(n_q, self.in_dim, h, w)

        def flat(t: torch.Tensor) -> torch.Tensor:
            return t.flatten(2).transpose(1, 2)  # [N_q, positions, channels]

        return flat(self.conv_q(grid)), flat(self.conv_k(grid)), flat(self.conv_v(grid)), flat(self.conv_sc(grid))

    @staticmethod
    def attend(x_q: torch.Tensor, x_k: torch.Tensor, x_v: torch.Tensor, mask_flat: torch.Tensor) -> torch.Tensor:
        """Softmax(X_Q X_K^T) applied to mask-gated values (no scale factor)."""
        weights = torch.softmax(x_q @ x_k.transpose(1, 2), dim=-1)
        return weights @ (x_v * mask_flat[None, :, None])

    def forward(
        self,
        x: torch.Tensor,
        mask: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Map [N_q, h*w, D_in] plus a [h, w] mask to [N_q, h'*w', D_out]."""
        h, w = self.in_grid
        if x.dim() != 3 or x.shape[1] != h * w or x.shape[2] != self.in_dim:
            raise ValueError(
                f"expected input [N_q, {h * w}, {self.in_dim}] for grid {self.in_grid}, "
                f"got {tuple(x.shape)}"
            )
        if tuple(mask.shape) != self.in_grid:
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match support grid {self.in_grid}")
        if self.self_branch:
            x = drop_elements(x, self.drop_rate, self.training, generator)
        x_q, x_k, x_v, x_sc = self.project(x)
        m = downsample_mask(mask, self.in_grid).to(x.dtype).flatten()  # keys/values keep the grid
        x_dot = self.attend(x_q, x_k, x_v, m)
        x_dd = self.norm1(self.mlp1(x_dot) + x_dot + x_sc)
        return self.norm2(self.mlp2(x_dd) + x_dd)


class MaskedSqueezeStack(nn.Module):
    """Two chained attention layers; the mask is re-downsampled between them."""

    def __init__(
        self,
        in_dim: int,
        width: int,
        in_grid: tuple[int, int],
        modes: tuple[str, str],
        drop_rate: float = 0.0,
        self_branch: bool = False,
    ):
        super().__init__()
        self.in_grid = tuple(in_grid)
        self.ttl_a = MaskedSqueezeAttention(in_dim, width, width, in_grid, modes[0], drop_rate, self_branch)
        self.ttl_b = MaskedSqueezeAttention(
            width, width, width, self.ttl_a.out_grid, modes[1], drop_rate, self_branch
        )
        self.out_grid = self.ttl_b.out_grid

    def forward(
        self,
        x: torch.Tensor,
        mask: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        x = self.ttl_a(x, mask, generator)
        mask_b = downsample_mask(mask, self.ttl_a.out_grid)
        return self.ttl_b(x, mask_b, generator)


def first_stack_modes(grid: tuple[int, int]) -> tuple[str, str]:
    """Layer modes for a block's first squeeze stack on ``grid``.

    Always halve once; halve again while the grid is still larger than
    FIRST_STACK_TARGET, otherwise keep.  A 13x13 grid becomes 7x7, a 25x25
    grid becomes 13x13 then 7x7.
    """
    mid = _out_grid(grid, "halve")
    return ("halve", "halve" if max(mid) > FIRST_STACK_TARGET else "keep")
