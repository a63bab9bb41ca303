"""Clamped cosine affinities between feature maps, stacked per backbone block.

Every pair of spatial positions (one from a query feature map, one from a
support feature map) gets a similarity score: the cosine of their feature
vectors, clamped at zero.  Stacking the scores of all blocks of one pyramid
level yields a correlation tensor [N_q, N_s, D_l] that downstream attention
consumes.  Positions are always flattened row-major (y-major).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

# Added to the product of the two feature norms so that exact-zero feature
# vectors (common after ReLU) produce affinity 0 instead of NaN.
EPS = 1e-8


@dataclass
class Affinity:
    """Pairwise clamped cosine scores between two feature maps.

    values: [N_q, N_s] tensor, N_q/N_s the flattened query/support grids.
    Entries live in [0, 1]; a zero feature vector zeroes its row or column.
    """

    values: torch.Tensor

    def __post_init__(self):
        if self.values.dim() != 2:
            raise ValueError(f"affinity must be 2D, got shape {tuple(self.values.shape)}")


@dataclass
class Hypercorrelation:
    """Stack of per-block affinities for one pyramid level.

    values: [N_q, N_s, D_l] tensor; kind: "cross" (query vs. support) or
    "self" (query vs. itself, N_s == N_q).
    """

    values: torch.Tensor
    kind: str

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ValueError(f"hypercorrelation must be 3D, got shape {tuple(self.values.shape)}")
        if self.kind not in ("cross", "self"):
            raise ValueError(f"kind must be 'cross' or 'self', got {self.kind!r}")
        if self.kind == "self" and self.values.shape[0] != self.values.shape[1]:
            raise ValueError(
                f"self correlation needs N_s == N_q, got {tuple(self.values.shape[:2])}"
            )


def cosine_affinity(feat_q: torch.Tensor, feat_s: torch.Tensor) -> Affinity:
    """Clamped cosine similarity between all query/support position pairs.

    Args:
        feat_q: [C, Hq, Wq] query feature map.
        feat_s: [C, Hs, Ws] support feature map, same channel count.

    Returns:
        Affinity with values [Hq*Wq, Hs*Ws]; entry (pq, ps) is
        max(0, <q, s> / (|q|*|s| + EPS)) for the two feature vectors.
    """
    if feat_q.dim() != 3 or feat_s.dim() != 3:
        raise ValueError(
            f"expected [C,H,W] feature maps, got {tuple(feat_q.shape)} and {tuple(feat_s.shape)}"
        )
    if feat_q.shape[0] != feat_s.shape[0]:
        raise ValueError(
            f"channel mismatch: query has {feat_q.shape[0]}, support has {feat_s.shape[0]}"
        )
    q = feat_q.flatten(1).transpose(0, 1)  # [Nq, C], row-major positions
    s = feat_s.flatten(1).transpose(0, 1)  # [Ns, C]
    num = q @ s.transpose(0, 1)
    denom = q.norm(dim=1)[:, None] * s.norm(dim=1)[None, :] + EPS
    return Affinity(torch.relu(num / denom))


def self_affinity(feat_q: torch.Tensor) -> Affinity:
    """Clamped cosine similarity of a feature map against itself."""
    return cosine_affinity(feat_q, feat_q)


def stack_hypercorrelation(affinities: list[Affinity], kind: str) -> Hypercorrelation:
    """Stack the D_l per-block affinities of one level into [N_q, N_s, D_l]."""
    if not affinities:
        raise ValueError("cannot stack an empty affinity list")
    shapes = {tuple(a.values.shape) for a in affinities}
    if len(shapes) != 1:
        raise ValueError(f"affinities must share one shape, got {sorted(shapes)}")
    return Hypercorrelation(torch.stack([a.values for a in affinities], dim=-1), kind)


def level_correlation(
    query_feats: list[torch.Tensor], support_feats: list[torch.Tensor], kind: str
) -> Hypercorrelation:
    """Correlate matching blocks of one pyramid level and stack the result."""
    if len(query_feats) != len(support_feats):
        raise ValueError(
            f"block count mismatch: {len(query_feats)} query vs {len(support_feats)} support"
        )
    affs = [cosine_affinity(fq, fs) for fq, fs in zip(query_feats, support_feats)]
    return stack_hypercorrelation(affs, kind)
