"""Metrics and manifest evaluation: class-pooled IoU, FB-IoU, K-shot merging.

IoU is pooled over pixel counts across all episodes of a class (not averaged
per episode); mIoU is the unweighted mean over the classes seen.  FB-IoU pools
foreground and background counts over every episode regardless of class.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .episodes import EpisodeDescriptor, materialize_episode


@dataclass
class IoUAccumulator:
    """Running TP/FP/FN pixel counts per class plus pooled fg/bg counts."""

    per_class: dict[int, list[int]] = field(default_factory=dict)  # class -> [tp, fp, fn]
    foreground: list[int] = field(default_factory=lambda: [0, 0, 0])
    background: list[int] = field(default_factory=lambda: [0, 0, 0])
    episodes: int = 0

    def update(self, pred: torch.Tensor, gt: torch.Tensor, class_id: int) -> "IoUAccumulator":
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {tuple(pred.shape)} != ground truth {tuple(gt.shape)}")
        p = pred.bool()
        g = gt.bool()
        tp = int((p & g).sum())
        fp = int((p & ~g).sum())
        fn = int((~p & g).sum())
        counts = self.per_class.setdefault(class_id, [0, 0, 0])
        counts[0] += tp
        counts[1] += fp
        counts[2] += fn
        for c, (t, f_, n_) in ((self.foreground, (tp, fp, fn)), (self.background, (int((~p & ~g).sum()), fn, fp))):
            c[0] += t
            c[1] += f_
            c[2] += n_
        self.episodes += 1
        return self

    @staticmethod
    def _iou(counts: list[int]) -> float | None:
        denom = sum(counts)
        if denom == 0:
            return None
        return counts[0] / denom

    def report(self) -> "MetricsReport":
        per_class = {c: iou for c, cnt in sorted(self.per_class.items()) if (iou := self._iou(cnt)) is not None}
        miou = sum(per_class.values()) / len(per_class) if per_class else 0.0
        fg = self._iou(self.foreground) or 0.0
        bg = self._iou(self.background) or 0.0
        return MetricsReport(per_class, miou, (fg + bg) / 2.0, self.episodes)


@dataclass
class MetricsReport:
    """Per-class IoU, their unweighted mean, FB-IoU, and the episode count."""

    per_class_iou: dict[int, float]
    miou: float
    fb_iou: float
    episodes: int

    def to_text(self) -> str:
        lines = [f"episodes={self.episodes}", f"miou={self.miou:.6f}", f"fb_iou={self.fb_iou:.6f}"]
        lines += [f"iou_class_{c}={v:.6f}" for c, v in sorted(self.per_class_iou.items())]
        return "\n".join(lines) + "\n"

    def write(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(self.to_text())


def kshot_merge(logit_maps: list[torch.Tensor]) -> torch.Tensor:
    """Merge K per-support logit maps into one binary mask.

    Averages the K softmax foreground-probability maps and thresholds at 0.5
    (ties go to foreground).  With K=1 this equals plain logit binarization.
    """
    if not logit_maps:
        raise ValueError("kshot_merge needs at least one logit map")
    shapes = {tuple(m.shape) for m in logit_maps}
    if len(shapes) != 1:
        raise ValueError(f"logit maps disagree on shape: {sorted(shapes)}")
    fg = torch.stack([torch.softmax(m, dim=0)[1] for m in logit_maps]).mean(dim=0)
    return (fg >= 0.5).to(logit_maps[0].dtype)


def upsample_logits(logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resize a [2, h, w] logit map to the ground-truth resolution."""
    return F.interpolate(logits.unsqueeze(0), size=size, mode="bilinear", align_corners=True)[0]


def evaluate(
    model,
    source,
    descriptors: list[EpisodeDescriptor],
    image_size: int,
    mask_dir: str | None = None,
) -> MetricsReport:
    """Evaluate a model over a manifest of episode descriptors.

    Runs one forward pass per support (K passes for K-shot), merges the final
    logit maps, and accumulates pooled IoU counts.  With ``mask_dir`` set, the
    predicted masks are also written as 0/255 PNG files.
    """
    acc = IoUAccumulator()
    if mask_dir:
        os.makedirs(mask_dir, exist_ok=True)
    for lineno, desc in enumerate(descriptors, start=1):
        try:
            episode = materialize_episode(source, desc, image_size)
            pred = predict_mask(model, episode)
        except Exception as exc:
            raise RuntimeError(f"manifest line {lineno}: {exc}") from exc
        acc.update(pred, episode.query_mask, desc.class_id)
        if mask_dir:
            _write_mask(os.path.join(mask_dir, f"episode_{lineno:04d}.png"), pred)
    return acc.report()


def predict_mask(model, episode) -> torch.Tensor:
    """Final binary mask for one episode, merging all supports."""
    size = tuple(episode.query_mask.shape)
    with torch.no_grad():
        maps = [
            upsample_logits(model.forward_episode(episode.query_image, img, msk)[1], size)
            for img, msk in zip(episode.support_images, episode.support_masks)
        ]
    return kshot_merge(maps)


def _write_mask(path: str, mask: torch.Tensor) -> None:
    from PIL import Image

    import numpy as np

    Image.fromarray((mask.cpu().numpy() * 255).astype(np.uint8)).save(path)
