"""Frozen backbones that expose per-block feature pyramids.

A backbone taps the output of every residual (or conv) block inside its last
three stages, at strides 8/16/32.  It is permanently frozen: parameters never
require gradients, the module stays in eval mode, and extraction runs under
no_grad, so identical inputs give bitwise-identical pyramids and the backbone
contributes exactly zero trainable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

VARIANTS = ("resnet50", "resnet101", "toy")
LEVELS = (2, 3, 4)

# ImageNet statistics used to normalize input images project-wide.
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


@dataclass
class BackboneSpec:
    """Configuration for a frozen feature extractor.

    Args:
        variant: "resnet50", "resnet101", or "toy".
        weights: for the resnet variants, a path to a torch state-dict file
            or an int seed for reproducible random initialization (useful on
            machines without downloaded weights); for "toy", an int seed
            (defaults to 0).
        frozen: must stay True; fine-tuning is unsupported.
    """

    variant: str
    weights: str | int | None = None
    frozen: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown backbone variant {self.variant!r}, expected one of {VARIANTS}")
        if not self.frozen:
            raise ValueError("the backbone must stay frozen; frozen=False is not supported")
        if self.weights is None:
            if self.variant == "toy":
                self.weights = 0
            else:
                raise ValueError(
                    f"variant {self.variant!r} needs weights: a state-dict path or an int seed"
                )


@dataclass
class FeaturePyramid:
    """Per-level block features: levels[l] is a list of [C_l, h_l, w_l] tensors."""

    levels: dict[int, list[torch.Tensor]]

    def __post_init__(self):
        if sorted(self.levels) != list(LEVELS):
            raise ValueError(f"pyramid must have levels {LEVELS}, got {sorted(self.levels)}")
        prev = None
        for lvl in LEVELS:
            feats = self.levels[lvl]
            if not feats:
                raise ValueError(f"level {lvl} has no feature maps")
            shapes = {tuple(f.shape) for f in feats}
            if len(shapes) != 1:
                raise ValueError(f"level {lvl} maps disagree on shape: {sorted(shapes)}")
            h, w = feats[0].shape[-2:]
            if prev is not None and not (h < prev[0] and w < prev[1]):
                raise ValueError(f"spatial sizes must strictly decrease with level, got {prev} -> {(h, w)}")
            prev = (h, w)

    def grid(self, level: int) -> tuple[int, int]:
        h, w = self.levels[level][0].shape[-2:]
        return h, w

    def block_counts(self) -> dict[int, int]:
        return {lvl: len(self.levels[lvl]) for lvl in LEVELS}


def _seeded_init(model: nn.Module, seed: int) -> None:
    """Deterministic He-style init from a private generator (ignores global RNG)."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            m.weight.data.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()
        elif isinstance(m, nn.Linear):
            m.weight.data.normal_(0.0, 0.02, generator=gen)
            m.bias.data.zero_()


class _ToyTrunk(nn.Module):
    """Tiny conv trunk with the same stride schedule (8/16/32) as the resnets.

    Three stages of two blocks each, 8 channels, ReLU after every conv so
    exact-zero feature vectors occur.  Exists so tests run without weights.
    """

    channels = 8

    def __init__(self):
        super().__init__()
        c = self.channels
        self.stage2 = nn.ModuleList([nn.Conv2d(3, c, 8, stride=8), nn.Conv2d(c, c, 3, 1, 1)])
        self.stage3 = nn.ModuleList([nn.Conv2d(c, c, 3, 2, 1), nn.Conv2d(c, c, 3, 1, 1)])
        self.stage4 = nn.ModuleList([nn.Conv2d(c, c, 3, 2, 1), nn.Conv2d(c, c, 3, 1, 1)])

    def forward(self, x: torch.Tensor) -> dict[int, list[torch.Tensor]]:
        levels: dict[int, list[torch.Tensor]] = {}
        for lvl, stage in ((2, self.stage2), (3, self.stage3), (4, self.stage4)):
            feats = []
            for block in stage:
                x = torch.relu(block(x))
                feats.append(x)
            levels[lvl] = feats
        return levels


class _ResnetTrunk(nn.Module):
    """torchvision resnet50/101 with per-block taps on layers 2-4."""

    def __init__(self, variant: str):
        super().__init__()
        import torchvision.models

        builder = {"resnet50": torchvision.models.resnet50, "resnet101": torchvision.models.resnet101}
        self.net = builder[variant](weights=None)

    def forward(self, x: torch.Tensor) -> dict[int, list[torch.Tensor]]:
        net = self.net
        x = net.maxpool(net.relu(net.bn1(net.conv1(x))))
        x = net.layer1(x)
        levels: dict[int, list[torch.Tensor]] = {}
        for lvl, stage in ((2, net.layer2), (3, net.layer3), (4, net.layer4)):
            feats = []
            for block in stage:
                x = block(x)
                feats.append(x)
            levels[lvl] = feats
        return levels


class Backbone(nn.Module):
    """Frozen feature extractor returning per-block pyramids."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        if spec.variant == "toy":
            self.trunk = _ToyTrunk()
            _seeded_init(self.trunk, int(spec.weights))
        else:
            self.trunk = _ResnetTrunk(spec.variant)
            if isinstance(spec.weights, int):
                _seeded_init(self.trunk, spec.weights)
            else:
                self._load_weights(str(spec.weights))
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def _load_weights(self, path: str) -> None:
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except FileNotFoundError:
            raise FileNotFoundError(f"backbone weights file not found: {path}")
        except Exception as exc:
            raise RuntimeError(f"could not read backbone weights from {path}: {exc}")
        try:
            self.trunk.net.load_state_dict(state)
        except Exception as exc:
            raise RuntimeError(f"weights at {path} do not match {self.spec.variant}: {exc}")

    def train(self, mode: bool = True) -> "Backbone":
        # Stays in eval mode even when a surrounding training loop flips modes.
        return super().train(False)

    @property
    def block_counts(self) -> dict[int, int]:
        if isinstance(self.trunk, _ToyTrunk):
            return {2: 2, 3: 2, 4: 2}
        net = self.trunk.net
        return {2: len(net.layer2), 3: len(net.layer3), 4: len(net.layer4)}

    @torch.no_grad()
    def extract(self, image: torch.Tensor) -> FeaturePyramid:
        """Extract the per-block feature pyramid of one [3, H, W] image."""
        if image.dim() != 3 or image.shape[0] != 3:
            raise ValueError(f"expected a [3,H,W] image, got shape {tuple(image.shape)}")
        levels = self.trunk(image.unsqueeze(0))
        return FeaturePyramid({lvl: [f[0] for f in feats] for lvl, feats in levels.items()})

    def grids(self, image_size: int) -> dict[int, tuple[int, int]]:
        """Query-grid sizes per level for a square input, found by probing."""
        pyr = self.extract(torch.zeros(3, image_size, image_size))
        return {lvl: pyr.grid(lvl) for lvl in LEVELS}


def load_backbone(spec: BackboneSpec) -> Backbone:
    """Build the frozen backbone described by ``spec``."""
    return Backbone(spec)
