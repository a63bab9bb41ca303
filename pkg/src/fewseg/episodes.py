"""Episodic sampling: fold splits, episode construction, and test manifests.

An episode is one few-shot task: a query image plus K support image/mask
pairs, all containing one class.  Train and test classes are disjoint by
construction, and every sampled episode asserts its class belongs to the
requested partition.  Sampling uses a dedicated numpy PCG64 generator so a
fixed seed reproduces the same episodes on any platform.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import IMAGE_MEAN, IMAGE_STD

PASCAL_CLASSES = 20
COCO_CLASSES = 80
DATASETS = ("pascal", "coco", "synthetic")

# How often sample() retries after drawing an episode whose mask degenerates
# to empty at the working resolution.
MAX_SAMPLE_RETRIES = 50


@dataclass
class FoldSplit:
    """Disjoint train/test class partition of one benchmark fold."""

    dataset: str
    fold: int
    train_classes: tuple[int, ...]
    test_classes: tuple[int, ...]

    def __post_init__(self):
        if set(self.train_classes) & set(self.test_classes):
            raise ValueError("train and test classes overlap")

    def classes(self, partition: str) -> tuple[int, ...]:
        if partition == "train":
            return self.train_classes
        if partition == "test":
            return self.test_classes
        raise ValueError(f"partition must be 'train' or 'test', got {partition!r}")


def build_fold_split(dataset: str, fold: int) -> FoldSplit:
    """Standard benchmark folds: 5 contiguous test classes of 20 (pascal) or
    20 of 80 (coco); the rest train."""
    name = dataset.replace("-5i", "").replace("-20i", "")
    if name not in ("pascal", "coco"):
        raise ValueError(f"unknown dataset {dataset!r}, expected pascal or coco")
    if fold not in (0, 1, 2, 3):
        raise ValueError(f"fold must be in 0..3, got {fold}")
    total, per_fold = (PASCAL_CLASSES, 5) if name == "pascal" else (COCO_CLASSES, 20)
    test = tuple(range(per_fold * fold, per_fold * (fold + 1)))
    train = tuple(c for c in range(total) if c not in test)
    return FoldSplit(name, fold, train, test)


def synthetic_split(n_classes: int, n_test: int = 1) -> FoldSplit:
    """Partition a synthetic source's classes: the last ``n_test`` are test classes."""
    if not 0 < n_test < n_classes:
        raise ValueError(f"need 0 < n_test < n_classes, got {n_test} of {n_classes}")
    all_classes = tuple(range(n_classes))
    return FoldSplit("synthetic", 0, all_classes[: n_classes - n_test], all_classes[n_classes - n_test :])


@dataclass(frozen=True)
class EpisodeDescriptor:
    """Identity of one episode: class plus query/support image ids."""

    class_id: int
    query_id: str
    support_ids: tuple[str, ...]


@dataclass
class Episode:
    """Materialized episode at the working resolution.

    Images are float tensors [3, S, S] normalized with ImageNet statistics;
    masks are float tensors [S, S] with values exactly {0, 1}.
    """

    query_image: torch.Tensor
    query_mask: torch.Tensor
    support_images: list[torch.Tensor]
    support_masks: list[torch.Tensor]
    class_id: int
    descriptor: EpisodeDescriptor = field(default=None)


def image_to_tensor(image: np.ndarray, size: int) -> torch.Tensor:
    """uint8 [H, W, 3] -> normalized float [3, size, size] (bilinear resize)."""
    from PIL import Image

    pil = Image.fromarray(image).resize((size, size), Image.BILINEAR)
    arr = np.asarray(pil, dtype=np.float32) / 255.0
    mean = np.asarray(IMAGE_MEAN, dtype=np.float32)
    std = np.asarray(IMAGE_STD, dtype=np.float32)
    return torch.from_numpy(((arr - mean) / std).transpose(2, 0, 1).copy())


def mask_to_tensor(mask: np.ndarray, size: int) -> torch.Tensor:
    """{0,1} [H, W] -> float [size, size], nearest-neighbor resize (stays binary)."""
    from PIL import Image

    pil = Image.fromarray((mask > 0).astype(np.uint8)).resize((size, size), Image.NEAREST)
    out = torch.from_numpy(np.asarray(pil, dtype=np.float32))
    bad = ((out != 0) & (out != 1)).sum().item()
    if bad:
        raise ValueError(f"mask not binary after resize ({bad} stray values)")
    return out


def materialize_episode(source, desc: EpisodeDescriptor, image_size: int) -> Episode:
    """Load and resize all images/masks of a descriptor."""
    query_image = image_to_tensor(source.load_image(desc.query_id), image_size)
    query_mask = mask_to_tensor(source.load_mask(desc.query_id, desc.class_id), image_size)
    support_images, support_masks = [], []
    for sid in desc.support_ids:
        support_images.append(image_to_tensor(source.load_image(sid), image_size))
        support_masks.append(mask_to_tensor(source.load_mask(sid, desc.class_id), image_size))
    return Episode(query_image, query_mask, support_images, support_masks, desc.class_id, desc)


class _DegenerateEpisode(Exception):
    pass


class EpisodeSampler:
    """Draws episodes of one partition from a source, reproducibly.

    Args:
        source: dataset source (see datasets module protocol).
        split: FoldSplit giving the class partition.
        partition: "train" or "test".
        k: number of support pairs per episode.
        image_size: working resolution for images and masks.
        seed: seed of the private PCG64 generator.
    """

    def __init__(self, source, split: FoldSplit, partition: str, k: int = 1, image_size: int = 400, seed: int = 0):
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        self.source = source
        self.split = split
        self.partition = partition
        self.k = k
        self.image_size = image_size
        self._partition_classes = set(split.classes(partition))
        available = set(source.classes)
        self.eligible = sorted(
            c
            for c in self._partition_classes & available
            if len(source.ids_for_class(c)) >= k + 1
        )
        if not self.eligible:
            raise ValueError(
                f"no {partition} class has at least {k + 1} images in this source"
            )
        self.rng = np.random.Generator(np.random.PCG64(seed))

    @property
    def state(self):
        return self.rng.bit_generator.state

    @state.setter
    def state(self, value):
        self.rng.bit_generator.state = value

    def sample_descriptor(self) -> EpisodeDescriptor:
        class_id = int(self.eligible[self.rng.integers(len(self.eligible))])
        assert class_id in self._partition_classes, "episode class escaped its partition"
        ids = self.source.ids_for_class(class_id)
        picks = self.rng.choice(len(ids), size=self.k + 1, replace=False)
        query_id = ids[int(picks[0])]
        support_ids = tuple(ids[int(i)] for i in picks[1:])
        return EpisodeDescriptor(class_id, query_id, support_ids)

    def sample(self) -> Episode:
        """Sample a non-degenerate episode (every mask nonempty at working size)."""
        for _ in range(MAX_SAMPLE_RETRIES):
            desc = self.sample_descriptor()
            try:
                episode = materialize_episode(self.source, desc, self.image_size)
                if episode.query_mask.sum() == 0 or any(m.sum() == 0 for m in episode.support_masks):
                    raise _DegenerateEpisode
                return episode
            except _DegenerateEpisode:
                continue
        raise RuntimeError(
            f"gave up after {MAX_SAMPLE_RETRIES} retries: every sampled episode had an "
            f"empty mask at {self.image_size}x{self.image_size}"
        )


def test_pair_list(source, split: FoldSplit, k: int = 1, n: int = 1000, seed: int = 0) -> list[EpisodeDescriptor]:
    """The fixed list of n support-query test pairs for one fold, given a seed."""
    if n <= 0:
        raise ValueError(f"manifest size must be positive, got {n}")
    sampler = EpisodeSampler(source, split, "test", k=k, seed=seed)
    return [sampler.sample_descriptor() for _ in range(n)]


def write_manifest(path: str, descriptors: list[EpisodeDescriptor]) -> None:
    """One line per episode: query id, comma-joined support ids, class id (tab-separated)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        for d in descriptors:
            fh.write(f"{d.query_id}\t{','.join(d.support_ids)}\t{d.class_id}\n")


def read_manifest(path: str) -> list[EpisodeDescriptor]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest file not found: {path}")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            query_id, supports, class_id = parts
            out.append(EpisodeDescriptor(int(class_id), query_id, tuple(supports.split(","))))
    return out
