"""Dataset sources: synthetic shapes, VOC-style folders, and COCO annotations.

Every source exposes the same small protocol used by the episodic sampler:
``classes`` (sorted class ids), ``ids_for_class(c)`` (sorted image ids that
contain class c), ``load_image(image_id)`` (uint8 [H, W, 3]) and
``load_mask(image_id, c)`` (uint8 [H, W], values {0, 1}).
"""

from __future__ import annotations

import json
import os
from functools import lru_cache

import numpy as np

# Shape vocabulary of the synthetic source; class id indexes this tuple.
SHAPES = ("square", "circle", "triangle", "diamond", "plus")


class SyntheticShapes:
    """In-memory geometric-shapes dataset: class = shape type, one shape per image.

    Images are noise backgrounds with a single bright shape; everything is a
    pure function of (seed, image index), so the dataset is reproducible
    across runs and platforms without touching disk.
    """

    def __init__(self, n_classes: int = 3, images_per_class: int = 10, image_size: int = 64, seed: int = 0):
        if not 1 <= n_classes <= len(SHAPES):
            raise ValueError(f"n_classes must be in [1, {len(SHAPES)}], got {n_classes}")
        self.n_classes = n_classes
        self.images_per_class = images_per_class
        self.image_size = image_size
        self.seed = seed
        self._ids = [f"synth_{i:04d}" for i in range(n_classes * images_per_class)]

    @property
    def classes(self) -> list[int]:
        return list(range(self.n_classes))

    def ids_for_class(self, class_id: int) -> list[str]:
        return [self._ids[i] for i in range(len(self._ids)) if i % self.n_classes == class_id]

    def _index(self, image_id: str) -> int:
        idx = int(image_id.split("_")[1])
        if not 0 <= idx < len(self._ids):
            raise KeyError(f"unknown synthetic image id {image_id!r}")
        return idx

    @lru_cache(maxsize=512)
    def _render(self, idx: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.Generator(np.random.PCG64(self.seed * 1_000_003 + idx))
        s = self.image_size
        image = rng.integers(0, 80, size=(s, s, 3), dtype=np.int64)
        class_id = idx % self.n_classes
        r = int(rng.uniform(0.18, 0.30) * s)
        r = max(r, 3)
        cy = int(rng.integers(r + 1, s - r - 1))
        cx = int(rng.integers(r + 1, s - r - 1))
        yy, xx = np.mgrid[0:s, 0:s]
        dy, dx = np.abs(yy - cy), np.abs(xx - cx)
        shape = SHAPES[class_id]
        if shape == "square":
            mask = np.maximum(dy, dx) <= r
        elif shape == "circle":
            mask = dy * dy + dx * dx <= r * r
        elif shape == "triangle":
            mask = (yy >= cy - r) & (yy <= cy + r) & (dx * 2 <= (yy - (cy - r)))
        elif shape == "diamond":
            mask = dy + dx <= r
        else:  # plus
            arm = max(r // 3, 1)
            mask = ((dx <= arm) & (dy <= r)) | ((dy <= arm) & (dx <= r))
        color = rng.integers(170, 256, size=3)
        jitter = rng.integers(-15, 16, size=(s, s, 3))
        fg = np.clip(color[None, None, :] + jitter, 0, 255)
        image = np.where(mask[:, :, None], fg, image)
        return image.astype(np.uint8), mask.astype(np.uint8)

    def load_image(self, image_id: str) -> np.ndarray:
        return self._render(self._index(image_id))[0]

    def load_mask(self, image_id: str, class_id: int) -> np.ndarray:
        idx = self._index(image_id)
        if idx % self.n_classes != class_id:
            return np.zeros((self.image_size, self.image_size), dtype=np.uint8)
        return self._render(idx)[1]


class PascalVoc:
    """VOC2012-style folder source: JPEGImages/ plus indexed-PNG class annotations.

    Annotation pixel value c in 1..20 marks class id c-1; 0 is background and
    255 is ignore.  The annotation directory is scanned once at construction.
    """

    def __init__(self, root: str, annotation_dir: str = "SegmentationClassAug"):
        from PIL import Image

        self.root = root
        self.image_dir = os.path.join(root, "JPEGImages")
        self.ann_dir = os.path.join(root, annotation_dir)
        if not os.path.isdir(self.ann_dir):
            fallback = os.path.join(root, "SegmentationClass")
            if os.path.isdir(fallback):
                self.ann_dir = fallback
            else:
                raise FileNotFoundError(f"no annotation directory under {root}")
        self._by_class: dict[int, list[str]] = {}
        for name in sorted(os.listdir(self.ann_dir)):
            if not name.endswith(".png"):
                continue
            image_id = name[:-4]
            labels = np.unique(np.array(Image.open(os.path.join(self.ann_dir, name))))
            for lab in labels:
                if 1 <= lab <= 20:
                    self._by_class.setdefault(int(lab) - 1, []).append(image_id)

    @property
    def classes(self) -> list[int]:
        return sorted(self._by_class)

    def ids_for_class(self, class_id: int) -> list[str]:
        return list(self._by_class.get(class_id, []))

    def load_image(self, image_id: str) -> np.ndarray:
        from PIL import Image

        path = os.path.join(self.image_dir, image_id + ".jpg")
        if not os.path.exists(path):
            raise FileNotFoundError(f"image file not found: {path}")
        return np.array(Image.open(path).convert("RGB"))

    def load_mask(self, image_id: str, class_id: int) -> np.ndarray:
        from PIL import Image

        path = os.path.join(self.ann_dir, image_id + ".png")
        if not os.path.exists(path):
            raise FileNotFoundError(f"annotation file not found: {path}")
        labels = np.array(Image.open(path))
        return (labels == class_id + 1).astype(np.uint8)


class CocoInstances:
    """COCO-style source: instances_<split>.json with polygon segmentations.

    Class ids are 0..n-1 over the annotation file's categories sorted by
    category id.  Masks are the union of a class's polygons in an image;
    RLE/crowd instances are skipped.
    """

    def __init__(self, root: str, split: str = "train2014"):
        self.root = root
        self.split = split
        ann_path = os.path.join(root, "annotations", f"instances_{split}.json")
        if not os.path.exists(ann_path):
            raise FileNotFoundError(f"annotation file not found: {ann_path}")
        with open(ann_path) as fh:
            data = json.load(fh)
        cat_ids = sorted(c["id"] for c in data["categories"])
        self._class_of_cat = {cid: i for i, cid in enumerate(cat_ids)}
        self._images = {img["id"]: img for img in data["images"]}
        self._polygons: dict[tuple[int, int], list[list[float]]] = {}
        by_class: dict[int, set[int]] = {}
        for ann in data["annotations"]:
            if ann.get("iscrowd", 0) or not isinstance(ann["segmentation"], list):
                continue
            class_id = self._class_of_cat[ann["category_id"]]
            img_id = ann["image_id"]
            self._polygons.setdefault((img_id, class_id), []).extend(ann["segmentation"])
            by_class.setdefault(class_id, set()).add(img_id)
        self._by_class = {c: sorted(str(i) for i in ids) for c, ids in by_class.items()}

    @property
    def classes(self) -> list[int]:
        return sorted(self._by_class)

    def ids_for_class(self, class_id: int) -> list[str]:
        return list(self._by_class.get(class_id, []))

    def load_image(self, image_id: str) -> np.ndarray:
        from PIL import Image

        info = self._images[int(image_id)]
        path = os.path.join(self.root, self.split, info["file_name"])
        if not os.path.exists(path):
            raise FileNotFoundError(f"image file not found: {path}")
        return np.array(Image.open(path).convert("RGB"))

    def load_mask(self, image_id: str, class_id: int) -> np.ndarray:
        from PIL import Image, ImageDraw

        info = self._images[int(image_id)]
        h, w = info["height"], info["width"]
        canvas = Image.new("L", (w, h), 0)
        draw = ImageDraw.Draw(canvas)
        for poly in self._polygons.get((int(image_id), class_id), []):
            if len(poly) >= 6:
                draw.polygon([tuple(poly[i : i + 2]) for i in range(0, len(poly), 2)], fill=1)
        return np.array(canvas, dtype=np.uint8)
