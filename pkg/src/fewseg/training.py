"""Episodic training loop: Adam updates, logging, checkpoints, validation.

One optimizer step consumes ``batch_size`` episodes (forwarded one at a time,
losses averaged).  Checkpoints capture parameters, optimizer state, epoch/step
counters, the config snapshot, and all RNG states, so a resumed run replays
the exact step sequence of an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import random
import time

import numpy as np
import torch

from .config import RunConfig
from .datasets import CocoInstances, PascalVoc, SyntheticShapes
from .episodes import (
    EpisodeSampler,
    build_fold_split,
    synthetic_split,
    test_pair_list,
    write_manifest,
)
from .evaluation import evaluate
from .model import EpisodeModel

log = logging.getLogger("fewseg")


def count_learnable_params(model) -> int:
    """Trainable parameters only; the frozen backbone contributes zero."""
    modules = []
    if hasattr(model, "backbone"):
        modules += [model.backbone, model.net]
    else:
        modules.append(model)
    return sum(p.numel() for m in modules for p in m.parameters() if p.requires_grad)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    random.seed(seed)


def make_source(config: RunConfig):
    if config.dataset == "synthetic":
        return SyntheticShapes(
            n_classes=config.synth_classes,
            images_per_class=config.synth_images_per_class,
            image_size=config.image_size,
            seed=config.seed,
        )
    if config.data_root is None:
        raise ValueError(f"dataset {config.dataset!r} needs data_root (or ${'FEWSEG_DATA_ROOT'})")
    if config.dataset == "pascal":
        return PascalVoc(config.data_root)
    return CocoInstances(config.data_root)


def make_split(config: RunConfig):
    if config.dataset == "synthetic":
        return synthetic_split(config.synth_classes)
    return build_fold_split(config.dataset, config.fold)


class Trainer:
    """Owns the model, optimizer, sampler, and the training/validation loop."""

    def __init__(self, config: RunConfig):
        seed_everything(config.seed)
        self.config = config
        self.source = make_source(config)
        self.split = make_split(config)
        self.model = EpisodeModel(config)
        self.optimizer = torch.optim.Adam(self.model.net.parameters(), lr=config.lr)
        self.sampler = EpisodeSampler(
            self.source, self.split, "train", k=1, image_size=config.image_size, seed=config.seed
        )
        self.epoch = 0
        self.step = 0
        self._fixed: list | None = None
        if config.fixed_episodes > 0:
            self._fixed = [self.sampler.sample() for _ in range(config.fixed_episodes)]
        self.val_manifest = test_pair_list(
            self.source, self.split, k=config.k, n=config.val_episodes, seed=config.seed
        )
        os.makedirs(config.out_dir, exist_ok=True)
        self._metrics_path = os.path.join(config.out_dir, "metrics.jsonl")

    def _next_batch(self) -> list:
        if self._fixed is not None:
            n = len(self._fixed)
            start = (self.step * self.config.batch_size) % n
            return [self._fixed[(start + i) % n] for i in range(self.config.batch_size)]
        return [self.sampler.sample() for _ in range(self.config.batch_size)]

    def train_step(self) -> float:
        """One optimizer step over a batch of episodes; returns the batch loss."""
        self.model.train()
        episodes = self._next_batch()
        self.optimizer.zero_grad()
        losses = [self.model.episode_loss(ep) for ep in episodes]
        loss = torch.stack(losses).mean()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise RuntimeError(
                f"non-finite loss {value} at step {self.step} (epoch {self.epoch}); "
                f"episode losses: {[float(l) for l in losses]}; lr={self.config.lr}"
            )
        loss.backward()
        self.optimizer.step()
        self.step += 1
        return value

    def _log_metric(self, record: dict) -> None:
        with open(self._metrics_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")

    def validate(self) -> float:
        self.model.eval()
        report = evaluate(self.model, self.source, self.val_manifest, self.config.image_size)
        return report.miou

    def train(self) -> str:
        """Run the configured number of epochs; returns the last checkpoint path."""
        cfg = self.config
        steps_per_epoch = max(1, cfg.episodes_per_epoch // cfg.batch_size)
        log.info("training config:\n%s", cfg.to_text().rstrip())
        ckpt_path = os.path.join(cfg.out_dir, "checkpoint.pt")
        write_manifest(os.path.join(cfg.out_dir, "val_manifest.txt"), self.val_manifest)
        while self.epoch < cfg.epochs:
            t0 = time.time()
            epoch_losses = []
            for _ in range(steps_per_epoch):
                loss = self.train_step()
                epoch_losses.append(loss)
                self._log_metric({"step": self.step, "epoch": self.epoch, "loss": loss})
            self.epoch += 1
            mean_loss = sum(epoch_losses) / len(epoch_losses)
            record = {"epoch": self.epoch, "mean_loss": mean_loss, "seconds": time.time() - t0}
            if self.epoch % cfg.val_interval == 0:
                record["val_miou"] = self.validate()
            self._log_metric(record)
            log.info(
                "epoch %d/%d: mean loss %.4f%s (%.1fs)",
                self.epoch,
                cfg.epochs,
                mean_loss,
                f", val mIoU {record['val_miou']:.4f}" if "val_miou" in record else "",
                record["seconds"],
            )
            self.save_checkpoint(ckpt_path)
        return ckpt_path

    def save_checkpoint(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        torch.save(
            {
                "model": self.model.net.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "epoch": self.epoch,
                "step": self.step,
                "config": dataclasses.asdict(self.config),
                "torch_rng": torch.get_rng_state(),
                "sampler_state": self.sampler.state,
            },
            path,
        )

    def load_checkpoint(self, path: str) -> None:
        state = load_checkpoint_file(path)
        if state["config"]["backbone"] != self.config.backbone or state["config"]["width"] != self.config.width:
            raise ValueError(
                f"checkpoint at {path} was trained with backbone="
                f"{state['config']['backbone']} width={state['config']['width']}, "
                f"which does not match this config "
                f"(backbone={self.config.backbone} width={self.config.width})"
            )
        self.model.net.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.epoch = state["epoch"]
        self.step = state["step"]
        torch.set_rng_state(state["torch_rng"])
        self.sampler.state = state["sampler_state"]


def load_checkpoint_file(path: str) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint file not found: {path}")
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise RuntimeError(f"could not read checkpoint {path}: {exc}") from exc


def model_from_checkpoint(path: str, overrides: dict | None = None) -> tuple[EpisodeModel, RunConfig]:
    """Rebuild the model a checkpoint describes and load its weights.

    ``overrides`` may adjust plumbing fields (paths, k, ...) but not the
    architecture: backbone/width/bi_transformer mismatches are refused.
    """
    state = load_checkpoint_file(path)
    snapshot = dict(state["config"])
    if overrides:
        for key in ("backbone", "width", "bi_transformer"):
            if key in overrides and overrides[key] is not None and overrides[key] != snapshot[key]:
                raise ValueError(
                    f"cannot override {key}: checkpoint has {snapshot[key]!r}, "
                    f"requested {overrides[key]!r}"
                )
        snapshot.update({k: v for k, v in overrides.items() if v is not None})
    config = RunConfig(**snapshot)
    model = EpisodeModel(config)
    model.net.load_state_dict(state["model"])
    model.eval()
    return model, config
