"""Command-line entry point: train, eval, predict, params subcommands."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np
import torch
from PIL import Image

from .config import RunConfig, build_config, parse_config_file
from .episodes import (
    Episode,
    EpisodeDescriptor,
    image_to_tensor,
    mask_to_tensor,
    read_manifest,
    test_pair_list,
    write_manifest,
)
from .evaluation import evaluate, kshot_merge, upsample_logits
from .model import EpisodeModel
from .training import (
    Trainer,
    count_learnable_params,
    make_source,
    make_split,
    model_from_checkpoint,
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file; CLI flags win over it")
    for field in dataclasses.fields(RunConfig):
        flag = "--" + field.name.replace("_", "-")
        if str(field.type).startswith("bool"):
            parser.add_argument(flag, default=None, choices=["true", "false"])
        else:
            parser.add_argument(flag, default=None)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    names = {f.name for f in dataclasses.fields(RunConfig)}
    cli_values = {k: v for k, v in vars(args).items() if k in names and v is not None}
    return build_config(file_values, cli_values, os.environ)


def _load_image_file(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(f"image file not found: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise RuntimeError(f"could not read image {path}: {exc}") from exc


def _load_mask_file(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(f"mask file not found: {path}")
    try:
        with Image.open(path) as img:
            return (np.asarray(img.convert("L")) > 127).astype(np.uint8)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise RuntimeError(f"could not read mask {path}: {exc}") from exc


def _write_mask_png(path: str, mask: torch.Tensor) -> None:
    arr = (mask.detach().cpu().numpy() > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def cmd_train(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    trainer = Trainer(config)
    print("effective config:")
    print(config.to_text(), end="")
    print(f"learnable parameters: {count_learnable_params(trainer.model)}")
    if args.resume:
        trainer.load_checkpoint(args.resume)
        print(f"resumed from {args.resume} at epoch {trainer.epoch}, step {trainer.step}")
    path = trainer.train()
    print(f"final checkpoint: {path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    overrides = {"k": int(args.k)} if args.k is not None else None
    model, config = model_from_checkpoint(args.checkpoint, overrides)
    if args.data_root is not None:
        config.data_root = args.data_root
    elif config.data_root is None:
        config.data_root = os.environ.get("FEWSEG_DATA_ROOT")
    source = make_source(config)
    split = make_split(config)
    if os.path.exists(args.manifest):
        descriptors = read_manifest(args.manifest)
    else:
        descriptors = test_pair_list(source, split, k=config.k, n=args.episodes, seed=config.seed)
        write_manifest(args.manifest, descriptors)
        print(f"wrote new episode manifest: {args.manifest}")
    mask_dir = args.save_masks
    if mask_dir:
        os.makedirs(mask_dir, exist_ok=True)
    report = evaluate(model, source, descriptors, config.image_size, mask_dir=mask_dir)
    print(report.to_text(), end="")
    if args.out:
        report.write(args.out)
        print(f"wrote metrics to {args.out}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    if len(args.support) != len(args.support_mask):
        raise ValueError(
            f"got {len(args.support)} support images but {len(args.support_mask)} support masks"
        )
    model, config = model_from_checkpoint(args.checkpoint)
    size = config.image_size
    query = image_to_tensor(_load_image_file(args.query), size)
    supports = torch.stack([image_to_tensor(_load_image_file(p), size) for p in args.support])
    masks = torch.stack([mask_to_tensor(_load_mask_file(p), size) for p in args.support_mask])
    episode = Episode(
        query_image=query,
        query_mask=torch.zeros(size, size),
        support_images=supports,
        support_masks=masks,
        class_id=-1,
        descriptor=EpisodeDescriptor(-1, args.query, tuple(args.support)),
    )
    prediction, intermediates = model.predict_episode(episode)
    _write_mask_png(args.out, prediction)
    print(f"wrote predicted mask: {args.out}")
    if args.intermediates:
        stem, ext = os.path.splitext(args.out)
        for level, mask in intermediates.items():
            path = f"{stem}_level{level}{ext or '.png'}"
            _write_mask_png(path, mask)
            print(f"wrote level-{level} intermediate mask: {path}")
    return 0


def cmd_params(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    model = EpisodeModel(config)
    print(f"learnable parameters: {count_learnable_params(model)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewseg", description="few-shot segmentation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model episodically")
    _add_config_flags(p_train)
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a fixed episode list")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", required=True, help="episode list; created if absent")
    p_eval.add_argument("--episodes", type=int, default=1000, help="episodes when creating a manifest")
    p_eval.add_argument("--k", default=None, help="support shots per episode")
    p_eval.add_argument("--data-root", default=None)
    p_eval.add_argument("--save-masks", default=None, help="directory for predicted mask PNGs")
    p_eval.add_argument("--out", default=None, help="write metrics to this file")
    p_eval.set_defaults(func=cmd_eval)

    p_pred = sub.add_parser("predict", help="segment one query image from support examples")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--query", required=True)
    p_pred.add_argument("--support", action="append", required=True)
    p_pred.add_argument("--support-mask", action="append", required=True)
    p_pred.add_argument("--out", required=True)
    p_pred.add_argument(
        "--intermediates", action="store_true", help="also write the three coarse-level masks"
    )
    p_pred.set_defaults(func=cmd_predict)

    p_params = sub.add_parser("params", help="print the learnable parameter count")
    _add_config_flags(p_params)
    p_params.set_defaults(func=cmd_params)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
