"""Shared fixtures: tiny attention layers, toy models, synthetic episode sources."""

import pytest
import torch

from fewseg.attention import MaskedSqueezeAttention
from fewseg.config import RunConfig
from fewseg.datasets import SyntheticShapes
from fewseg.episodes import EpisodeSampler, synthetic_split
from fewseg.model import EpisodeModel


def make_ttl(
    in_dim=3,
    hid_dim=4,
    out_dim=4,
    in_grid=(3, 3),
    mode="keep",
    drop_rate=0.0,
    self_branch=False,
    seed=0,
):
    """A small randomly initialized attention layer in eval mode."""
    torch.manual_seed(seed)
    ttl = MaskedSqueezeAttention(in_dim, hid_dim, out_dim, in_grid, mode, drop_rate, self_branch)
    ttl.eval()
    return ttl


def random_mask(grid, rng, ensure_foreground=True):
    """Random binary mask on ``grid`` drawn from a numpy generator."""
    mask = torch.from_numpy((rng.random(grid) < 0.6).astype("float32"))
    if ensure_foreground and mask.sum() == 0:
        mask[grid[0] // 2, grid[1] // 2] = 1.0
    return mask


@pytest.fixture(scope="session")
def toy_config():
    return RunConfig(
        backbone="toy",
        dataset="synthetic",
        image_size=64,
        width=8,
        drop_rate=0.0,
        batch_size=2,
        episodes_per_epoch=4,
        epochs=1,
        val_episodes=2,
    )


@pytest.fixture(scope="session")
def toy_model(toy_config):
    torch.manual_seed(0)
    return EpisodeModel(toy_config)


@pytest.fixture(scope="session")
def synth_source():
    return SyntheticShapes(n_classes=3, images_per_class=10, image_size=64, seed=0)


@pytest.fixture(scope="session")
def synth_split():
    return synthetic_split(3)


@pytest.fixture()
def synth_sampler(synth_source, synth_split):
    return EpisodeSampler(synth_source, synth_split, "train", k=1, image_size=64, seed=0)


@pytest.fixture()
def sample_episode(synth_sampler):
    return synth_sampler.sample()
