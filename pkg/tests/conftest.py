"""Shared fixtures: synthetic crack images written as PNG datasets, tiny models."""

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from src.model import ModelConfig, build_model

TINY_STUB_CHANNELS = (4, 8, 8, 8, 8)


def make_crack(size: tuple[int, int], seed: int = 0, thickness: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """A dark meandering crack on a light textured background.

    Returns (rgb uint8 (H, W, 3), mask uint8 (H, W) with values 0/255).
    """
    h, w = size
    rng = np.random.default_rng(seed)
    background = rng.normal(180.0, 8.0, size=(h, w)).clip(0, 255)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    phase = rng.uniform(0, 2 * np.pi)
    center = w / 2 + (w / 6) * np.sin(2 * np.pi * rows / h + phase) + rng.uniform(-w / 8, w / 8)
    mask = (np.abs(cols - center) <= thickness / 2).astype(np.uint8) * 255
    gray = np.where(mask > 0, 40.0, background)
    rgb = np.repeat(gray[..., None], 3, axis=2).round().astype(np.uint8)
    return rgb, mask


def write_crack_dataset(
    root: Path, n: int, size: tuple[int, int] = (32, 32), seed: int = 0, thickness: int = 3
) -> Path:
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(n):
        rgb, mask = make_crack(size, seed=seed + i, thickness=thickness)
        Image.fromarray(rgb).save(root / "images" / f"crack_{i:03d}.png")
        Image.fromarray(mask).save(root / "masks" / f"crack_{i:03d}.png")
    return root


@pytest.fixture
def crack_dataset(tmp_path) -> Path:
    """Two 32x32 image/mask pairs."""
    return write_crack_dataset(tmp_path / "cracks", 2)


@pytest.fixture
def four_image_dataset(tmp_path) -> Path:
    return write_crack_dataset(tmp_path / "cracks4", 4, seed=10)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(base_channels=4, groups=2, stub_channels=TINY_STUB_CHANNELS)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)
