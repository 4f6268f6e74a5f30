"""Pytest configuration and shared fixtures."""

import json
import os
import sys

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dataset import AugmentToggles, DatasetItem  # noqa: E402
from image_io import to_unit_range, write_mask_png, write_rgb_png  # noqa: E402
from network import NetworkConfig  # noqa: E402
from trainer import TrainConfig  # noqa: E402

ORGAN_COLOURS = {
    "colon": (200, 120, 180),
    "lung": (150, 170, 220),
    "kidney": (220, 160, 140),
}


def disc_mask(size, centres, radius):
    """Label map with one filled disc per centre, ids in order."""
    yy, xx = np.mgrid[:size, :size]
    labels = np.zeros((size, size), dtype=np.int32)
    for inst_id, (cy, cx) in enumerate(centres, start=1):
        labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2] = inst_id
    return labels


def stained_image(labels, organ, seed=0):
    """uint8 RGB tile: organ background colour, darker nuclei, a little noise."""
    rng = np.random.default_rng(seed)
    base = np.array(ORGAN_COLOURS.get(organ, (180, 180, 180)), dtype=np.float64)
    image = np.broadcast_to(base, labels.shape + (3,)).copy()
    image[labels > 0] *= 0.4
    image += rng.normal(0.0, 6.0, image.shape)
    return np.clip(np.round(image), 0, 255).astype(np.uint8)


def write_dataset(root, pairs, manifest=True):
    """pairs: iterable of (id, organ, labels, rgb)."""
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for source_id, organ, labels, rgb in pairs:
        write_rgb_png(root / "images" / f"{source_id}.png", rgb)
        write_mask_png(root / "masks" / f"{source_id}.png", labels)
        records.append({"id": source_id, "organ": organ})
    if manifest:
        with open(root / "manifest.jsonl", "w") as f:
            for record in records:
                f.write(json.dumps(record) + "\n")
    return root


TOY_LAYOUTS = [
    [(8, 8), (8, 22), (22, 14)],
    [(10, 10), (22, 22)],
    [(7, 24), (16, 8), (24, 20)],
    [(12, 12), (12, 25), (25, 6), (25, 20)],
]


@pytest.fixture
def toy_pairs():
    """Four 32x32 (id, organ, labels, rgb) pairs over two organs."""
    organs = ["colon", "colon", "lung", "lung"]
    pairs = []
    for i, (organ, centres) in enumerate(zip(organs, TOY_LAYOUTS)):
        labels = disc_mask(32, centres, 4)
        pairs.append((f"tile_{i:02d}", organ, labels, stained_image(labels, organ, seed=i)))
    return pairs


@pytest.fixture
def toy_dataset_dir(tmp_path, toy_pairs):
    return write_dataset(tmp_path / "toy", toy_pairs)


@pytest.fixture
def toy_items(toy_pairs):
    return [
        DatasetItem(to_unit_range(rgb), labels, organ, source_id)
        for source_id, organ, labels, rgb in toy_pairs
    ]


@pytest.fixture
def tiny_network():
    return NetworkConfig(
        image_size=32,
        n_blocks=4,
        channels=[16, 16, 8, 8],
        style_dim=8,
        norm_hidden=16,
        encoder_base_channels=8,
        disc_base_channels=8,
        disc_n_layers=3,
        disc_n_scales=2,
    )


@pytest.fixture
def tiny_train_config(tiny_network):
    return TrainConfig(
        network=tiny_network,
        augment=AugmentToggles.disabled(),
        epochs=1,
        batch_size=2,
        checkpoint_every=0,
        eval_every_epochs=0,
        num_workers=1,
        holdout_fraction=0.0,
    )


TINY_CONFIG = """
logging:
  level: WARNING
  format: "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
  metrics_log: metrics.jsonl

data:
  patch_size: 32
  allow_partial: false
  load_workers: 2
  holdout_fraction: 0.0

augment:
  hflip: 0.0
  vflip: 0.0
  rotate: 0.0
  median_blur: 0.0

network:
  image_size: 32
  n_blocks: 4
  channels: [16, 16, 8, 8]
  style_dim: 8
  norm_hidden: 16
  encoder_base_channels: 8
  discriminator:
    base_channels: 8
    n_layers: 3
    n_scales: 2
    sees_instance_maps: true
    spectral_norm: true

losses:
  extractor: random
  regularizer: none

training:
  epochs: 1
  batch_size: 2
  seed: 0
  checkpoint_every: 0
  eval_every_epochs: 0
  num_workers: 1

maskgen:
  nucleus:
    radius_range: [2, 5]
    eccentricity_range: [0.0, 0.5]
    vertex_count: 16
    radial_noise_amplitude: 0.2
    smoothing_passes: 2
  layout:
    canvas: [32, 32]
    nucleus_count_range: [2, 5]
    max_pairwise_overlap_fraction: 0.2
    cluster_probability: 0.3
    cluster_spread: 2.0
    seed: 0
  max_concurrent_writes: 2

evaluation:
  ssim_data_range: 1.0
  workers: 2

downstream:
  depth: 2
  width: 4
  epochs: 1
  batch_size: 2
  lr: 1.0e-3
  seed: 0
  synthetic_count: 2
  organs: []

output:
  format: json
  max_concurrent_writes: 2
"""


@pytest.fixture
def mock_config(tmp_path):
    """Tiny configuration file that every subcommand can run with on CPU."""
    config_dir = tmp_path / "config"
    config_dir.mkdir()
    config_file = config_dir / "config.yaml"
    config_file.write_text(TINY_CONFIG)
    return str(config_file)
