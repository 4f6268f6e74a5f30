"""PNG readers and writers for label masks and RGB tiles."""

import logging
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

MAX_LABEL = np.iinfo(np.uint16).max

PathLike = Union[str, Path]


def read_mask_png(path: PathLike) -> np.ndarray:
    """Read a single-channel label PNG as an int32 (H, W) array."""
    with Image.open(path) as img:
        if img.mode not in ("I;16", "I;16B", "I;16L", "I", "L", "P"):
            raise ValueError(f"{path}: mask must be a single-channel label image, got mode {img.mode}")
        labels = np.array(img)

    if labels.ndim != 2:
        raise ValueError(f"{path}: mask must be 2-D, got shape {labels.shape}")
    labels = labels.astype(np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > MAX_LABEL:
        raise ValueError(f"{path}: label-range overflow (values must lie in 0..{MAX_LABEL})")
    return labels.astype(np.int32)


def write_mask_png(path: PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > MAX_LABEL):
        raise ValueError(f"label-range overflow writing {path}: ids must lie in 0..{MAX_LABEL}")
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG")


def read_rgb_png(path: PathLike) -> np.ndarray:
    """Read an 8-bit RGB PNG as uint8 (H, W, 3)."""
    with Image.open(path) as img:
        return np.array(img.convert("RGB"), dtype=np.uint8)


def write_rgb_png(path: PathLike, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected uint8 (H, W, 3), got {rgb.dtype} {rgb.shape}")
    Image.fromarray(rgb).save(path, format="PNG")


def to_unit_range(rgb: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) -> float32 (3, H, W) in [-1, 1]."""
    chw = np.transpose(np.asarray(rgb, dtype=np.float32), (2, 0, 1))
    return chw / 127.5 - 1.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    """float (3, H, W) in [-1, 1] -> uint8 (H, W, 3)."""
    image = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    hwc = np.transpose((image + 1.0) * 127.5, (1, 2, 0))
    return np.round(hwc).astype(np.uint8)
