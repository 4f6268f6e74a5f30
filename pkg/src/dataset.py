"""Paired image/mask ingestion, patching, augmentation and batching."""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.ndimage import median_filter

from config import Config
from featurize import (
    ConditionMaps,
    ConditionPyramid,
    build_condition_pyramid,
    featurize_mask,
    relabel_instances,
)
from image_io import read_mask_png, read_rgb_png, to_unit_range

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
IMAGES_DIR = "images"
MASKS_DIR = "masks"
UNKNOWN_ORGAN = "unknown"


@dataclass
class DatasetItem:
    """image: float32 (3, H, W) in [-1, 1]; inst: int32 (H, W) instance labels."""

    image: np.ndarray
    inst: np.ndarray
    organ: str
    source_id: str
    patch: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"{self.source_id}: image must be (3, H, W), got {self.image.shape}")
        if self.image.shape[1:] != self.inst.shape:
            raise ValueError(
                f"{self.source_id}: image {self.image.shape[1:]} and mask {self.inst.shape} disagree"
            )

    @property
    def item_id(self) -> str:
        return f"{self.source_id}_{self.patch[0]}_{self.patch[1]}"


@dataclass(frozen=True)
class AugmentToggles:
    """Per-transform application probabilities; 0 disables a transform."""

    hflip: float = 0.5
    vflip: float = 0.5
    rotate: float = 0.5
    median_blur: float = 0.2

    def __post_init__(self):
        for name in ("hflip", "vflip", "rotate", "median_blur"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"augment.{name} must lie in [0, 1], got {value}")

    @classmethod
    def disabled(cls) -> "AugmentToggles":
        return cls(0.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_config(cls, config: Config, section: str = "augment") -> "AugmentToggles":
        values = config.get(section, {}) or {}
        defaults = cls()
        return cls(
            **{
                name: float(values.get(name, getattr(defaults, name)))
                for name in ("hflip", "vflip", "rotate", "median_blur")
            }
        )


@dataclass
class Batch:
    images: torch.Tensor
    pyramid: ConditionPyramid
    maps: ConditionMaps


def read_manifest(path: Union[str, Path]) -> List[Dict[str, Any]]:
    records = []
    with open(path, "r") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_no}: invalid manifest line: {e}")
    return records


def write_manifest(path: Union[str, Path], records: Sequence[Dict[str, Any]]) -> None:
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")


def patchify(
    image: np.ndarray, inst: np.ndarray, patch_size: int
) -> List[Tuple[Tuple[int, int], np.ndarray, np.ndarray]]:
    """Non-overlapping grid crops; the remainder is filled by mirror padding.

    Every crop is relabeled so ids are compact and 4-connected.
    """
    _, height, width = image.shape
    rows = max(1, math.ceil(height / patch_size))
    cols = max(1, math.ceil(width / patch_size))
    pad_h = rows * patch_size - height
    pad_w = cols * patch_size - width
    if pad_h or pad_w:
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode="symmetric")
        inst = np.pad(inst, ((0, pad_h), (0, pad_w)), mode="symmetric")

    patches = []
    for r in range(rows):
        for c in range(cols):
            ys = slice(r * patch_size, (r + 1) * patch_size)
            xs = slice(c * patch_size, (c + 1) * patch_size)
            patches.append(((r, c), image[:, ys, xs].copy(), relabel_instances(inst[ys, xs])))
    return patches


class DatasetReader:
    """Load a dataset directory (images/, masks/, manifest.jsonl) with parallel readers."""

    def __init__(self, patch_size: int, load_workers: int = 4, allow_partial: bool = False):
        if patch_size < 1:
            raise ValueError(f"patch_size must be positive, got {patch_size}")
        self.patch_size = patch_size
        self.load_workers = load_workers
        self.allow_partial = allow_partial
        self.errors: List[Tuple[str, str]] = []

    @classmethod
    def from_config(cls, config: Config) -> "DatasetReader":
        return cls(
            patch_size=config.patch_size,
            load_workers=int(config.get("data.load_workers", 4)),
            allow_partial=bool(config.get("data.allow_partial", False)),
        )

    def _entries(self, root: Path) -> List[Dict[str, Any]]:
        manifest = root / MANIFEST_NAME
        if manifest.exists():
            return read_manifest(manifest)
        image_dir = root / IMAGES_DIR
        if not image_dir.is_dir():
            return []
        logger.warning(f"No {MANIFEST_NAME} in {root}; organ tags default to '{UNKNOWN_ORGAN}'")
        return [{"id": p.stem, "organ": UNKNOWN_ORGAN} for p in sorted(image_dir.glob("*.png"))]

    def _load_entry(self, root: Path, entry: Dict[str, Any]) -> List[DatasetItem]:
        if "id" not in entry:
            raise ValueError(f"manifest record without 'id': {entry}")
        source_id = str(entry["id"])
        organ = str(entry.get("organ", UNKNOWN_ORGAN))
        image_path = root / IMAGES_DIR / f"{source_id}.png"
        mask_path = root / MASKS_DIR / f"{source_id}.png"
        for path in (image_path, mask_path):
            if not path.exists():
                raise FileNotFoundError(f"missing pair file {path}")

        image = to_unit_range(read_rgb_png(image_path))
        inst = read_mask_png(mask_path)
        if image.shape[1:] != inst.shape:
            raise ValueError(f"image {image.shape[1:]} and mask {inst.shape} sizes differ")

        return [
            DatasetItem(patch_image, patch_inst, organ, source_id, position)
            for position, patch_image, patch_inst in patchify(image, inst, self.patch_size)
        ]

    def ingest(self, directory: Union[str, Path]) -> List[DatasetItem]:
        root = Path(directory)
        if not root.is_dir():
            raise FileNotFoundError(f"Dataset directory not found: {root}")

        entries = self._entries(root)
        if not entries:
            logger.warning(f"Dataset directory {root} is empty")
            return []

        logger.info(f"Ingesting {len(entries)} image/mask pairs from {root}")
        self.errors = []

        def _safe_load(entry):
            try:
                return self._load_entry(root, entry), None
            except (OSError, ValueError) as e:
                return [], (str(entry.get("id", "?")), str(e))

        items: List[DatasetItem] = []
        with ThreadPoolExecutor(max_workers=max(1, self.load_workers)) as executor:
            for loaded, error in executor.map(_safe_load, entries):
                if error is not None:
                    self.errors.append(error)
                    logger.error(f"Failed to load {error[0]}: {error[1]}")
                    continue
                items.extend(loaded)

        if self.errors:
            report = "; ".join(f"{sid}: {msg}" for sid, msg in self.errors)
            if not self.allow_partial:
                raise ValueError(f"{len(self.errors)} of {len(entries)} pairs failed to load: {report}")
            logger.warning(f"Partial load: kept {len(entries) - len(self.errors)} of {len(entries)} pairs")

        logger.info(f"Ingest complete: {len(items)} patches")
        return items


def ingest(directory: Union[str, Path], patch_size: int, **kwargs) -> List[DatasetItem]:
    return DatasetReader(patch_size, **kwargs).ingest(directory)


def flip_item(item: DatasetItem, axis: int) -> DatasetItem:
    """axis -1 flips left-right, axis -2 top-bottom."""
    return replace(
        item,
        image=np.ascontiguousarray(np.flip(item.image, axis=axis)),
        inst=np.ascontiguousarray(np.flip(item.inst, axis=axis)),
    )


def rotate_item(item: DatasetItem, k: int) -> DatasetItem:
    return replace(
        item,
        image=np.ascontiguousarray(np.rot90(item.image, k, axes=(-2, -1))),
        inst=np.ascontiguousarray(np.rot90(item.inst, k, axes=(-2, -1))),
    )


def augment(item: DatasetItem, rng: np.random.Generator, toggles: AugmentToggles) -> DatasetItem:
    """Random flips, 90 degree rotations and a 3x3 median blur of the image.

    A fixed number of draws is taken so later items see the same stream
    whatever the toggles are.
    """
    draws = rng.random(4)
    k = int(rng.integers(1, 4))

    if draws[0] < toggles.hflip:
        item = flip_item(item, -1)
    if draws[1] < toggles.vflip:
        item = flip_item(item, -2)
    if draws[2] < toggles.rotate:
        item = rotate_item(item, k)
    if draws[3] < toggles.median_blur:
        item = replace(item, image=median_filter(item.image, size=(1, 3, 3), mode="reflect"))
    return item


def item_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def split_holdout(
    items: Sequence[DatasetItem], fraction: float, seed: int = 0
) -> Tuple[List[DatasetItem], List[DatasetItem]]:
    """Split by source image so patches of one image never straddle the split."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"holdout fraction must lie in [0, 1), got {fraction}")
    sources = sorted({item.source_id for item in items})
    n_hold = int(round(fraction * len(sources)))
    if fraction > 0 and len(sources) > 1:
        n_hold = min(max(n_hold, 1), len(sources) - 1)
    else:
        n_hold = 0
    order = np.random.default_rng(seed).permutation(len(sources))
    held = {sources[i] for i in order[:n_hold]}
    train = [item for item in items if item.source_id not in held]
    holdout = [item for item in items if item.source_id in held]
    logger.info(f"Holdout split: {len(train)} train / {len(holdout)} held-out patches")
    return train, holdout


def featurize_item(
    item: DatasetItem, level_sizes: Sequence[Tuple[int, int]]
) -> Tuple[np.ndarray, ConditionPyramid, ConditionMaps]:
    maps = featurize_mask(item.inst)
    pyramid = build_condition_pyramid(maps, level_sizes)
    return item.image, pyramid, maps.to_tensors()


def collate_batch(
    items: Sequence[DatasetItem],
    level_sizes: Sequence[Tuple[int, int]],
    workers: int = 1,
) -> Batch:
    """Featurize items (after any augmentation) and stack them; order follows items."""
    if not items:
        raise ValueError("cannot collate an empty batch")

    def _prepare(item):
        return featurize_item(item, level_sizes)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            prepared = list(executor.map(_prepare, items))
    else:
        prepared = [_prepare(item) for item in items]

    images = torch.as_tensor(np.stack([p[0] for p in prepared]), dtype=torch.float32)
    pyramid = ConditionPyramid.collate([p[1] for p in prepared])
    full = ConditionPyramid.collate([ConditionPyramid([p[2]]) for p in prepared]).levels[0]
    return Batch(images, pyramid, full)


def load_pairs(directory: Union[str, Path]) -> List[Dict[str, Any]]:
    """Unpatched (id, organ, image, mask) records of a dataset directory."""
    root = Path(directory)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"Manifest not found: {manifest}")
    records = []
    for entry in read_manifest(manifest):
        source_id = str(entry["id"])
        records.append(
            {
                "id": source_id,
                "organ": str(entry.get("organ", UNKNOWN_ORGAN)),
                "image": to_unit_range(read_rgb_png(root / IMAGES_DIR / f"{source_id}.png")),
                "mask": read_mask_png(root / MASKS_DIR / f"{source_id}.png"),
            }
        )
    return records
