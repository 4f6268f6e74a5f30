"""Instance-mask featurization: semantic, direction and distance maps."""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from skimage.measure import label as connected_components

logger = logging.getLogger(__name__)

MAPS_MAGIC = b"SIANMAPS"
MAPS_VERSION = 1
_MAPS_HEADER = struct.Struct("<8sHIII")

SEMANTIC_CHANNELS = 2
DIRECTION_CHANNELS = 2
DISTANCE_CHANNELS = 1


@dataclass
class ConditionMaps:
    """M (2 ch), P (2 ch) and Q (1 ch) aligned to one mask.

    Arrays are (C, H, W) numpy arrays for a single mask or (N, C, H, W)
    tensors once batched for the networks.
    """

    semantic: Union[np.ndarray, torch.Tensor]
    direction: Union[np.ndarray, torch.Tensor]
    distance: Union[np.ndarray, torch.Tensor]

    @property
    def spatial_size(self) -> Tuple[int, int]:
        return tuple(self.semantic.shape[-2:])

    def stacked(self) -> np.ndarray:
        return np.concatenate(
            [np.asarray(self.semantic), np.asarray(self.direction), np.asarray(self.distance)],
            axis=-3,
        )

    def to_tensors(self, dtype: torch.dtype = torch.float32) -> "ConditionMaps":
        def _as_batched(a):
            t = torch.as_tensor(np.asarray(a) if not torch.is_tensor(a) else a, dtype=dtype)
            return t.unsqueeze(0) if t.dim() == 3 else t

        return ConditionMaps(
            _as_batched(self.semantic), _as_batched(self.direction), _as_batched(self.distance)
        )


@dataclass
class ConditionPyramid:
    """Per-generator-layer condition maps, coarsest level first."""

    levels: List[ConditionMaps]

    def sizes(self) -> List[Tuple[int, int]]:
        return [level.spatial_size for level in self.levels]

    @staticmethod
    def collate(pyramids: Sequence["ConditionPyramid"]) -> "ConditionPyramid":
        if not pyramids:
            raise ValueError("cannot collate an empty list of pyramids")
        levels = []
        for parts in zip(*(p.levels for p in pyramids)):
            levels.append(
                ConditionMaps(
                    torch.cat([m.semantic for m in parts], dim=0),
                    torch.cat([m.direction for m in parts], dim=0),
                    torch.cat([m.distance for m in parts], dim=0),
                )
            )
        return ConditionPyramid(levels)


def validate_instance_mask(labels: np.ndarray, check_connectivity: bool = False) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"instance mask must be 2-D, got shape {labels.shape}")
    if labels.shape[0] < 1 or labels.shape[1] < 1:
        raise ValueError(f"instance mask must be at least 1x1, got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"instance mask must hold integers, got {labels.dtype}")
    if labels.size and labels.min() < 0:
        raise ValueError("instance mask holds negative labels")

    if check_connectivity:
        for inst_id in np.unique(labels):
            if inst_id == 0:
                continue
            _, n_parts = connected_components(labels == inst_id, connectivity=1, return_num=True)
            if n_parts != 1:
                raise ValueError(f"instance {inst_id} is split into {n_parts} regions")
    return labels


def relabel_instances(labels: np.ndarray) -> np.ndarray:
    """Split fragmented ids into 4-connected regions and compact ids to 1..K.

    New ids follow the raster order of each region's first pixel.
    """
    labels = validate_instance_mask(labels)
    out = np.zeros(labels.shape, dtype=np.int32)
    if not labels.any():
        return out

    # Touching regions with different ids must stay apart, so components are
    # found per id and then ordered by their first pixel.
    regions = []
    for inst_id in np.unique(labels):
        if inst_id == 0:
            continue
        parts = connected_components(labels == inst_id, connectivity=1)
        for part in range(1, parts.max() + 1):
            region = parts == part
            first = int(np.flatnonzero(region.ravel())[0])
            regions.append((first, region))

    regions.sort(key=lambda r: r[0])
    for new_id, (_, region) in enumerate(regions, start=1):
        out[region] = new_id
    return out


def semantic_map(labels: np.ndarray) -> np.ndarray:
    labels = validate_instance_mask(labels)
    nucleus = (labels > 0).astype(np.float32)
    return np.stack([1.0 - nucleus, nucleus]).astype(np.float32)


def direction_map(labels: np.ndarray) -> np.ndarray:
    """Unit vectors (dx, dy) from each nucleus pixel toward its instance centroid.

    Offsets are kept as exact integer numerators (count * centroid - count *
    coordinate) so flips and rotations permute them without rounding.
    """
    labels = validate_instance_mask(labels)
    h, w = labels.shape
    out = np.zeros((DIRECTION_CHANNELS, h, w), dtype=np.float32)
    if not labels.any():
        return out

    flat = labels.ravel()
    ys, xs = np.indices((h, w))
    counts = np.bincount(flat).astype(np.float64)
    sum_x = np.bincount(flat, weights=xs.ravel().astype(np.float64))
    sum_y = np.bincount(flat, weights=ys.ravel().astype(np.float64))

    nucleus = labels > 0
    ids = labels[nucleus]
    n = counts[ids]
    num_x = sum_x[ids] - n * xs[nucleus]
    num_y = sum_y[ids] - n * ys[nucleus]

    # Centroid pixel(s): centre within half a pixel on both axes.
    at_centroid = (2.0 * np.abs(num_x) <= n) & (2.0 * np.abs(num_y) <= n)
    norm = np.hypot(num_x, num_y)
    safe = np.where(at_centroid | (norm == 0), 1.0, norm)
    dx = np.where(at_centroid, 0.0, num_x / safe)
    dy = np.where(at_centroid, 0.0, num_y / safe)

    out[0][nucleus] = dx
    out[1][nucleus] = dy
    return out


def distance_map(labels: np.ndarray) -> np.ndarray:
    """Per-instance Euclidean distance to the instance complement, max-normalized.

    Pixels outside the image count as complement.
    """
    labels = validate_instance_mask(labels)
    out = np.zeros((DISTANCE_CHANNELS,) + labels.shape, dtype=np.float32)
    if not labels.any():
        return out

    for index, slices in enumerate(ndimage.find_objects(labels)):
        if slices is None:
            continue
        inst_id = index + 1
        crop = labels[slices] == inst_id
        padded = np.pad(crop, 1, mode="constant", constant_values=False)
        edt = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
        peak = edt[crop].max()
        target = out[0][slices]
        target[crop] = (edt[crop] / peak).astype(np.float32)
    return out


def featurize_mask(labels: np.ndarray) -> ConditionMaps:
    return ConditionMaps(semantic_map(labels), direction_map(labels), distance_map(labels))


def generator_level_sizes(image_size: int, n_blocks: int) -> List[Tuple[int, int]]:
    """Spatial sizes seen by each generator residual block (2x2 upwards)."""
    if image_size != 2 ** (n_blocks + 1):
        raise ValueError(
            f"image size {image_size} is inconsistent with {n_blocks} blocks "
            f"(expected {2 ** (n_blocks + 1)})"
        )
    return [(2 ** (i + 1), 2 ** (i + 1)) for i in range(n_blocks)]


def _is_dyadic_factor(native: int, target: int) -> bool:
    if native % target:
        return False
    factor = native // target
    return factor & (factor - 1) == 0


def build_condition_pyramid(
    maps: ConditionMaps, target_sizes: Sequence[Tuple[int, int]]
) -> ConditionPyramid:
    """Downsample M by nearest neighbour and P, Q by area averaging."""
    tensors = maps.to_tensors()
    native_h, native_w = tensors.spatial_size

    levels = []
    for size in target_sizes:
        th, tw = int(size[0]), int(size[1])
        if th <= 0 or tw <= 0:
            raise ValueError(f"target size must be positive, got {size}")
        if th > native_h or tw > native_w:
            raise ValueError(f"target size {size} exceeds native size {(native_h, native_w)}")
        if not (_is_dyadic_factor(native_h, th) and _is_dyadic_factor(native_w, tw)):
            raise ValueError(f"target size {size} is not a dyadic reduction of {(native_h, native_w)}")

        if (th, tw) == (native_h, native_w):
            levels.append(tensors)
            continue

        levels.append(
            ConditionMaps(
                F.interpolate(tensors.semantic, size=(th, tw), mode="nearest"),
                F.interpolate(tensors.direction, size=(th, tw), mode="area"),
                F.interpolate(tensors.distance, size=(th, tw), mode="area"),
            )
        )
    return ConditionPyramid(levels)


def save_condition_maps(path: Union[str, Path], maps: ConditionMaps) -> None:
    """Write M, P, Q as one row-major float32 (5, H, W) payload."""
    stacked = np.ascontiguousarray(maps.stacked(), dtype="<f4")
    if stacked.ndim != 3:
        raise ValueError(f"expected unbatched maps, got stacked shape {stacked.shape}")
    channels, height, width = stacked.shape
    with open(path, "wb") as f:
        f.write(_MAPS_HEADER.pack(MAPS_MAGIC, MAPS_VERSION, channels, height, width))
        f.write(stacked.tobytes(order="C"))


def load_condition_maps(path: Union[str, Path]) -> ConditionMaps:
    with open(path, "rb") as f:
        header = f.read(_MAPS_HEADER.size)
        if len(header) != _MAPS_HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, channels, height, width = _MAPS_HEADER.unpack(header)
        if magic != MAPS_MAGIC:
            raise ValueError(f"{path}: not a condition map container")
        if version > MAPS_VERSION:
            raise ValueError(f"{path}: container version {version} is newer than supported {MAPS_VERSION}")
        expected = SEMANTIC_CHANNELS + DIRECTION_CHANNELS + DISTANCE_CHANNELS
        if channels != expected:
            raise ValueError(f"{path}: expected {expected} channels, found {channels}")
        payload = f.read()

    count = channels * height * width
    if len(payload) != count * 4:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, expected {count * 4}")
    stacked = np.frombuffer(payload, dtype="<f4").reshape(channels, height, width).astype(np.float32)
    return ConditionMaps(stacked[0:2].copy(), stacked[2:4].copy(), stacked[4:5].copy())
