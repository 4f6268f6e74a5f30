"""Synthetic nucleus-like instance masks built from perturbed ellipses."""

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from skimage.draw import polygon as draw_polygon

from config import Config
from featurize import relabel_instances
from image_io import write_mask_png

logger = logging.getLogger(__name__)

MAX_POLYGON_RESAMPLES = 10
PLACEMENT_ATTEMPTS_PER_NUCLEUS = 100
MANIFEST_NAME = "manifest.jsonl"


def _ordered_pair(value, name: str) -> Tuple[float, float]:
    low, high = value
    if low > high:
        raise ValueError(f"{name} must satisfy min <= max, got {value}")
    return low, high


@dataclass(frozen=True)
class NucleusPolygonParams:
    radius_range: Tuple[float, float] = (4.0, 12.0)
    eccentricity_range: Tuple[float, float] = (0.0, 0.7)
    vertex_count: int = 24
    radial_noise_amplitude: float = 0.25
    smoothing_passes: int = 2

    def __post_init__(self):
        r_min, _ = _ordered_pair(self.radius_range, "radius_range")
        if r_min <= 0:
            raise ValueError(f"radius_range must be positive, got {self.radius_range}")
        e_min, e_max = _ordered_pair(self.eccentricity_range, "eccentricity_range")
        if e_min < 0 or e_max >= 1:
            raise ValueError(f"eccentricity_range must lie in [0, 1), got {self.eccentricity_range}")
        if self.vertex_count < 8:
            raise ValueError(f"vertex_count must be >= 8, got {self.vertex_count}")
        if not 0.0 <= self.radial_noise_amplitude <= 0.5:
            raise ValueError(
                f"radial_noise_amplitude must lie in [0, 0.5], got {self.radial_noise_amplitude}"
            )
        if self.smoothing_passes < 0:
            raise ValueError(f"smoothing_passes must be >= 0, got {self.smoothing_passes}")

    @classmethod
    def from_config(cls, config: Config) -> "NucleusPolygonParams":
        section = config.get("maskgen.nucleus", {}) or {}
        defaults = cls()
        return cls(
            radius_range=tuple(section.get("radius_range", defaults.radius_range)),
            eccentricity_range=tuple(section.get("eccentricity_range", defaults.eccentricity_range)),
            vertex_count=int(section.get("vertex_count", defaults.vertex_count)),
            radial_noise_amplitude=float(
                section.get("radial_noise_amplitude", defaults.radial_noise_amplitude)
            ),
            smoothing_passes=int(section.get("smoothing_passes", defaults.smoothing_passes)),
        )


@dataclass(frozen=True)
class LayoutParams:
    canvas: Tuple[int, int] = (256, 256)
    nucleus_count_range: Tuple[int, int] = (60, 120)
    max_pairwise_overlap_fraction: float = 0.3
    cluster_probability: float = 0.5
    cluster_spread: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.canvas[0] < 16 or self.canvas[1] < 16:
            raise ValueError(f"canvas must be at least 16x16, got {self.canvas}")
        low, _ = _ordered_pair(self.nucleus_count_range, "nucleus_count_range")
        if low < 0:
            raise ValueError(f"nucleus counts must be >= 0, got {self.nucleus_count_range}")
        if not 0.0 <= self.max_pairwise_overlap_fraction < 1.0:
            raise ValueError(
                "max_pairwise_overlap_fraction must lie in [0, 1), "
                f"got {self.max_pairwise_overlap_fraction}"
            )
        if not 0.0 <= self.cluster_probability <= 1.0:
            raise ValueError(f"cluster_probability must lie in [0, 1], got {self.cluster_probability}")
        if self.cluster_spread < 0:
            raise ValueError(f"cluster_spread must be >= 0, got {self.cluster_spread}")

    def rescaled(self, canvas: Tuple[int, int], seed: Optional[int] = None) -> "LayoutParams":
        """Same nucleus density on another canvas; counts scale with area."""
        ratio = (canvas[0] * canvas[1]) / float(self.canvas[0] * self.canvas[1])
        low, high = self.nucleus_count_range
        return replace(
            self,
            canvas=tuple(canvas),
            nucleus_count_range=(int(round(low * ratio)), int(round(high * ratio))),
            seed=self.seed if seed is None else seed,
        )

    @classmethod
    def from_config(cls, config: Config) -> "LayoutParams":
        """Layout from maskgen.layout; without a canvas, masks match the synthesized image size."""
        section = config.get("maskgen.layout", {}) or {}
        defaults = cls()
        if "canvas" not in section:
            defaults = defaults.rescaled((config.image_size, config.image_size))
        return cls(
            canvas=tuple(int(v) for v in section.get("canvas", defaults.canvas)),
            nucleus_count_range=tuple(
                int(v) for v in section.get("nucleus_count_range", defaults.nucleus_count_range)
            ),
            max_pairwise_overlap_fraction=float(
                section.get("max_pairwise_overlap_fraction", defaults.max_pairwise_overlap_fraction)
            ),
            cluster_probability=float(section.get("cluster_probability", defaults.cluster_probability)),
            cluster_spread=float(section.get("cluster_spread", defaults.cluster_spread)),
            seed=int(section.get("seed", defaults.seed)),
        )


@dataclass
class GeneratedMask:
    """Label map plus placement bookkeeping; complete is False when placement ran out of attempts."""

    labels: np.ndarray
    target_count: int
    placed_count: int

    @property
    def complete(self) -> bool:
        return self.placed_count >= self.target_count

    @property
    def instance_count(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0


def polygon_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def is_simple_polygon(vertices: np.ndarray) -> bool:
    n = len(vertices)
    for i in range(n):
        a1, a2 = vertices[i], vertices[(i + 1) % n]
        for j in range(i + 2, n):
            # Edges sharing a vertex are adjacent, not crossing.
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(a1, a2, vertices[j], vertices[(j + 1) % n]):
                return False
    return True


def _smooth_circular(noise: np.ndarray, passes: int) -> np.ndarray:
    for _ in range(passes):
        noise = 0.25 * np.roll(noise, 1) + 0.5 * noise + 0.25 * np.roll(noise, -1)
    return noise


def _ellipse_shape(rng: np.random.Generator, params: NucleusPolygonParams):
    radius = rng.uniform(*params.radius_range)
    eccentricity = rng.uniform(*params.eccentricity_range)
    minor = radius * math.sqrt(1.0 - eccentricity**2)
    rotation = rng.uniform(0.0, math.pi)
    t = 2.0 * math.pi * np.arange(params.vertex_count) / params.vertex_count
    cos_r, sin_r = math.cos(rotation), math.sin(rotation)
    ex = radius * np.cos(t)
    ey = minor * np.sin(t)
    return np.stack([ex * cos_r - ey * sin_r, ex * sin_r + ey * cos_r], axis=1)


def sample_nucleus_polygon(
    rng: np.random.Generator, params: NucleusPolygonParams
) -> np.ndarray:
    """Return (V, 2) polygon vertices as (x, y) offsets from the nucleus centre.

    Each vertex is the ellipse point scaled by (1 + n) with n smoothed radial
    noise in [-amplitude, amplitude].
    """
    ellipse = None
    for _ in range(MAX_POLYGON_RESAMPLES):
        ellipse = _ellipse_shape(rng, params)
        if params.radial_noise_amplitude == 0:
            return ellipse
        amp = params.radial_noise_amplitude
        noise = _smooth_circular(rng.uniform(-amp, amp, params.vertex_count), params.smoothing_passes)
        vertices = ellipse * (1.0 + noise)[:, None]
        if is_simple_polygon(vertices):
            return vertices

    logger.debug("Polygon stayed self-intersecting; using the unperturbed ellipse")
    return ellipse


def rasterize_polygon(
    vertices: np.ndarray, canvas: Tuple[int, int]
) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel rows and columns whose centres fall inside the polygon, clipped to the canvas."""
    rows, cols = draw_polygon(vertices[:, 1], vertices[:, 0], shape=canvas)
    return rows, cols


def _footprint_overlap(a: np.ndarray, b: np.ndarray, bbox) -> float:
    r0, r1, c0, c1 = bbox
    inter = np.count_nonzero(a[r0:r1, c0:c1] & b[r0:r1, c0:c1])
    smaller = min(np.count_nonzero(a), np.count_nonzero(b))
    return inter / smaller if smaller else 0.0


def generate_instance_mask(
    rng: np.random.Generator, layout: LayoutParams, nucleus: NucleusPolygonParams
) -> GeneratedMask:
    height, width = layout.canvas
    target = int(rng.integers(layout.nucleus_count_range[0], layout.nucleus_count_range[1] + 1))
    labels = np.zeros((height, width), dtype=np.int32)
    if target == 0:
        return GeneratedMask(labels, 0, 0)

    r_max = nucleus.radius_range[1]
    margin_y = min(r_max, (height - 1) / 2.0)
    margin_x = min(r_max, (width - 1) / 2.0)

    # (centre, outer radius, footprint, bbox) of every placed nucleus
    placed: List[Tuple[np.ndarray, float, np.ndarray, Tuple[int, int, int, int]]] = []
    attempts = 0
    max_attempts = PLACEMENT_ATTEMPTS_PER_NUCLEUS * target

    while len(placed) < target and attempts < max_attempts:
        attempts += 1
        offsets = sample_nucleus_polygon(rng, nucleus)
        outer = float(np.hypot(offsets[:, 0], offsets[:, 1]).max())

        if placed and rng.random() < layout.cluster_probability:
            anchor_centre, anchor_radius, _, _ = placed[int(rng.integers(len(placed)))]
            angle = rng.uniform(0.0, 2.0 * math.pi)
            spread = rng.uniform(-layout.cluster_spread, layout.cluster_spread)
            dist = anchor_radius + outer + spread
            centre = anchor_centre + dist * np.array([math.cos(angle), math.sin(angle)])
        else:
            centre = np.array(
                [rng.uniform(margin_x, width - 1 - margin_x), rng.uniform(margin_y, height - 1 - margin_y)]
            )

        rows, cols = rasterize_polygon(offsets + centre, (height, width))
        if rows.size == 0:
            continue
        footprint = np.zeros((height, width), dtype=bool)
        footprint[rows, cols] = True
        bbox = (int(rows.min()), int(rows.max()) + 1, int(cols.min()), int(cols.max()) + 1)

        rejected = False
        for _, _, other, other_bbox in placed:
            r0, r1 = max(bbox[0], other_bbox[0]), min(bbox[1], other_bbox[1])
            c0, c1 = max(bbox[2], other_bbox[2]), min(bbox[3], other_bbox[3])
            if r0 >= r1 or c0 >= c1:
                continue
            if _footprint_overlap(footprint, other, (r0, r1, c0, c1)) > layout.max_pairwise_overlap_fraction:
                rejected = True
                break
        if rejected:
            continue

        placed.append((centre, outer, footprint, bbox))

    for inst_id, (_, _, footprint, _) in enumerate(placed, start=1):
        labels[footprint] = inst_id

    if len(placed) < target:
        logger.warning(
            f"Placed {len(placed)} of {target} nuclei after {attempts} attempts"
        )

    return GeneratedMask(relabel_instances(labels), target, len(placed))


def derive_mask_seed(master_seed: int, index: int) -> int:
    digest = hashlib.blake2b(f"{master_seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def generate_mask_dataset(
    n: int,
    layout: LayoutParams,
    nucleus: NucleusPolygonParams,
    out_dir: Union[str, Path],
    max_workers: int = 4,
) -> List[Dict[str, Any]]:
    """Write n mask PNGs and a JSON-lines manifest; returns the manifest records.

    Masks are independent: mask i uses a seed derived from (layout.seed, i).
    """
    if n < 0:
        raise ValueError(f"mask count must be >= 0, got {n}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / MANIFEST_NAME

    logger.info(f"Generating {n} synthetic masks into {out_dir}")

    def _build(index: int) -> Dict[str, Any]:
        seed = derive_mask_seed(layout.seed, index)
        result = generate_instance_mask(np.random.default_rng(seed), layout, nucleus)
        name = f"mask_{index:05d}.png"
        write_mask_png(out_dir / name, result.labels)
        return {
            "file": name,
            "seed": seed,
            "instances": result.instance_count,
            "target": result.target_count,
            "complete": result.complete,
        }

    planned = [out_dir / f"mask_{i:05d}.png" for i in range(n)]
    records: List[Dict[str, Any]] = []
    try:
        with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
            futures = [executor.submit(_build, i) for i in range(n)]
            errors: Optional[BaseException] = None
            for future in futures:
                try:
                    record = future.result()
                except OSError as e:
                    errors = errors or e
                    continue
                records.append(record)
            if errors is not None:
                raise errors

        with open(manifest_path, "w") as f:
            for record in records:
                f.write(json.dumps(record) + "\n")
    except OSError:
        logger.error(f"Mask generation failed; removing partial output in {out_dir}")
        for path in planned:
            path.unlink(missing_ok=True)
        manifest_path.unlink(missing_ok=True)
        raise

    incomplete = sum(1 for r in records if not r["complete"])
    logger.info(f"Mask generation complete: {len(records)} files, {incomplete} below target count")
    return records
