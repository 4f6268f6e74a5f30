"""Segmentation experiment: does adding synthesized images help a nucleus segmenter?"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage
from skimage.measure import label as connected_components

from config import Config
from dataset import AugmentToggles, DatasetItem, augment, item_rng
from featurize import relabel_instances, validate_instance_mask
from maskgen import (
    LayoutParams,
    NucleusPolygonParams,
    derive_mask_seed,
    generate_instance_mask,
)
from metrics import PanopticCounts, match_instances
from trainer import SianSynthesizer, build_style_bank

logger = logging.getLogger(__name__)

BACKGROUND, INTERIOR, BOUNDARY = 0, 1, 2
N_CLASSES = 3
SEGMENTER_FORMAT = "sian-segmenter"
SEGMENTER_VERSION = 1

ROW_REAL = "real"
ROW_CLASSIC = "real+classic"
ROW_SYNTHETIC = "real+classic+synthetic"


@dataclass(frozen=True)
class SegConfig:
    depth: int = 3
    width: int = 16
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    augment: AugmentToggles = field(default_factory=AugmentToggles)
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.n_classes != N_CLASSES:
            raise ValueError(f"the segmenter predicts exactly {N_CLASSES} classes, got {self.n_classes}")
        if self.depth < 1 or self.width < 1:
            raise ValueError("segmenter depth and width must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid segmenter training schedule")

    @classmethod
    def from_config(cls, config: Config) -> "SegConfig":
        section = config.get("downstream", {}) or {}
        defaults = cls()
        return cls(
            depth=int(section.get("depth", defaults.depth)),
            width=int(section.get("width", defaults.width)),
            epochs=int(section.get("epochs", defaults.epochs)),
            batch_size=int(section.get("batch_size", defaults.batch_size)),
            lr=float(section.get("lr", defaults.lr)),
            seed=int(section.get("seed", defaults.seed)),
            augment=AugmentToggles.from_config(config),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "depth": self.depth,
            "width": self.width,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SyntheticSpec:
    """How many synthetic pairs to add and which organ styles they use (round robin)."""

    count: int = 0
    organs: Tuple[str, ...] = ()
    checkpoint: Optional[str] = None
    layout: LayoutParams = field(default_factory=LayoutParams)
    nucleus: NucleusPolygonParams = field(default_factory=NucleusPolygonParams)
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise ValueError(f"synthetic count must be >= 0, got {self.count}")

    @classmethod
    def from_config(cls, config: Config, checkpoint: Optional[str] = None) -> "SyntheticSpec":
        section = config.get("downstream", {}) or {}
        return cls(
            count=int(section.get("synthetic_count", 0)),
            organs=tuple(section.get("organs", []) or []),
            checkpoint=checkpoint,
            layout=LayoutParams.from_config(config),
            nucleus=NucleusPolygonParams.from_config(config),
            seed=int(section.get("seed", 0)),
        )

    def allocate(self, available: Sequence[str]) -> List[str]:
        organs = list(self.organs) or sorted(set(available))
        if self.count and not organs:
            raise ValueError("no organ styles available for synthetic images")
        return [organs[i % len(organs)] for i in range(self.count)]


def masks_to_seg_targets(inst: np.ndarray) -> np.ndarray:
    """0 background, 1 interior, 2 boundary (4-adjacent to another label or the image edge)."""
    inst = validate_instance_mask(inst)
    padded = np.pad(inst, 1, mode="constant", constant_values=0)
    centre = padded[1:-1, 1:-1]
    boundary = np.zeros(inst.shape, dtype=bool)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        neighbour = padded[1 + dy : 1 + dy + inst.shape[0], 1 + dx : 1 + dx + inst.shape[1]]
        boundary |= neighbour != centre

    targets = np.full(inst.shape, BACKGROUND, dtype=np.int64)
    nucleus = inst > 0
    targets[nucleus] = INTERIOR
    targets[nucleus & boundary] = BOUNDARY
    return targets


def instances_from_seg(seg: np.ndarray) -> np.ndarray:
    """Interior components, each dilated once into 4-adjacent boundary pixels.

    A boundary pixel touching two components goes to the lower id (the one met
    first in raster order). Boundary pixels no component touches are dropped.
    """
    seg = np.asarray(seg)
    labels = connected_components(seg == INTERIOR, connectivity=1).astype(np.int64)
    boundary = seg == BOUNDARY
    if not boundary.any() or not labels.any():
        return relabel_instances(labels)

    # Exactly representable in float64, which the rank filter works in.
    unclaimed = int(labels.max()) + 1
    candidates = ndimage.grey_erosion(
        np.where(labels > 0, labels, unclaimed),
        footprint=ndimage.generate_binary_structure(2, 1),
        mode="constant",
        cval=unclaimed,
    )
    claim = boundary & (labels == 0) & (candidates != unclaimed)
    labels[claim] = candidates[claim]
    return relabel_instances(labels)


class _ConvBlock(nn.Sequential):
    def __init__(self, in_nc: int, out_nc: int):
        super().__init__(
            nn.Conv2d(in_nc, out_nc, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_nc),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_nc, out_nc, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_nc),
            nn.ReLU(inplace=True),
        )


class NucleiSegmenter(nn.Module):
    """Small encoder-decoder with skip connections predicting 3-class logits."""

    def __init__(self, depth: int = 3, width: int = 16):
        super().__init__()
        self.depth = depth
        channels = [width * 2**i for i in range(depth)]
        self.down = nn.ModuleList()
        in_nc = 3
        for nc in channels:
            self.down.append(_ConvBlock(in_nc, nc))
            in_nc = nc
        self.up = nn.ModuleList(
            _ConvBlock(channels[i + 1] + channels[i], channels[i]) for i in reversed(range(depth - 1))
        )
        self.head = nn.Conv2d(channels[0], N_CLASSES, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        factor = 2 ** (self.depth - 1)
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(f"segmenter input sides must be multiples of {factor}, got {tuple(x.shape[-2:])}")
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)


def train_segmenter(
    items: Sequence[DatasetItem],
    seg_config: SegConfig,
    toggles: Optional[AugmentToggles] = None,
) -> NucleiSegmenter:
    if not items:
        raise ValueError("segmenter training needs at least one item")
    toggles = toggles or AugmentToggles.disabled()
    torch.manual_seed(seg_config.seed)
    model = NucleiSegmenter(seg_config.depth, seg_config.width)
    optimizer = torch.optim.Adam(model.parameters(), lr=seg_config.lr)
    model.train()

    for epoch in range(seg_config.epochs):
        order = np.random.default_rng([seg_config.seed, epoch]).permutation(len(items))
        running = 0.0
        for start in range(0, len(items), seg_config.batch_size):
            batch = [
                augment(items[i], item_rng(seg_config.seed, epoch, int(i)), toggles)
                for i in order[start : start + seg_config.batch_size]
            ]
            x = torch.as_tensor(np.stack([b.image for b in batch]), dtype=torch.float32)
            y = torch.as_tensor(np.stack([masks_to_seg_targets(b.inst) for b in batch]))
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"segmenter loss is non-finite at epoch {epoch}")
            loss.backward()
            optimizer.step()
            running += float(loss.detach()) * len(batch)
        logger.debug(f"segmenter epoch {epoch}: loss {running / len(items):.4f}")

    model.eval()
    return model


@torch.no_grad()
def predict_instances(model: NucleiSegmenter, image: np.ndarray) -> np.ndarray:
    model.eval()
    x = torch.as_tensor(np.asarray(image), dtype=torch.float32).unsqueeze(0)
    seg = model(x).argmax(dim=1)[0].cpu().numpy()
    return instances_from_seg(seg)


def save_segmenter(path: Union[str, Path], model: NucleiSegmenter, seg_config: SegConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": SEGMENTER_FORMAT,
            "version": SEGMENTER_VERSION,
            "seg_config": seg_config.to_dict(),
            "weights": model.state_dict(),
        },
        path,
    )
    return path


def load_segmenter(path: Union[str, Path]) -> NucleiSegmenter:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Segmenter not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != SEGMENTER_FORMAT:
        raise ValueError(f"{path} is not a segmenter checkpoint")
    cfg = payload["seg_config"]
    model = NucleiSegmenter(int(cfg["depth"]), int(cfg["width"]))
    model.load_state_dict(payload["weights"])
    model.eval()
    return model


def score_segmenter(model: NucleiSegmenter, test_set: Sequence[DatasetItem]) -> PanopticCounts:
    pooled = PanopticCounts()
    for item in test_set:
        pooled = pooled + PanopticCounts.from_matching(
            match_instances(item.inst, predict_instances(model, item.image))
        )
    return pooled


@dataclass
class ExperimentRow:
    name: str
    train_images: int
    dq: float
    sq: float
    pq: float


@dataclass
class ExperimentReport:
    rows: List[ExperimentRow]
    synthetic_count: int = 0
    seg_config: Dict[str, Any] = field(default_factory=dict)

    def row(self, name: str) -> ExperimentRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "synthetic_count": self.synthetic_count,
            "seg_config": self.seg_config,
            "rows": [r.__dict__.copy() for r in self.rows],
        }

    def csv_rows(self) -> List[Dict[str, Any]]:
        return [r.__dict__.copy() for r in self.rows]


def synthesize_training_items(
    real_train: Sequence[DatasetItem], spec: SyntheticSpec, synthesizer
) -> List[DatasetItem]:
    """Synthetic pairs from generated masks and per-organ mean styles of the real set."""
    if spec.count == 0:
        return []
    size = synthesizer.image_size
    bank = build_style_bank(synthesizer, real_train)
    organs = spec.allocate(bank.keys())
    missing = sorted(set(organs) - set(bank))
    if missing:
        raise ValueError(f"no real images to encode a style for organ(s): {missing}")

    layout = spec.layout.rescaled((size, size))
    items = []
    for i, organ in enumerate(organs):
        generated = generate_instance_mask(
            np.random.default_rng(derive_mask_seed(spec.seed, i)), layout, spec.nucleus
        )
        image = synthesizer.synthesize(generated.labels, bank[organ])
        items.append(DatasetItem(image, generated.labels, organ, f"synthetic_{i:05d}"))
    logger.info(f"Synthesized {len(items)} training pairs over organs {sorted(set(organs))}")
    return items


def run_augmentation_experiment(
    real_train: Sequence[DatasetItem],
    synth_spec: SyntheticSpec,
    test_set: Sequence[DatasetItem],
    seg_config: SegConfig,
    synthesizer=None,
    output_dir: Optional[Union[str, Path]] = None,
) -> ExperimentReport:
    """Train the segmenter on real, real+classic and real+classic+synthetic sets; score each."""
    if not real_train or not test_set:
        raise ValueError("the experiment needs non-empty training and test sets")

    if synth_spec.count > 0 and synthesizer is None:
        if not synth_spec.checkpoint or not Path(synth_spec.checkpoint).exists():
            raise ValueError(
                f"{synth_spec.count} synthetic images requested but no trained checkpoint "
                f"was found at {synth_spec.checkpoint!r}"
            )
        synthesizer = SianSynthesizer.from_checkpoint(synth_spec.checkpoint)

    synthetic = synthesize_training_items(real_train, synth_spec, synthesizer) if synth_spec.count else []

    configurations = [
        (ROW_REAL, list(real_train), AugmentToggles.disabled()),
        (ROW_CLASSIC, list(real_train), seg_config.augment),
        (ROW_SYNTHETIC, list(real_train) + synthetic, seg_config.augment),
    ]

    rows = []
    for name, items, toggles in configurations:
        logger.info(f"Training segmenter for row '{name}' on {len(items)} images")
        model = train_segmenter(items, seg_config, toggles)
        dq, sq, pq = score_segmenter(model, test_set).quality()
        rows.append(ExperimentRow(name, len(items), dq, sq, pq))
        logger.info(f"  {name}: DQ={dq:.4f} SQ={sq:.4f} PQ={pq:.4f}")
        if output_dir is not None:
            save_segmenter(Path(output_dir) / f"segmenter_{name.replace('+', '_')}.pt", model, seg_config)

    return ExperimentReport(rows, synth_spec.count, seg_config.to_dict())
