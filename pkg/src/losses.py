"""Generator and discriminator objectives."""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import Config
from network import StyleVector

logger = logging.getLogger(__name__)

NEGATIVE_TOLERANCE = -1e-6

DiscriminatorOutput = List[Tuple[torch.Tensor, List[torch.Tensor]]]


@dataclass(frozen=True)
class LossWeights:
    """Weights of the five generator terms; lambda_gan scales the adversarial term."""

    lambda_gan: float = 1.0
    lambda_feature_match: float = 10.0
    lambda_perceptual: float = 10.0
    lambda_kld: float = 0.05
    lambda_reg: float = 0.0

    def __post_init__(self):
        for name in (
            "lambda_gan",
            "lambda_feature_match",
            "lambda_perceptual",
            "lambda_kld",
            "lambda_reg",
        ):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

    @classmethod
    def from_config(cls, config: Config) -> "LossWeights":
        section = config.get("losses", {}) or {}
        defaults = cls()
        return cls(
            **{
                name: float(section.get(name, getattr(defaults, name)))
                for name in (
                    "lambda_gan",
                    "lambda_feature_match",
                    "lambda_perceptual",
                    "lambda_kld",
                    "lambda_reg",
                )
            }
        )


@dataclass
class LossReport:
    gan: torch.Tensor
    feature_match: torch.Tensor
    perceptual: torch.Tensor
    kld: torch.Tensor
    reg: torch.Tensor
    total: torch.Tensor
    discriminator: Optional[torch.Tensor] = None

    def as_dict(self) -> Dict[str, float]:
        out = {
            "gan": float(self.gan.detach()),
            "feature_match": float(self.feature_match.detach()),
            "perceptual": float(self.perceptual.detach()),
            "kld": float(self.kld.detach()),
            "reg": float(self.reg.detach()),
            "total": float(self.total.detach()),
        }
        if self.discriminator is not None:
            out["discriminator"] = float(self.discriminator.detach())
        return out


def hinge_d_loss(real: DiscriminatorOutput, fake: DiscriminatorOutput) -> torch.Tensor:
    if len(real) != len(fake):
        raise ValueError(f"real has {len(real)} scales, fake has {len(fake)}")
    per_scale = [
        F.relu(1.0 - r_logits).mean() + F.relu(1.0 + f_logits).mean()
        for (r_logits, _), (f_logits, _) in zip(real, fake)
    ]
    return torch.stack(per_scale).mean()


def hinge_g_loss(fake: DiscriminatorOutput) -> torch.Tensor:
    return torch.stack([-logits.mean() for logits, _ in fake]).mean()


def feature_matching_loss(real: DiscriminatorOutput, fake: DiscriminatorOutput) -> torch.Tensor:
    """Mean over scales of the summed per-layer L1 distance; real features carry no gradient."""
    if len(real) != len(fake):
        raise ValueError(f"real has {len(real)} scales, fake has {len(fake)}")
    per_scale = []
    for scale, ((_, real_feats), (_, fake_feats)) in enumerate(zip(real, fake)):
        if len(real_feats) != len(fake_feats):
            raise ValueError(f"scale {scale}: {len(real_feats)} real vs {len(fake_feats)} fake layers")
        layer_terms = []
        for layer, (r, f) in enumerate(zip(real_feats, fake_feats)):
            if r.shape != f.shape:
                raise ValueError(
                    f"scale {scale} layer {layer}: shapes {tuple(r.shape)} and {tuple(f.shape)} differ"
                )
            layer_terms.append((f - r.detach()).abs().mean())
        per_scale.append(torch.stack(layer_terms).sum())
    return torch.stack(per_scale).mean()


def kld_loss(style: StyleVector) -> torch.Tensor:
    per_sample = 0.5 * (style.mu.pow(2) + style.logvar.exp() - style.logvar - 1.0).sum(dim=-1)
    return per_sample.mean()


class FeatureExtractor(nn.Module):
    """Frozen multi-stage embedder returning one feature map per stage."""

    def __init__(self, stages: Sequence[nn.Module], layer_weights: Sequence[float]):
        super().__init__()
        if len(stages) != len(layer_weights):
            raise ValueError("one layer weight per stage is required")
        self.stages = nn.ModuleList(stages)
        self.layer_weights = list(layer_weights)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "FeatureExtractor":
        # Always frozen.
        return super().train(False)

    def preprocess(self, image: torch.Tensor) -> torch.Tensor:
        return image

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        x = self.preprocess(image)
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class RandomFeatureExtractor(FeatureExtractor):
    """Conv/ReLU stages with seeded random weights, average-pooled between stages."""

    CHANNELS = (16, 32, 64, 96, 128)
    LAYER_WEIGHTS = (1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0)

    def __init__(self, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        stages = []
        in_nc = 3
        for i, out_nc in enumerate(self.CHANNELS):
            conv = nn.Conv2d(in_nc, out_nc, 3, padding=1)
            with torch.no_grad():
                fan_in = in_nc * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers = [nn.AvgPool2d(2)] if i > 0 else []
            layers += [conv, nn.ReLU()]
            stages.append(nn.Sequential(*layers))
            in_nc = out_nc
        super().__init__(stages, self.LAYER_WEIGHTS)


class VGG19FeatureExtractor(FeatureExtractor):
    """ImageNet VGG19 features at relu1_1, relu2_1, relu3_1, relu4_1, relu5_1."""

    SLICE_ENDS = (2, 7, 12, 21, 30)
    LAYER_WEIGHTS = (1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0)

    def __init__(self):
        from torchvision.models import VGG19_Weights, vgg19

        body = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
        stages = []
        start = 0
        for end in self.SLICE_ENDS:
            stages.append(nn.Sequential(*[body[i] for i in range(start, end)]))
            start = end
        super().__init__(stages, self.LAYER_WEIGHTS)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def preprocess(self, image: torch.Tensor) -> torch.Tensor:
        return ((image + 1.0) / 2.0 - self.mean) / self.std


def build_extractor(name: str = "random", seed: int = 0) -> FeatureExtractor:
    if name == "random":
        return RandomFeatureExtractor(seed)
    if name == "vgg19":
        logger.info("Loading pretrained VGG19 feature extractor")
        return VGG19FeatureExtractor()
    raise ValueError(f"Unknown extractor '{name}' (expected random or vgg19)")


def perceptual_loss(
    real: torch.Tensor, fake: torch.Tensor, extractor: FeatureExtractor
) -> torch.Tensor:
    if real.shape != fake.shape:
        raise ValueError(f"image shapes {tuple(real.shape)} and {tuple(fake.shape)} differ")
    real_feats = extractor(real)
    fake_feats = extractor(fake)
    terms = [
        w * (f - r).abs().mean()
        for w, r, f in zip(extractor.layer_weights, real_feats, fake_feats)
    ]
    return torch.stack(terms).sum()


def _no_regularizer(module: nn.Module) -> torch.Tensor:
    param = next(module.parameters(), None)
    return torch.zeros((), device=param.device if param is not None else None)


def _weight_l2(module: nn.Module) -> torch.Tensor:
    return torch.stack([p.pow(2).sum() for p in module.parameters() if p.requires_grad]).sum()


REGULARIZERS: Dict[str, Callable[[nn.Module], torch.Tensor]] = {
    "none": _no_regularizer,
    "weight_l2": _weight_l2,
}


def build_regularizer(name: str = "none") -> Callable[[nn.Module], torch.Tensor]:
    try:
        return REGULARIZERS[name]
    except KeyError:
        raise ValueError(f"Unknown regularizer '{name}' (expected one of {sorted(REGULARIZERS)})")


def total_generator_loss(
    parts: Dict[str, torch.Tensor], weights: LossWeights
) -> LossReport:
    """Weighted sum of gan, feature_match, perceptual, kld and reg, added left to right."""
    required = ("gan", "feature_match", "perceptual", "kld", "reg")
    missing = [name for name in required if name not in parts]
    if missing:
        raise ValueError(f"missing loss terms: {missing}")

    for name in required:
        value = parts[name]
        if not torch.isfinite(value).all():
            raise FloatingPointError(f"loss term '{name}' is non-finite: {float(value.detach())}")
        if name != "gan" and float(value.detach()) < NEGATIVE_TOLERANCE:
            raise ValueError(f"loss term '{name}' is negative: {float(value.detach())}")

    total = weights.lambda_gan * parts["gan"]
    total = total + weights.lambda_feature_match * parts["feature_match"]
    total = total + weights.lambda_perceptual * parts["perceptual"]
    total = total + weights.lambda_kld * parts["kld"]
    if weights.lambda_reg != 0:
        total = total + weights.lambda_reg * parts["reg"]

    return LossReport(
        gan=parts["gan"],
        feature_match=parts["feature_match"],
        perceptual=parts["perceptual"],
        kld=parts["kld"],
        reg=parts["reg"],
        total=total,
    )
