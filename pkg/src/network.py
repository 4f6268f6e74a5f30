"""SIAN normalization, residual blocks, generator, style encoder and discriminator."""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import Config
from featurize import (
    DIRECTION_CHANNELS,
    DISTANCE_CHANNELS,
    SEMANTIC_CHANNELS,
    ConditionMaps,
    ConditionPyramid,
)

logger = logging.getLogger(__name__)


@dataclass
class NetworkConfig:
    image_size: int = 64
    n_blocks: int = 5
    channels: List[int] = field(default_factory=lambda: [256, 256, 128, 64, 32])
    style_dim: int = 256
    norm_hidden: int = 128
    norm_eps: float = 1e-5
    use_instance: bool = True
    use_style: bool = True
    skip_norm: bool = True
    encoder_base_channels: int = 64
    disc_base_channels: int = 64
    disc_n_layers: int = 4
    disc_n_scales: int = 2
    disc_sees_instance_maps: bool = True
    disc_spectral_norm: bool = True

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if len(self.channels) != self.n_blocks:
            raise ValueError(
                f"channel schedule has {len(self.channels)} entries for {self.n_blocks} blocks"
            )
        if self.image_size != 2 ** (self.n_blocks + 1):
            raise ValueError(
                f"image_size {self.image_size} needs {int(math.log2(self.image_size)) - 1} blocks, "
                f"got {self.n_blocks}"
            )
        if self.style_dim < 1 or self.norm_hidden < 1:
            raise ValueError("style_dim and norm_hidden must be positive")
        if self.disc_n_layers < 1 or self.disc_n_scales < 1:
            raise ValueError("discriminator needs at least one layer and one scale")

    @classmethod
    def from_config(cls, config: Config) -> "NetworkConfig":
        net = config.get("network", {}) or {}
        disc = net.get("discriminator", {}) or {}
        defaults = cls()
        return cls(
            image_size=int(net.get("image_size", defaults.image_size)),
            n_blocks=int(net.get("n_blocks", defaults.n_blocks)),
            channels=[int(c) for c in net.get("channels", defaults.channels)],
            style_dim=int(net.get("style_dim", defaults.style_dim)),
            norm_hidden=int(net.get("norm_hidden", defaults.norm_hidden)),
            norm_eps=float(net.get("norm_eps", defaults.norm_eps)),
            use_instance=bool(net.get("use_instance", defaults.use_instance)),
            use_style=bool(net.get("use_style", defaults.use_style)),
            skip_norm=bool(net.get("skip_norm", defaults.skip_norm)),
            encoder_base_channels=int(net.get("encoder_base_channels", defaults.encoder_base_channels)),
            disc_base_channels=int(disc.get("base_channels", defaults.disc_base_channels)),
            disc_n_layers=int(disc.get("n_layers", defaults.disc_n_layers)),
            disc_n_scales=int(disc.get("n_scales", defaults.disc_n_scales)),
            disc_sees_instance_maps=bool(
                disc.get("sees_instance_maps", defaults.disc_sees_instance_maps)
            ),
            disc_spectral_norm=bool(disc.get("spectral_norm", defaults.disc_spectral_norm)),
        )


@dataclass
class StyleVector:
    mu: torch.Tensor
    logvar: torch.Tensor
    sample: Optional[torch.Tensor] = None
    eps: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ValueError(f"mu {tuple(self.mu.shape)} and logvar {tuple(self.logvar.shape)} differ")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


def reparameterize(style: StyleVector, rng: Optional[torch.Generator] = None) -> StyleVector:
    """sample = mu + exp(logvar / 2) * eps with eps drawn from rng and recorded."""
    device = rng.device if rng is not None else style.mu.device
    eps = torch.randn(style.mu.shape, generator=rng, dtype=style.mu.dtype, device=device)
    eps = eps.to(style.mu.device)
    sample = style.mu + torch.exp(0.5 * style.logvar) * eps
    return StyleVector(style.mu, style.logvar, sample, eps)


def _init_conv(module: nn.Module) -> None:
    nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="linear")
    if module.bias is not None:
        nn.init.zeros_(module.bias)


def _check_finite(name: str, tensor: torch.Tensor) -> None:
    if not torch.isfinite(tensor).all():
        raise ValueError(f"{name} holds non-finite values")


def _check_spatial(name: str, tensor: torch.Tensor, size: Tuple[int, int]) -> None:
    if tuple(tensor.shape[-2:]) != tuple(size):
        raise ValueError(
            f"{name} spatial size {tuple(tensor.shape[-2:])} does not match activation {tuple(size)}"
        )


class SianBranch(nn.Module):
    """One instantiation branch: semantization, stylization, instantiation, modulation."""

    def __init__(self, norm_nc: int, layout_nc: int, style_dim: int, hidden: int):
        super().__init__()
        self.semantization = nn.Conv2d(SEMANTIC_CHANNELS, hidden, 3, padding=1)
        self.style_affine = nn.Linear(style_dim, hidden)
        self.style_conv = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.instance_conv = nn.Conv2d(layout_nc, hidden, 1)
        self.compensation_conv = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.gamma_conv = nn.Conv2d(hidden, norm_nc, 3, padding=1)
        self.beta_conv = nn.Conv2d(hidden, norm_nc, 3, padding=1)

        for conv in (
            self.semantization,
            self.style_conv,
            self.instance_conv,
            self.compensation_conv,
            self.gamma_conv,
            self.beta_conv,
        ):
            _init_conv(conv)
        _init_conv(self.style_affine)
        nn.init.ones_(self.style_affine.bias)
        # The two branch gammas are summed, so each starts at one half.
        nn.init.constant_(self.gamma_conv.bias, 0.5)

    def _modulated_conv(self, actv: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
        batch = actv.shape[0]
        weight = self.style_conv.weight.unsqueeze(0) * scales[:, None, :, None, None]
        weight = weight.reshape(-1, *self.style_conv.weight.shape[1:])
        out = F.conv2d(actv.reshape(1, -1, *actv.shape[2:]), weight, padding=1, groups=batch)
        out = out.reshape(batch, -1, *out.shape[2:])
        return out + self.style_conv.bias[None, :, None, None]

    def forward(
        self,
        semantic: torch.Tensor,
        style: torch.Tensor,
        layout: torch.Tensor,
        use_style: bool = True,
        use_instance: bool = True,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        actv = F.relu(self.semantization(semantic))
        if use_style:
            scales = self.style_affine(style)
        else:
            scales = torch.ones(actv.shape[0], actv.shape[1], dtype=actv.dtype, device=actv.device)
        actv = self._modulated_conv(actv, scales)
        if use_instance:
            actv = actv * self.instance_conv(layout)
        actv = F.relu(self.compensation_conv(actv))
        return self.gamma_conv(actv), self.beta_conv(actv)


class SianNorm(nn.Module):
    """gamma * (h - mean) / sqrt(var + eps) + beta with batch statistics over N, H, W."""

    def __init__(
        self,
        norm_nc: int,
        style_dim: int,
        hidden: int = 128,
        eps: float = 1e-5,
        use_style: bool = True,
        use_instance: bool = True,
    ):
        super().__init__()
        self.norm_nc = norm_nc
        self.eps = eps
        self.use_style = use_style
        self.use_instance = use_instance
        self.branch_p = SianBranch(norm_nc, DIRECTION_CHANNELS, style_dim, hidden)
        self.branch_q = SianBranch(norm_nc, DISTANCE_CHANNELS, style_dim, hidden)

    def standardize(self, h: torch.Tensor) -> torch.Tensor:
        mean = h.mean(dim=(0, 2, 3), keepdim=True)
        var = h.var(dim=(0, 2, 3), keepdim=True, unbiased=False)
        return (h - mean) / torch.sqrt(var + self.eps)

    def modulation(
        self, maps: ConditionMaps, style: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        gamma_p, beta_p = self.branch_p(
            maps.semantic, style, maps.direction, self.use_style, self.use_instance
        )
        gamma_q, beta_q = self.branch_q(
            maps.semantic, style, maps.distance, self.use_style, self.use_instance
        )
        return gamma_p + gamma_q, beta_p + beta_q

    def validate(self, h: torch.Tensor, maps: ConditionMaps, style: torch.Tensor) -> None:
        if h.dim() != 4 or h.shape[1] != self.norm_nc:
            raise ValueError(f"expected N x {self.norm_nc} x H x W activation, got {tuple(h.shape)}")
        size = tuple(h.shape[-2:])
        for name, tensor, channels in (
            ("semantic map", maps.semantic, SEMANTIC_CHANNELS),
            ("direction map", maps.direction, DIRECTION_CHANNELS),
            ("distance map", maps.distance, DISTANCE_CHANNELS),
        ):
            _check_spatial(name, tensor, size)
            if tensor.shape[1] != channels:
                raise ValueError(f"{name} must have {channels} channels, got {tensor.shape[1]}")
            _check_finite(name, tensor)
        if style.dim() != 2 or style.shape[0] != h.shape[0]:
            raise ValueError(f"style must be N x D with N={h.shape[0]}, got {tuple(style.shape)}")
        _check_finite("activation", h)
        _check_finite("style", style)

    def forward(self, h: torch.Tensor, maps: ConditionMaps, style: torch.Tensor) -> torch.Tensor:
        self.validate(h, maps, style)
        gamma, beta = self.modulation(maps, style)
        return gamma * self.standardize(h) + beta


class SianResBlock(nn.Module):
    def __init__(self, in_nc: int, out_nc: int, net: NetworkConfig):
        super().__init__()
        mid_nc = min(in_nc, out_nc)
        self.skip_norm = net.skip_norm

        def _norm(nc: int) -> SianNorm:
            return SianNorm(
                nc, net.style_dim, net.norm_hidden, net.norm_eps, net.use_style, net.use_instance
            )

        self.norm_0 = _norm(in_nc)
        self.conv_0 = nn.Conv2d(in_nc, mid_nc, 3, padding=1)
        self.norm_1 = _norm(mid_nc)
        self.conv_1 = nn.Conv2d(mid_nc, out_nc, 3, padding=1)
        self.norm_s = _norm(in_nc) if net.skip_norm else None
        self.conv_s = nn.Conv2d(in_nc, out_nc, 1)
        for conv in (self.conv_0, self.conv_1, self.conv_s):
            _init_conv(conv)

    def forward(self, h: torch.Tensor, maps: ConditionMaps, style: torch.Tensor) -> torch.Tensor:
        dx = self.conv_0(F.relu(self.norm_0(h, maps, style)))
        dx = self.conv_1(F.relu(self.norm_1(dx, maps, style)))
        if self.norm_s is not None:
            skip = self.conv_s(F.relu(self.norm_s(h, maps, style)))
        else:
            skip = self.conv_s(h)
        return dx + skip


class SianGenerator(nn.Module):
    """Style projection to 2x2, then n_blocks x (SIAN ResBlk -> 2x upsample), then RGB."""

    def __init__(self, net: NetworkConfig):
        super().__init__()
        self.net = net
        self.n_blocks = net.n_blocks
        self.init_channels = net.channels[0]
        self.project = nn.Linear(net.style_dim, self.init_channels * 2 * 2)
        _init_conv(self.project)

        in_nc = self.init_channels
        for i, out_nc in enumerate(net.channels):
            self.add_module(f"resblk{i}", SianResBlock(in_nc, out_nc, net))
            in_nc = out_nc
        self.conv_img = nn.Conv2d(in_nc, 3, 3, padding=1)
        _init_conv(self.conv_img)

    def resblock(self, index: int) -> SianResBlock:
        return getattr(self, f"resblk{index}")

    def forward(self, style: torch.Tensor, pyramid: ConditionPyramid) -> torch.Tensor:
        if len(pyramid.levels) != self.n_blocks:
            raise ValueError(
                f"condition pyramid has {len(pyramid.levels)} levels, generator has {self.n_blocks} blocks"
            )
        h = self.project(style).view(style.shape[0], self.init_channels, 2, 2)
        for i, maps in enumerate(pyramid.levels):
            expected = (2 ** (i + 1), 2 ** (i + 1))
            if maps.spatial_size != expected:
                raise ValueError(f"pyramid level {i} is {maps.spatial_size}, block {i} runs at {expected}")
            h = self.resblock(i)(h, maps, style)
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv_img(F.leaky_relu(h, 0.2))
        return torch.tanh(h)


class StyleEncoder(nn.Module):
    """Strided conv stack pooled to 4x4, then linear heads for mu and logvar."""

    def __init__(self, net: NetworkConfig):
        super().__init__()
        ndf = net.encoder_base_channels
        n_down = max(1, int(math.log2(net.image_size // 4)))
        layers: List[nn.Module] = []
        in_nc = 3
        for i in range(n_down):
            out_nc = min(ndf * 2**i, ndf * 8)
            layers.append(nn.Conv2d(in_nc, out_nc, 3, stride=2, padding=1))
            # Mean colour carries organ style; the first layer stays unnormalized.
            if i > 0:
                layers.append(nn.InstanceNorm2d(out_nc, affine=True))
            layers.append(nn.LeakyReLU(0.2))
            in_nc = out_nc
        self.body = nn.Sequential(*layers)
        self.fc_mu = nn.Linear(in_nc * 4 * 4, net.style_dim)
        self.fc_logvar = nn.Linear(in_nc * 4 * 4, net.style_dim)

    def forward(self, image: torch.Tensor) -> StyleVector:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"encoder expects N x 3 x H x W images, got {tuple(image.shape)}")
        h = self.body(image)
        h = F.adaptive_avg_pool2d(h, 4).flatten(1)
        return StyleVector(self.fc_mu(h), self.fc_logvar(h))


class PatchDiscriminator(nn.Module):
    def __init__(self, in_nc: int, base: int, n_layers: int, spectral: bool):
        super().__init__()

        def _wrap(conv: nn.Conv2d) -> nn.Module:
            return nn.utils.spectral_norm(conv) if spectral else conv

        blocks = []
        nc = in_nc
        for i in range(n_layers):
            out_nc = min(base * 2**i, base * 8)
            stride = 2 if i < n_layers - 1 else 1
            layers: List[nn.Module] = [_wrap(nn.Conv2d(nc, out_nc, 4, stride=stride, padding=1))]
            if i > 0:
                layers.append(nn.InstanceNorm2d(out_nc))
            layers.append(nn.LeakyReLU(0.2))
            blocks.append(nn.Sequential(*layers))
            nc = out_nc
        self.blocks = nn.ModuleList(blocks)
        self.logits = nn.Conv2d(nc, 1, 4, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        features = []
        for block in self.blocks:
            x = block(x)
            features.append(x)
        return self.logits(x), features


class MultiScaleDiscriminator(nn.Module):
    """Patch classifiers at full and successively 2x average-pooled resolution."""

    def __init__(self, net: NetworkConfig):
        super().__init__()
        self.sees_instance_maps = net.disc_sees_instance_maps
        in_nc = 3 + SEMANTIC_CHANNELS
        if self.sees_instance_maps:
            in_nc += DIRECTION_CHANNELS + DISTANCE_CHANNELS
        for i in range(net.disc_n_scales):
            self.add_module(
                f"scale{i}",
                PatchDiscriminator(
                    in_nc, net.disc_base_channels, net.disc_n_layers, net.disc_spectral_norm
                ),
            )
        self.n_scales = net.disc_n_scales

    def condition_input(self, image: torch.Tensor, maps: ConditionMaps) -> torch.Tensor:
        size = tuple(image.shape[-2:])
        parts = [image, maps.semantic]
        if self.sees_instance_maps:
            parts += [maps.direction, maps.distance]
        for i, part in enumerate(parts[1:], start=1):
            _check_spatial(f"condition input {i}", part, size)
            if part.shape[0] != image.shape[0]:
                raise ValueError("image and condition maps have different batch sizes")
        return torch.cat(parts, dim=1)

    def forward(
        self, image: torch.Tensor, maps: ConditionMaps
    ) -> List[Tuple[torch.Tensor, List[torch.Tensor]]]:
        x = self.condition_input(image, maps)
        outputs = []
        for i in range(self.n_scales):
            outputs.append(getattr(self, f"scale{i}")(x))
            if i < self.n_scales - 1:
                x = F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
        return outputs


def build_networks(
    net: NetworkConfig,
) -> Tuple[SianGenerator, StyleEncoder, MultiScaleDiscriminator]:
    generator = SianGenerator(net)
    encoder = StyleEncoder(net)
    discriminator = MultiScaleDiscriminator(net)
    for name, module in (("generator", generator), ("encoder", encoder), ("discriminator", discriminator)):
        count = sum(p.numel() for p in module.parameters())
        logger.debug(f"{name}: {count:,} parameters")
    return generator, encoder, discriminator


def patch_logit_sizes(image_size: int, n_layers: int, n_scales: int) -> Sequence[int]:
    """Logit map side per scale for 4x4 kernels with padding 1."""
    sizes = []
    side = image_size
    for _ in range(n_scales):
        s = side
        for i in range(n_layers):
            stride = 2 if i < n_layers - 1 else 1
            s = (s + 2 - 4) // stride + 1
        sizes.append(s - 1)
        side = (side + 2 - 3) // 2 + 1
    return sizes
