"""Adversarial training loop, checkpoint-backed inference and organ style banks."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from checkpoint import load_checkpoint, restore_modules, save_checkpoint
from config import Config
from dataset import (
    AugmentToggles,
    Batch,
    DatasetItem,
    augment,
    collate_batch,
    item_rng,
    split_holdout,
)
from featurize import build_condition_pyramid, featurize_mask, generator_level_sizes
from losses import (
    LossReport,
    LossWeights,
    build_extractor,
    build_regularizer,
    feature_matching_loss,
    hinge_d_loss,
    hinge_g_loss,
    kld_loss,
    perceptual_loss,
    total_generator_loss,
)
from metrics import MetricReport, evaluate_sets
from network import NetworkConfig, StyleEncoder, SianGenerator, build_networks, reparameterize
from training_monitor import MonitorContext, TrainingMonitor

logger = logging.getLogger(__name__)

# Image (CHW in [-1, 1]) to instance mask, used for held-out PQ.
InstancePredictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentToggles = field(default_factory=AugmentToggles)
    epochs: int = 50
    batch_size: int = 8
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.0
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 500
    eval_every_epochs: int = 5
    num_workers: int = 1
    extractor: str = "random"
    extractor_seed: int = 0
    regularizer: str = "none"
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"Adam betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.regularizer not in ("none", "weight_l2"):
            raise ValueError(f"Unknown regularizer '{self.regularizer}'")
        if self.extractor not in ("random", "vgg19"):
            raise ValueError(f"Unknown extractor '{self.extractor}'")

    @classmethod
    def from_config(cls, config: Config) -> "TrainConfig":
        training = config.get("training", {}) or {}
        losses = config.get("losses", {}) or {}
        defaults = cls()
        network = NetworkConfig.from_config(config)
        if config.patch_size != network.image_size:
            raise ValueError(
                f"data.patch_size must equal network.image_size ({network.image_size}), got {config.patch_size}"
            )
        return cls(
            network=network,
            loss_weights=LossWeights.from_config(config),
            augment=AugmentToggles.from_config(config),
            epochs=int(training.get("epochs", defaults.epochs)),
            batch_size=int(training.get("batch_size", defaults.batch_size)),
            lr_g=float(training.get("lr_g", defaults.lr_g)),
            lr_d=float(training.get("lr_d", defaults.lr_d)),
            beta1=float(training.get("beta1", defaults.beta1)),
            beta2=float(training.get("beta2", defaults.beta2)),
            seed=int(training.get("seed", defaults.seed)),
            checkpoint_every=int(training.get("checkpoint_every", defaults.checkpoint_every)),
            eval_every_epochs=int(training.get("eval_every_epochs", defaults.eval_every_epochs)),
            num_workers=int(training.get("num_workers", defaults.num_workers)),
            extractor=str(losses.get("extractor", defaults.extractor)),
            extractor_seed=int(losses.get("extractor_seed", defaults.extractor_seed)),
            regularizer=str(losses.get("regularizer", defaults.regularizer)),
            holdout_fraction=float(config.get("data.holdout_fraction", defaults.holdout_fraction)),
        )

    def to_config_dict(self) -> Dict[str, Any]:
        """Nested mapping in config-file layout; from_config(Config.from_dict(...)) restores it."""
        net = self.network
        w = self.loss_weights
        return {
            "network": {
                "image_size": net.image_size,
                "n_blocks": net.n_blocks,
                "channels": list(net.channels),
                "style_dim": net.style_dim,
                "norm_hidden": net.norm_hidden,
                "norm_eps": net.norm_eps,
                "use_instance": net.use_instance,
                "use_style": net.use_style,
                "skip_norm": net.skip_norm,
                "encoder_base_channels": net.encoder_base_channels,
                "discriminator": {
                    "base_channels": net.disc_base_channels,
                    "n_layers": net.disc_n_layers,
                    "n_scales": net.disc_n_scales,
                    "sees_instance_maps": net.disc_sees_instance_maps,
                    "spectral_norm": net.disc_spectral_norm,
                },
            },
            "losses": {
                "lambda_gan": w.lambda_gan,
                "lambda_feature_match": w.lambda_feature_match,
                "lambda_perceptual": w.lambda_perceptual,
                "lambda_kld": w.lambda_kld,
                "lambda_reg": w.lambda_reg,
                "regularizer": self.regularizer,
                "extractor": self.extractor,
                "extractor_seed": self.extractor_seed,
            },
            "augment": {
                "hflip": self.augment.hflip,
                "vflip": self.augment.vflip,
                "rotate": self.augment.rotate,
                "median_blur": self.augment.median_blur,
            },
            "training": {
                "epochs": self.epochs,
                "batch_size": self.batch_size,
                "lr_g": self.lr_g,
                "lr_d": self.lr_d,
                "beta1": self.beta1,
                "beta2": self.beta2,
                "seed": self.seed,
                "checkpoint_every": self.checkpoint_every,
                "eval_every_epochs": self.eval_every_epochs,
                "num_workers": self.num_workers,
            },
            "data": {"holdout_fraction": self.holdout_fraction},
        }


class SianTrainer:
    """Owns the three networks, both optimizers and the style sampling stream."""

    def __init__(
        self,
        train_config: TrainConfig,
        output_dir: Optional[Union[str, Path]] = None,
        monitor: Optional[TrainingMonitor] = None,
        device: str = "cpu",
        segmenter: Optional[InstancePredictor] = None,
    ):
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.manual_seed(train_config.seed)

        self.cfg = train_config
        self.device = torch.device(device)
        self.output_dir = Path(output_dir) if output_dir else None
        self.monitor = monitor or TrainingMonitor()
        self.segmenter = segmenter

        self.generator, self.encoder, self.discriminator = (
            m.to(self.device) for m in build_networks(train_config.network)
        )
        self.extractor = build_extractor(train_config.extractor, train_config.extractor_seed).to(self.device)
        self.regularizer = build_regularizer(train_config.regularizer)
        self.level_sizes = generator_level_sizes(
            train_config.network.image_size, train_config.network.n_blocks
        )

        betas = (train_config.beta1, train_config.beta2)
        self.opt_g = torch.optim.Adam(
            list(self.generator.parameters()) + list(self.encoder.parameters()),
            lr=train_config.lr_g,
            betas=betas,
        )
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=train_config.lr_d, betas=betas)
        self.style_rng = torch.Generator().manual_seed(train_config.seed)

        self.step = 0
        self.epoch = 0
        self.batch_index = 0

    @property
    def modules(self) -> Dict[str, torch.nn.Module]:
        return {
            "generator": self.generator,
            "encoder": self.encoder,
            "discriminator": self.discriminator,
        }

    def _check_gradients(self, prefix: str, module: torch.nn.Module) -> None:
        for name, param in module.named_parameters():
            if param.grad is not None and not torch.isfinite(param.grad).all():
                raise FloatingPointError(f"non-finite gradient in {prefix}.{name}")

    def train_step(self, batch: Batch) -> LossReport:
        """One discriminator update followed by one generator + encoder update."""
        images = batch.images.to(self.device)
        pyramid = batch.pyramid
        maps = batch.maps

        self.generator.train()
        self.encoder.train()
        self.discriminator.train()

        with torch.no_grad():
            style = reparameterize(self.encoder(images), self.style_rng)
            fake = self.generator(style.sample, pyramid)

        self.discriminator.requires_grad_(True)
        self.opt_d.zero_grad(set_to_none=True)
        d_loss = hinge_d_loss(self.discriminator(images, maps), self.discriminator(fake, maps))
        if not torch.isfinite(d_loss):
            raise FloatingPointError(f"loss term 'discriminator' is non-finite: {float(d_loss)}")
        d_loss.backward()
        self._check_gradients("disc", self.discriminator)
        self.opt_d.step()

        self.discriminator.requires_grad_(False)
        try:
            self.opt_g.zero_grad(set_to_none=True)
            style = reparameterize(self.encoder(images), self.style_rng)
            fake = self.generator(style.sample, pyramid)
            fake_out = self.discriminator(fake, maps)
            with torch.no_grad():
                real_out = self.discriminator(images, maps)

            parts = {
                "gan": hinge_g_loss(fake_out),
                "feature_match": feature_matching_loss(real_out, fake_out),
                "perceptual": perceptual_loss(images, fake, self.extractor),
                "kld": kld_loss(style),
                "reg": self.regularizer(self.generator),
            }
            report = total_generator_loss(parts, self.cfg.loss_weights)
            report.total.backward()
            self._check_gradients("gen", self.generator)
            self._check_gradients("enc", self.encoder)
            self.opt_g.step()
        finally:
            self.discriminator.requires_grad_(True)

        report.discriminator = d_loss.detach()
        self.step += 1
        return report

    def make_batch(self, items: Sequence[DatasetItem], indices: Sequence[int], epoch: int) -> Batch:
        batch_items = [
            augment(items[i], item_rng(self.cfg.seed, epoch, int(i)), self.cfg.augment) for i in indices
        ]
        return collate_batch(batch_items, self.level_sizes, self.cfg.num_workers)

    def fit(
        self,
        items: Sequence[DatasetItem],
        epochs: Optional[int] = None,
        max_steps: Optional[int] = None,
        holdout: Optional[Sequence[DatasetItem]] = None,
    ) -> List[Dict[str, float]]:
        """Run epochs from the current position; returns the per-step loss records."""
        if not items:
            raise ValueError("training needs a non-empty dataset")
        epochs = self.cfg.epochs if epochs is None else epochs
        batch_size = self.cfg.batch_size
        n_batches = math.ceil(len(items) / batch_size)
        history: List[Dict[str, float]] = []

        while self.epoch < epochs:
            epoch = self.epoch
            order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(items))
            while self.batch_index < n_batches:
                if max_steps is not None and len(history) >= max_steps:
                    return history
                b = self.batch_index
                with MonitorContext(self.monitor, "data"):
                    batch = self.make_batch(items, order[b * batch_size : (b + 1) * batch_size], epoch)
                with MonitorContext(self.monitor, "step"):
                    report = self.train_step(batch)
                self.batch_index = b + 1

                losses = report.as_dict()
                history.append(losses)
                self.monitor.record_step(self.step, epoch, batch.images.shape[0], losses)
                if self.step % 10 == 0:
                    logger.info(
                        f"epoch {epoch} step {self.step}: G={losses['total']:.4f} "
                        f"D={losses['discriminator']:.4f}"
                    )
                if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save(self._checkpoint_path(f"step_{self.step:07d}.pt"))

            self.epoch = epoch + 1
            self.batch_index = 0
            self.monitor.update_memory_usage()

            if holdout and self.cfg.eval_every_epochs and self.epoch % self.cfg.eval_every_epochs == 0:
                with MonitorContext(self.monitor, "evaluation"):
                    report = self.evaluate(holdout)
                self.monitor.record_metrics(self.step, self.epoch, report.to_dict())

        return history

    @torch.no_grad()
    def evaluate(self, items: Sequence[DatasetItem]) -> MetricReport:
        synthesizer = SianSynthesizer(self.generator, self.encoder, self.cfg.network, self.device)
        fakes = [synthesizer.synthesize(item.inst, synthesizer.encode_style(item.image)) for item in items]
        pred_masks = [self.segmenter(fake) for fake in fakes] if self.segmenter else None
        report = evaluate_sets(
            [item.image for item in items],
            fakes,
            [item.inst for item in items],
            pred_masks=pred_masks,
            organ_tags=[item.organ for item in items],
            extractor=self.extractor,
            extractor_name=self.cfg.extractor,
        )
        logger.info(
            f"Held-out evaluation after epoch {self.epoch}: FID={report.fid}, "
            f"SSIM={report.ssim:.4f}, PQ={report.pq}"
        )
        return report

    def _checkpoint_path(self, name: str) -> Path:
        base = self.output_dir or Path(".")
        return base / name

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(
            path,
            self.modules,
            self.cfg.to_config_dict(),
            step=self.step,
            epoch=self.epoch,
            batch_index=self.batch_index,
            optimizers={"generator": self.opt_g, "discriminator": self.opt_d},
            rng_states={"style": self.style_rng.get_state(), "torch": torch.get_rng_state()},
        )

    def load(self, path: Union[str, Path]) -> None:
        payload = load_checkpoint(path)
        restore_modules(payload, self.modules)
        optimizers = payload.get("optimizers", {})
        if "generator" in optimizers:
            self.opt_g.load_state_dict(optimizers["generator"])
        if "discriminator" in optimizers:
            self.opt_d.load_state_dict(optimizers["discriminator"])
        rng_states = payload.get("rng_states", {})
        if "style" in rng_states:
            self.style_rng.set_state(rng_states["style"])
        if "torch" in rng_states:
            torch.set_rng_state(rng_states["torch"])
        self.step = payload["step"]
        self.epoch = payload["epoch"]
        self.batch_index = payload["batch_index"]
        logger.info(f"Resumed from {path} at step {self.step} (epoch {self.epoch}, batch {self.batch_index})")

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], **kwargs) -> "SianTrainer":
        payload = load_checkpoint(path)
        trainer = cls(TrainConfig.from_config(Config.from_dict(payload["config"])), **kwargs)
        trainer.load(path)
        return trainer


def train(
    items: Sequence[DatasetItem],
    train_config: TrainConfig,
    output_dir: Union[str, Path],
    monitor: Optional[TrainingMonitor] = None,
    resume: Optional[Union[str, Path]] = None,
    max_steps: Optional[int] = None,
    segmenter: Optional[InstancePredictor] = None,
) -> Path:
    """Train on items and return the final checkpoint path.

    An interrupt or an IO failure writes interrupted.pt before re-raising.
    """
    if not items:
        raise ValueError("training needs a non-empty dataset")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    monitor = monitor or TrainingMonitor()
    trainer = SianTrainer(train_config, output_dir=output_dir, monitor=monitor, segmenter=segmenter)
    if resume is not None:
        trainer.load(resume)

    train_items, holdout = split_holdout(items, train_config.holdout_fraction, train_config.seed)
    if not train_items:
        raise ValueError("holdout split left no training items")

    logger.info("=" * 50)
    logger.info(f"Training on {len(train_items)} patches for {train_config.epochs} epochs")
    logger.info(
        f"  image {train_config.network.image_size}px, {train_config.network.n_blocks} blocks, "
        f"batch {train_config.batch_size}"
    )
    logger.info("=" * 50)

    monitor.start_run()
    try:
        trainer.fit(train_items, max_steps=max_steps, holdout=holdout)
    except (KeyboardInterrupt, OSError) as e:
        logger.error(f"Training interrupted ({type(e).__name__}); writing resumable checkpoint")
        try:
            trainer.save(output_dir / "interrupted.pt")
        except OSError as save_error:
            logger.error(f"Could not write interrupted checkpoint: {save_error}")
        raise
    finally:
        monitor.end_run()
        monitor.log_summary()

    return trainer.save(output_dir / "final.pt")


class SianSynthesizer:
    """Frozen generator + encoder for mask-to-image synthesis."""

    def __init__(
        self,
        generator: SianGenerator,
        encoder: StyleEncoder,
        network: NetworkConfig,
        device: Union[str, torch.device] = "cpu",
    ):
        self.generator = generator
        self.encoder = encoder
        self.network = network
        self.device = torch.device(device)
        self.level_sizes = generator_level_sizes(network.image_size, network.n_blocks)

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], device: str = "cpu") -> "SianSynthesizer":
        payload = load_checkpoint(path)
        network = NetworkConfig.from_config(Config.from_dict(payload["config"]))
        generator, encoder, discriminator = build_networks(network)
        restore_modules(
            payload, {"generator": generator, "encoder": encoder, "discriminator": discriminator}
        )
        generator.to(device).eval()
        encoder.to(device).eval()
        logger.info(f"Loaded synthesizer from {path} ({network.image_size}px)")
        return cls(generator, encoder, network, device)

    @property
    def image_size(self) -> int:
        return self.network.image_size

    @torch.no_grad()
    def encode_style(
        self,
        image: Union[np.ndarray, torch.Tensor],
        sample: bool = False,
        rng: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        """Style vector of one (3, H, W) image in [-1, 1]: mu, or a posterior sample."""
        x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image, dtype=torch.float32)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        was_training = self.encoder.training
        self.encoder.eval()
        style = self.encoder(x.to(self.device))
        self.encoder.train(was_training)
        if sample:
            return reparameterize(style, rng).sample[0]
        return style.mu[0]

    @torch.no_grad()
    def synthesize(self, inst: np.ndarray, style: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
        """Render one instance mask with a style vector; returns float32 (3, H, W) in [-1, 1]."""
        inst = np.asarray(inst)
        expected = (self.image_size, self.image_size)
        if inst.shape != expected:
            raise ValueError(
                f"mask is {inst.shape[0]}x{inst.shape[1]} but this checkpoint synthesizes "
                f"{self.image_size}x{self.image_size} images"
            )
        s = torch.as_tensor(np.asarray(style) if not torch.is_tensor(style) else style, dtype=torch.float32)
        if s.dim() == 1:
            s = s.unsqueeze(0)
        if s.shape[-1] != self.network.style_dim:
            raise ValueError(f"style vector has {s.shape[-1]} dims, expected {self.network.style_dim}")

        pyramid = build_condition_pyramid(featurize_mask(inst), self.level_sizes)
        was_training = self.generator.training
        self.generator.eval()
        image = self.generator(s.to(self.device), pyramid)
        self.generator.train(was_training)
        return image[0].cpu().numpy().astype(np.float32)


def build_style_bank(
    synthesizer: SianSynthesizer, items: Sequence[DatasetItem]
) -> Dict[str, np.ndarray]:
    """Mean encoded style (mu) per organ."""
    grouped: Dict[str, List[np.ndarray]] = {}
    for item in items:
        grouped.setdefault(item.organ, []).append(synthesizer.encode_style(item.image).cpu().numpy())
    bank = {organ: np.mean(np.stack(vectors), axis=0).astype(np.float32) for organ, vectors in sorted(grouped.items())}
    logger.info(f"Style bank built for organs: {', '.join(bank) or 'none'}")
    return bank


def save_style_bank(path: Union[str, Path], bank: Dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **bank)


def load_style_bank(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Style bank not found: {path}")
    with np.load(path) as data:
        return {organ: data[organ].astype(np.float32) for organ in data.files}
