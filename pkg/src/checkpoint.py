"""Versioned checkpoint container for the three networks and their optimizers."""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch
import torch.nn as nn

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sian-checkpoint"
CHECKPOINT_VERSION = 1

PREFIXES = {"generator": "gen.", "encoder": "enc.", "discriminator": "disc."}


def merged_state_dict(modules: Dict[str, nn.Module]) -> Dict[str, torch.Tensor]:
    """One flat state dict keyed like 'gen.resblk3.norm_0.branch_p.gamma_conv.weight'."""
    weights = {}
    for role, module in modules.items():
        prefix = PREFIXES[role]
        for key, value in module.state_dict().items():
            weights[prefix + key] = value.detach().cpu().clone()
    return weights


def split_state_dict(weights: Dict[str, torch.Tensor], role: str) -> Dict[str, torch.Tensor]:
    prefix = PREFIXES[role]
    return {key[len(prefix) :]: value for key, value in weights.items() if key.startswith(prefix)}


def save_checkpoint(
    path: Union[str, Path],
    modules: Dict[str, nn.Module],
    config: Dict[str, Any],
    step: int = 0,
    epoch: int = 0,
    batch_index: int = 0,
    optimizers: Optional[Dict[str, Any]] = None,
    rng_states: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "epoch": int(epoch),
        "batch_index": int(batch_index),
        "config": config,
        "weights": merged_state_dict(modules),
        "optimizers": {name: opt.state_dict() for name, opt in (optimizers or {}).items()},
        "rng_states": rng_states or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.info(f"Saved checkpoint {path} (step {step}, epoch {epoch})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a SIAN checkpoint")
    version = payload.get("version", 0)
    if version > CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: checkpoint version {version} is newer than supported {CHECKPOINT_VERSION}"
        )
    return payload


def restore_modules(payload: Dict[str, Any], modules: Dict[str, nn.Module]) -> None:
    for role, module in modules.items():
        state = split_state_dict(payload["weights"], role)
        if not state:
            raise ValueError(f"checkpoint holds no '{PREFIXES[role]}' weights")
        module.load_state_dict(state)
