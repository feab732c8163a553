from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from tubemae.errors import ConfigError


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    warmup_fraction: float = 0.05
    schedule: str = "cosine"
    grad_accum_steps: int = 4
    linear_scaling: bool = False

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight decay must be non-negative")
        if self.grad_accum_steps < 1:
            raise ConfigError("grad_accum_steps must be >= 1")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def effective_lr(self, batch_size: int) -> float:
        if self.linear_scaling:
            return self.base_lr * batch_size * self.grad_accum_steps / 256
        return self.base_lr


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_fraction: float = 0.05, schedule: str = "cosine") -> float:
    """Linear warmup then cosine decay to zero at ``total_steps``."""
    if schedule == "constant":
        return peak_lr
    warmup = int(round(warmup_fraction * total_steps))
    if step < warmup:
        return peak_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * peak_lr * (1 + math.cos(math.pi * progress))


def no_decay(name: str, param: torch.Tensor) -> bool:
    return param.dim() < 2 or name.endswith("mask_token")


def layer_lr_scale(name: str, n_layers: int, decay: float) -> float:
    """Layer-wise lr factor for an encoder + head model: ``decay ** (depth from the top)``.

    Patch embedding sits at depth ``n_layers + 1``, block ``i`` at ``n_layers - i``,
    the final norm and the head at 0.
    """
    if name.startswith("encoder.patch_embed"):
        depth = n_layers + 1
    elif name.startswith("encoder.blocks."):
        depth = n_layers - int(name.split(".")[2])
    else:
        depth = 0
    return decay**depth


def build_optimizer(model: torch.nn.Module, cfg: OptimizerConfig, lr_scale=None) -> torch.optim.AdamW:
    """AdamW with decay / no-decay groups; ``lr_scale(name)`` splits groups further by lr factor."""
    groups = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        skip = no_decay(name, p)
        scale = 1.0 if lr_scale is None else float(lr_scale(name))
        g = groups.setdefault((skip, scale), {"params": [], "weight_decay": 0.0 if skip else cfg.weight_decay, "lr_scale": scale})
        g["params"].append(p)
    ordered = sorted(groups.items(), key=lambda kv: (kv[0][0], -kv[0][1]))
    return torch.optim.AdamW([g for _, g in ordered], lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2), foreach=False)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = lr * g.get("lr_scale", 1.0)
