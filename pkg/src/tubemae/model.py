"""Asymmetric encoder with reconstruction and distillation decoders.

The encoder is a plain pre-norm ViT run over the visible cube tokens with
full (joint space-time) self-attention. Two lightweight decoders take the
encoder output, re-insert a learnable mask token at masked positions, add
fixed positional encodings and predict either cube pixels or teacher
features for every token.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from tubemae.errors import ConfigError, ShapeError
from tubemae.tokenization import DEFAULT_CUBE, gather_visible, grid_shape, patchify, positional_table, scatter_visible


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 12
    dim: int = 768
    heads: int = 12
    mlp_ratio: float = 4.0
    preset: str = "vit_b"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"encoder dim {self.dim} not divisible by {self.heads} heads")

    @classmethod
    def vit_b(cls) -> "EncoderConfig":
        return cls(12, 768, 12, 4.0, "vit_b")

    @classmethod
    def toy(cls) -> "EncoderConfig":
        return cls(4, 128, 4, 4.0, "toy")


@dataclass(frozen=True)
class DecoderConfig:
    recon_layers: int = 4
    distill_layers: int = 2
    decoder_dim: int = 384
    decoder_heads: int = 6
    mlp_ratio: float = 4.0
    recon_out_dim: int = 1536
    distill_out_dim: int = 1024

    def __post_init__(self):
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError(f"decoder dim {self.decoder_dim} not divisible by {self.decoder_heads} heads")

    @classmethod
    def vit_b(cls) -> "DecoderConfig":
        return cls()

    @classmethod
    def toy(cls, distill_out_dim: int = 64, recon_out_dim: int = 1536) -> "DecoderConfig":
        return cls(4, 2, 96, 4, 4.0, recon_out_dim, distill_out_dim)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig.vit_b)
    decoder: DecoderConfig = field(default_factory=DecoderConfig.vit_b)
    cube: tuple = DEFAULT_CUBE
    in_chans: int = 3

    @property
    def cube_dim(self) -> int:
        ct, ch, cw = self.cube
        return ct * ch * cw * self.in_chans

    def __post_init__(self):
        if self.decoder.recon_out_dim != self.cube_dim:
            raise ConfigError(f"recon_out_dim {self.decoder.recon_out_dim} != cube size {self.cube_dim}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cube"] = list(self.cube)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d["encoder"]), DecoderConfig(**d["decoder"]), tuple(d["cube"]), d["in_chans"])

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def vit_b(cls, distill_out_dim: int = 1024) -> "ModelConfig":
        return cls(EncoderConfig.vit_b(), replace(DecoderConfig.vit_b(), distill_out_dim=distill_out_dim))

    @classmethod
    def toy(cls, distill_out_dim: int = 64, cube=DEFAULT_CUBE) -> "ModelConfig":
        ct, ch, cw = cube
        return cls(EncoderConfig.toy(), DecoderConfig.toy(distill_out_dim, ct * ch * cw * 3), tuple(cube))


# -- building blocks -----------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_attention: bool = False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q * self.scale) @ k.transpose(-2, -1), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        out = self.proj(out)
        return (out, attn) if return_attention else out


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, return_attention: bool = False):
        if return_attention:
            a, attn = self.attn(self.norm1(x), return_attention=True)
        else:
            a, attn = self.attn(self.norm1(x)), None
        x = x + a
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return (x, attn) if return_attention else x


class _PositionCache:
    """Fixed sinusoidal tables keyed by (grid, dim, dtype); never learned."""

    def __init__(self):
        self._tables = {}

    def get(self, grid: tuple, dim: int, dtype, device) -> torch.Tensor:
        key = (tuple(grid), dim, dtype, str(device))
        if key not in self._tables:
            table = positional_table(*grid, dim).table
            self._tables[key] = torch.as_tensor(table, dtype=dtype, device=device)
        return self._tables[key]


_POSITIONS = _PositionCache()


def position_table(grid, dim, dtype=torch.float32, device="cpu") -> torch.Tensor:
    return _POSITIONS.get(grid, dim, dtype, device)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, cube_dim: int):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cube_dim, cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.dim)

    def encode_visible(self, tokens: torch.Tensor, positions: torch.Tensor, return_attention: bool = False):
        """Run the transformer on already-embedded tokens plus their positional slices."""
        if tokens.shape[-1] != self.cfg.dim or positions.shape[-1] != self.cfg.dim:
            raise ShapeError(f"expected token dim {self.cfg.dim}, got {tokens.shape[-1]} / {positions.shape[-1]}")
        squeeze = tokens.dim() == 2
        x = tokens + positions
        if squeeze:
            x = x.unsqueeze(0)
        maps = []
        for blk in self.blocks:
            if return_attention:
                x, a = blk(x, return_attention=True)
                maps.append(a)
            else:
                x = blk(x)
        x = self.norm(x)
        if squeeze:
            x = x.squeeze(0)
        return (x, maps) if return_attention else x


class Decoder(nn.Module):
    def __init__(self, enc_dim: int, dim: int, heads: int, layers: int, out_dim: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.dim = dim
        self.enc_to_dec = nn.Linear(enc_dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(dim))
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, out_dim)

    def forward(self, latents: torch.Tensor, visible_index, grid: tuple) -> torch.Tensor:
        n = grid[0] * grid[1] * grid[2]
        idx = torch.as_tensor(np.asarray(visible_index), dtype=torch.long)
        if idx.shape != latents.shape[:-1]:
            raise ShapeError(f"{tuple(latents.shape[:-1])} latents but index of shape {tuple(idx.shape)}")
        x = scatter_visible(self.enc_to_dec(latents), idx, n, self.mask_token)
        x = x + position_table(grid, self.dim, x.dtype, x.device)
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x))


def init_weights(module: nn.Module, seed: int) -> None:
    """Xavier-uniform linears, unit LayerNorms, truncated-normal mask tokens."""
    g = torch.Generator().manual_seed(int(seed))
    for name, m in module.named_modules():
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight, generator=g)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    for name, p in module.named_parameters():
        if name.endswith("mask_token"):
            with torch.no_grad():
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=g)


class VideoPretrainModel(nn.Module):
    """Encoder plus reconstruction and distillation decoders."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        e, d = cfg.encoder, cfg.decoder
        self.encoder = Encoder(e, cfg.cube_dim)
        self.recon_decoder = Decoder(e.dim, d.decoder_dim, d.decoder_heads, d.recon_layers, d.recon_out_dim, d.mlp_ratio)
        self.distill_decoder = Decoder(e.dim, d.decoder_dim, d.decoder_heads, d.distill_layers, d.distill_out_dim, d.mlp_ratio)
        if not any(p.is_meta for p in self.parameters()):
            init_weights(self, seed)

    @property
    def fingerprint(self) -> str:
        return self.cfg.fingerprint()

    def embed(self, clips: torch.Tensor):
        """Cube tokens (B, N, dim) and the token grid for clips (B, T, H, W, C)."""
        grid = grid_shape(clips.shape[-4:], self.cfg.cube)
        return self.encoder.patch_embed(patchify(clips, self.cfg.cube)), grid

    def encode(self, clips: torch.Tensor, visible_index) -> tuple:
        grid = grid_shape(clips.shape[-4:], self.cfg.cube)
        idx = torch.as_tensor(np.asarray(visible_index), dtype=torch.long)
        # masked cubes are dropped before projection; the encoder never sees them
        vis = self.encoder.patch_embed(gather_visible(patchify(clips, self.cfg.cube), idx))
        pos = position_table(grid, self.cfg.encoder.dim, vis.dtype, vis.device)
        vis_pos = pos.index_select(0, idx.reshape(-1)).reshape(*idx.shape, -1)
        return self.encoder.encode_visible(vis, vis_pos), grid

    def forward(self, clips: torch.Tensor, visible_index, with_distill: bool = True):
        """Returns (latents, recon (B, N, cube_dim), distill (B, N, D_t) or None)."""
        latents, grid = self.encode(clips, visible_index)
        recon = self.recon_decoder(latents, visible_index, grid)
        distill = self.distill_decoder(latents, visible_index, grid) if with_distill else None
        return latents, recon, distill


class VideoClassifier(nn.Module):
    """Encoder over all tokens, mean pooling, single linear head."""

    def __init__(self, encoder: Encoder, n_outputs: int, cube=DEFAULT_CUBE, seed: int = 0):
        super().__init__()
        if n_outputs < 2:
            raise ConfigError(f"classification head needs >= 2 outputs, got {n_outputs}")
        self.encoder = encoder
        self.cube = tuple(cube)
        self.head = nn.Linear(encoder.cfg.dim, n_outputs)
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            nn.init.trunc_normal_(self.head.weight, std=0.02, a=-0.04, b=0.04, generator=g)
            nn.init.zeros_(self.head.bias)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        grid = grid_shape(clips.shape[-4:], self.cube)
        tokens = self.encoder.patch_embed(patchify(clips, self.cube))
        pos = position_table(grid, self.encoder.cfg.dim, tokens.dtype, tokens.device)
        latents = self.encoder.encode_visible(tokens, pos)
        return self.head(latents.mean(dim=-2))


def count_parameters(cfg: ModelConfig, part: str = "all", n_classes: Optional[int] = None) -> int:
    """Learnable scalars of the model built from ``cfg``.

    ``part`` is one of ``encoder``, ``recon``, ``distill`` or ``all``;
    ``n_classes`` adds a classification head on the encoder.
    """
    with torch.device("meta"):
        model = VideoPretrainModel(cfg)
    parts = {
        "encoder": [model.encoder],
        "recon": [model.recon_decoder],
        "distill": [model.distill_decoder],
        "all": [model],
    }
    if part not in parts:
        raise ConfigError(f"unknown part {part!r}")
    total = sum(p.numel() for mod in parts[part] for p in mod.parameters())
    if n_classes is not None:
        total += cfg.encoder.dim * n_classes + n_classes
    return total
