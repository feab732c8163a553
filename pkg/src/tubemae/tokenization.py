"""Cube tokens, fixed 3-D sinusoidal positions and tube masks.

Token layout is (t, h, w) row-major everywhere: flat index
``(t * h_tokens + h) * w_tokens + w``. A cube's pixel vector is laid out as
(dt, dh, dw, channel) row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from tubemae.errors import ShapeError

DEFAULT_CUBE = (2, 16, 16)


@dataclass
class TokenGrid:
    t_tokens: int
    h_tokens: int
    w_tokens: int
    dim: int
    values: torch.Tensor  # (..., t*h*w, dim)

    @property
    def n_tokens(self) -> int:
        return self.t_tokens * self.h_tokens * self.w_tokens


@dataclass(frozen=True)
class TubeMask:
    spatial_mask: np.ndarray  # bool (h_tokens, w_tokens); True = masked
    ratio: float
    seed: int

    @property
    def h_tokens(self) -> int:
        return self.spatial_mask.shape[0]

    @property
    def w_tokens(self) -> int:
        return self.spatial_mask.shape[1]

    @property
    def n_masked_spatial(self) -> int:
        return int(self.spatial_mask.sum())

    def token_mask(self, t_tokens: int) -> np.ndarray:
        """Flat (t*h*w,) boolean mask: the spatial mask repeated at every time step."""
        return np.tile(self.spatial_mask.reshape(-1), t_tokens)

    def visible_index(self, t_tokens: int) -> np.ndarray:
        return np.flatnonzero(~self.token_mask(t_tokens))


@dataclass(frozen=True)
class PositionalEncoding:
    table: np.ndarray  # (t*h*w, dim)
    scheme: str = "sincos-3d"


def grid_shape(clip_shape, cube=DEFAULT_CUBE) -> tuple:
    """(t_tokens, h_tokens, w_tokens) for a clip of shape (T, H, W, C)."""
    T, H, W = clip_shape[:3]
    ct, ch, cw = cube
    if T % ct or H % ch or W % cw:
        raise ShapeError(f"clip {tuple(clip_shape[:3])} not divisible by cube {tuple(cube)}")
    return T // ct, H // ch, W // cw


def patchify(clip: torch.Tensor, cube=DEFAULT_CUBE) -> torch.Tensor:
    """(..., T, H, W, C) -> (..., n_tokens, ct*ch*cw*C)."""
    *lead, T, H, W, C = clip.shape
    t, h, w = grid_shape((T, H, W), cube)
    ct, ch, cw = cube
    x = clip.reshape(*lead, t, ct, h, ch, w, cw, C)
    n = len(lead)
    perm = list(range(n)) + [n + i for i in (0, 2, 4, 1, 3, 5, 6)]
    x = x.permute(*perm)
    return x.reshape(*lead, t * h * w, ct * ch * cw * C)


def unpatchify(cubes: torch.Tensor, grid: tuple, cube=DEFAULT_CUBE, channels: int = 3) -> torch.Tensor:
    """Inverse of :func:`patchify`: (..., n_tokens, D) -> (..., T, H, W, C)."""
    t, h, w = grid
    ct, ch, cw = cube
    *lead, n, d = cubes.shape
    if n != t * h * w or d != ct * ch * cw * channels:
        raise ShapeError(f"cannot unpatchify {tuple(cubes.shape)} into grid {grid} with cube {cube}")
    x = cubes.reshape(*lead, t, h, w, ct, ch, cw, channels)
    k = len(lead)
    perm = list(range(k)) + [k + i for i in (0, 3, 1, 4, 2, 5, 6)]
    return x.permute(*perm).reshape(*lead, t * ct, h * ch, w * cw, channels)


def cube_embed(clip: torch.Tensor, projection: torch.nn.Linear, cube=DEFAULT_CUBE) -> TokenGrid:
    """Project every non-overlapping cube of ``clip`` to one token."""
    t, h, w = grid_shape(clip.shape[-4:], cube)
    cubes = patchify(clip, cube)
    if cubes.shape[-1] != projection.in_features:
        raise ShapeError(f"cube vector has {cubes.shape[-1]} values, projection expects {projection.in_features}")
    return TokenGrid(t, h, w, projection.out_features, projection(cubes))


def make_tube_mask(h_tokens: int, w_tokens: int, ratio: float, seed: int) -> TubeMask:
    """Mask floor(ratio * h * w) spatial positions drawn uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    s = h_tokens * w_tokens
    n_mask = int(np.floor(ratio * s + 1e-9))
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(s)[:n_mask]
    spatial = np.zeros(s, dtype=bool)
    spatial[chosen] = True
    return TubeMask(spatial.reshape(h_tokens, w_tokens), float(ratio), int(seed))


def _band_sizes(dim: int) -> tuple:
    """Split dim/2 sin-cos pairs across (t, h, w) as evenly as possible."""
    if dim % 2 or dim < 6:
        raise ShapeError(f"positional dim must be even and >= 6, got {dim}")
    pairs = dim // 2
    base, extra = divmod(pairs, 3)
    return tuple(2 * (base + (1 if i < extra else 0)) for i in range(3))


def _sincos_1d(positions: np.ndarray, band: int) -> np.ndarray:
    half = band // 2
    omega = 1.0 / 10000.0 ** (np.arange(half, dtype=np.float64) / half)
    ang = positions[:, None].astype(np.float64) * omega[None, :]
    out = np.empty((len(positions), band))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def positional_table(t_tokens: int, h_tokens: int, w_tokens: int, dim: int) -> PositionalEncoding:
    """Fixed sinusoidal table, one row per token in (t, h, w) order, no class slot."""
    bt, bh, bw = _band_sizes(dim)
    tt, hh, ww = np.meshgrid(np.arange(t_tokens), np.arange(h_tokens), np.arange(w_tokens), indexing="ij")
    table = np.concatenate(
        [_sincos_1d(tt.reshape(-1), bt), _sincos_1d(hh.reshape(-1), bh), _sincos_1d(ww.reshape(-1), bw)],
        axis=1,
    )
    return PositionalEncoding(table)


def gather_visible(values: torch.Tensor, visible_index) -> torch.Tensor:
    """Select visible tokens, preserving (t, h, w) order.

    ``values`` is (N, D) with a 1-D index, or (B, N, D) with a (B, Nv) index.
    """
    idx = torch.as_tensor(np.asarray(visible_index), dtype=torch.long, device=values.device)
    if values.dim() == 2:
        if idx.dim() != 1:
            raise ShapeError("unbatched values need a 1-D index")
        if idx.numel() and int(idx.max()) >= values.shape[0]:
            raise ShapeError("visible index out of range for token grid")
        return values.index_select(0, idx)
    if idx.dim() != 2 or idx.shape[0] != values.shape[0]:
        raise ShapeError(f"index {tuple(idx.shape)} does not match batch {tuple(values.shape)}")
    if idx.numel() and int(idx.max()) >= values.shape[1]:
        raise ShapeError("visible index out of range for token grid")
    return torch.gather(values, 1, idx.unsqueeze(-1).expand(-1, -1, values.shape[-1]))


def scatter_visible(visible: torch.Tensor, visible_index, n_tokens: int, fill: torch.Tensor) -> torch.Tensor:
    """Place visible tokens back on the full grid; other slots take ``fill`` (a D-vector)."""
    idx = torch.as_tensor(np.asarray(visible_index), dtype=torch.long, device=visible.device)
    d = visible.shape[-1]
    if visible.dim() == 2:
        out = fill.reshape(1, d).expand(n_tokens, d).clone()
        return out.index_copy(0, idx, visible)
    b = visible.shape[0]
    if idx.shape != visible.shape[:2]:
        raise ShapeError(f"index {tuple(idx.shape)} does not match visible tokens {tuple(visible.shape)}")
    out = fill.reshape(1, 1, d).expand(b, n_tokens, d).to(visible.dtype)
    return out.scatter(1, idx.unsqueeze(-1).expand(-1, -1, d), visible)
