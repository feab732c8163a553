"""Frame-level expert features used as distillation targets.

Any teacher maps a stack of frames (T, H, W, 3) to one spatial feature grid
per frame, (T, h, w, D), with no information flowing between frames.
Externally computed features can be supplied through a binary dump file::

    magic   8 bytes  b"TFDUMP01"
    header  4 x uint32 LE: n_records, h, w, dim
    record  uint32 LE id length, UTF-8 frame id, h*w*dim float32 LE values
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from tubemae.errors import ContractError, ShapeError, ValidationError

DUMP_MAGIC = b"TFDUMP01"


@dataclass(frozen=True)
class TeacherSpec:
    name: str = "reference"
    feature_dim: int = 64
    deterministic: bool = True
    frozen: bool = True


@dataclass
class TeacherFeatures:
    per_frame: torch.Tensor  # (..., T, h, w, D)


class ReferenceTeacher(nn.Module):
    """Small frozen convolutional image encoder with a 1/16-resolution output grid.

    Weights come from a fixed seed; the module is never trained.
    """

    def __init__(self, feature_dim: int = 64, seed: int = 1234, stride: int = 16):
        super().__init__()
        if stride % 4:
            raise ValueError("stride must be a multiple of 4")
        self.spec = TeacherSpec("reference", feature_dim, True, True)
        self.stride = stride
        g = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(3, 32, kernel_size=4, stride=4)
        self.conv2 = nn.Conv2d(32, 64, kernel_size=3, padding=1)
        self.conv3 = nn.Conv2d(64, feature_dim, kernel_size=stride // 4, stride=stride // 4)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2, self.conv3):
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu", generator=g)
                nn.init.zeros_(conv.bias)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    @torch.no_grad()
    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """frames (N, H, W, 3) -> features (N, H/stride, W/stride, D)."""
        x = frames.permute(0, 3, 1, 2).to(self.conv1.weight.dtype)
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        x = self.conv3(x).permute(0, 2, 3, 1)
        return F.layer_norm(x, x.shape[-1:])


def extract_frame_features(frames, teacher: nn.Module) -> TeacherFeatures:
    """Apply ``teacher`` to every frame of ``frames`` (..., T, H, W, 3) independently."""
    spec = getattr(teacher, "spec", None)
    if spec is None or not (spec.frozen and spec.deterministic):
        raise ContractError("teacher must declare a frozen, deterministic TeacherSpec")
    if any(p.requires_grad for p in teacher.parameters()):
        raise ContractError(f"teacher {spec.name!r} has trainable parameters")
    frames = torch.as_tensor(frames)
    lead = frames.shape[:-3]
    flat = frames.reshape(-1, *frames.shape[-3:])
    feats = teacher(flat)
    return TeacherFeatures(feats.reshape(*lead, *feats.shape[1:]))


def align_temporal(features) -> torch.Tensor:
    """Average consecutive frame pairs so targets match the 2-frame token steps."""
    x = features.per_frame if isinstance(features, TeacherFeatures) else torch.as_tensor(features)
    t_axis = x.dim() - 4
    T = x.shape[t_axis]
    if T % 2:
        raise ShapeError(f"temporal alignment needs an even frame count, got {T}")
    x = x.reshape(*x.shape[:t_axis], T // 2, 2, *x.shape[t_axis + 1 :])
    return x.mean(dim=t_axis + 1)


# -- feature dumps -------------------------------------------------------------


def write_feature_dump(path, features: Mapping[str, np.ndarray]) -> Path:
    items = list(features.items())
    if not items:
        raise ValidationError("empty feature dump")
    h, w, d = np.asarray(items[0][1]).shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<4I", len(items), h, w, d))
        for frame_id, arr in items:
            arr = np.asarray(arr, dtype="<f4")
            if arr.shape != (h, w, d):
                raise ShapeError(f"{frame_id}: grid {arr.shape} differs from {(h, w, d)}")
            key = frame_id.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(arr.tobytes(order="C"))
    return path


def read_feature_dump(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != DUMP_MAGIC:
        raise ValidationError(f"{path}: not a feature dump")
    n, h, w, d = struct.unpack_from("<4I", data, 8)
    off = 24
    size = h * w * d * 4
    out = {}
    for _ in range(n):
        (klen,) = struct.unpack_from("<I", data, off)
        off += 4
        key = data[off : off + klen].decode("utf-8")
        off += klen
        if off + size > len(data):
            raise ValidationError(f"{path}: truncated record {key!r}")
        out[key] = np.frombuffer(data, dtype="<f4", count=h * w * d, offset=off).reshape(h, w, d).copy()
        off += size
    if off != len(data):
        raise ValidationError(f"{path}: {len(data) - off} trailing bytes")
    return out


class FeatureDumpTeacher:
    """Serves precomputed per-frame grids by frame id (``"<video_id>/<frame_index>"``)."""

    def __init__(self, path):
        self.features = read_feature_dump(path)
        first = next(iter(self.features.values()))
        self.spec = TeacherSpec(f"dump:{Path(path).name}", first.shape[-1], True, True)

    def lookup(self, frame_ids: Sequence[str]) -> TeacherFeatures:
        try:
            arr = np.stack([self.features[f] for f in frame_ids])
        except KeyError as exc:
            raise ValidationError(f"frame {exc.args[0]!r} not in feature dump") from None
        return TeacherFeatures(torch.from_numpy(arr))


def frame_ids(video_id: str, indices: Sequence[int]) -> list[str]:
    return [f"{video_id}/{int(i)}" for i in indices]
