"""Clip sampling plans and clip loading."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import cv2
import numpy as np

from tubemae.data.manifest import VideoManifest
from tubemae.errors import ConfigError, CorruptCorpusError

MODES = ("pretrain_dense", "finetune_causal")


@dataclass(frozen=True)
class ClipSpec:
    video_id: str
    frame_indices: tuple
    anchor_frame: int


@dataclass(frozen=True)
class Normalization:
    """Per-channel RGB statistics applied after scaling pixels to [0, 1]."""

    mean: tuple = (0.485, 0.456, 0.406)
    std: tuple = (0.229, 0.224, 0.225)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}


def build_clip_index(
    frame_count: int,
    clip_len: int = 16,
    interval: int = 4,
    mode: str = "pretrain_dense",
    video_id: str = "",
) -> list[ClipSpec]:
    """One clip per frame of the video.

    ``pretrain_dense`` clips start at each frame and run forward;
    ``finetune_causal`` clips end at each (anchor) frame and look backward.
    Indices overrunning the video are clamped to the nearest valid frame.
    """
    if clip_len < 1 or interval < 1:
        raise ConfigError(f"clip_len and interval must be >= 1 (got {clip_len}, {interval})")
    if frame_count < 1:
        raise ConfigError(f"frame_count must be >= 1, got {frame_count}")
    if mode not in MODES:
        raise ConfigError(f"unknown clip mode {mode!r}")
    offsets = np.arange(clip_len) * interval
    clips = []
    last = frame_count - 1
    for s in range(frame_count):
        if mode == "pretrain_dense":
            idx = np.minimum(s + offsets, last)
            anchor = s
        else:
            idx = np.maximum(s - offsets[::-1], 0)
            anchor = s
        clips.append(ClipSpec(video_id, tuple(int(i) for i in idx), anchor))
    return clips


@lru_cache(maxsize=2048)
def _read_frame(path: str, size: tuple) -> np.ndarray:
    img = cv2.imread(path, cv2.IMREAD_COLOR)
    if img is None:
        raise CorruptCorpusError(f"missing or undecodable frame {path}")
    img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    h, w = size
    if img.shape[:2] != (h, w):
        img = cv2.resize(img, (w, h), interpolation=cv2.INTER_AREA)
    img.setflags(write=False)
    return img


def load_clip(
    spec: ClipSpec,
    manifest: VideoManifest,
    size: Sequence[int] = (224, 224),
    norm: Normalization = Normalization(),
) -> np.ndarray:
    """Load a clip as a float32 array of shape (T, H, W, 3), normalized per channel."""
    if spec.video_id and spec.video_id != manifest.video_id:
        raise ConfigError(f"clip for {spec.video_id!r} loaded against manifest {manifest.video_id!r}")
    size = (int(size[0]), int(size[1]))
    frames = []
    for i in spec.frame_indices:
        if not 0 <= i < manifest.frame_count:
            raise CorruptCorpusError(f"{manifest.video_id}: frame index {i} outside [0, {manifest.frame_count})")
        frames.append(_read_frame(str(manifest.frame_path(i)), size))
    clip = np.stack(frames).astype(np.float32) / 255.0
    mean = np.asarray(norm.mean, dtype=np.float32)
    std = np.asarray(norm.std, dtype=np.float32)
    return (clip - mean) / std


def clear_frame_cache() -> None:
    _read_frame.cache_clear()
