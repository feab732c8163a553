"""Procedural surgical-looking videos with scripted phases and triplet labels.

Each video is a sequence of phases played in order. During a phase one
instrument sprite (a shaft entering from the frame border with a coloured
tip) follows one motion pattern over a per-video tissue texture. Labels:

* phase: index of the active scripted segment;
* triplets: ``(sprite_id, motion_class, target_region)`` for the active
  sprite, where the region is the image quadrant holding the tip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from tubemae.data.manifest import (
    VideoManifest,
    frame_filename,
    write_manifests,
    write_phase_labels,
    write_triplet_labels,
)
from tubemae.errors import ConfigError

N_MOTIONS = 4
N_REGIONS = 4
MOTION_NAMES = ("sweep_horizontal", "sweep_vertical", "circle", "diagonal")

# RGB tip colours and border entry points (fractions of W, H) per sprite id
_TIP_COLOURS = [(230, 230, 60), (60, 220, 230), (240, 240, 240), (90, 230, 90), (230, 120, 230), (250, 160, 40)]
_ENTRY_POINTS = [(0.0, 1.0), (1.0, 1.0), (0.5, 0.0), (0.0, 0.3), (1.0, 0.3), (0.5, 1.0)]


@dataclass(frozen=True)
class SyntheticSceneConfig:
    n_phases: int = 4
    frames_per_phase: tuple = (20, 30)
    n_instrument_sprites: int = 2
    background_texture_seed: int = 0
    image_size: tuple = (64, 64)

    def validate(self) -> None:
        if self.n_phases < 2:
            raise ConfigError(f"n_phases must be >= 2, got {self.n_phases}")
        lo, hi = self.frames_per_phase
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad frames_per_phase range {self.frames_per_phase}")
        if not 0 <= self.n_instrument_sprites <= len(_TIP_COLOURS):
            raise ConfigError(f"n_instrument_sprites must be in [0, {len(_TIP_COLOURS)}]")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ConfigError(f"image_size too small: {self.image_size}")


def phase_script(n_phases: int, n_sprites: int) -> list[tuple]:
    """(sprite_id, motion_class) per phase; sprite_id is None without sprites.

    Consecutive phases alternate sprites while the motion advances every
    phase, so no single cue (colour or motion) identifies a phase on its own
    once n_phases exceeds both counts.
    """
    script = []
    for p in range(n_phases):
        sprite = p % n_sprites if n_sprites else None
        script.append((sprite, p % N_MOTIONS))
    return script


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = np.array([rng.uniform(140, 200), rng.uniform(50, 90), rng.uniform(50, 90)])
    coarse = rng.normal(0.0, 1.0, size=(max(2, h // 8), max(2, w // 8), 3))
    tex = cv2.resize(coarse.astype(np.float32), (w, h), interpolation=cv2.INTER_CUBIC)
    fine = rng.normal(0.0, 0.3, size=(h, w, 3)).astype(np.float32)
    img = base + 12.0 * tex + 2.0 * fine
    return np.clip(img, 0, 255).astype(np.float32)


def _tip_position(motion: int, tau: float, period: float, phase0: float, centre, amp) -> tuple:
    a = 2 * math.pi * tau / period + phase0
    cx, cy = centre
    ax, ay = amp
    if motion == 0:
        return cx + ax * math.sin(a), cy
    if motion == 1:
        return cx, cy + ay * math.sin(a)
    if motion == 2:
        return cx + ax * math.cos(a), cy + ay * math.sin(a)
    return cx + ax * math.sin(a), cy + ay * math.sin(a)


def region_of(x: float, y: float, h: int, w: int) -> int:
    return int(y >= h / 2) * 2 + int(x >= w / 2)


def render_video(config: SyntheticSceneConfig, rng: np.random.Generator):
    """Render one video; returns (frames uint8 T×H×W×3, phase labels, triplet sets)."""
    h, w = config.image_size
    lo, hi = config.frames_per_phase
    lengths = [int(rng.integers(lo, hi + 1)) for _ in range(config.n_phases)]
    bg = _background(rng, h, w)
    drift = rng.normal(0, 0.4, size=2)
    script = phase_script(config.n_phases, config.n_instrument_sprites)

    frames, phases, triplets = [], [], []
    for p, (sprite, motion) in enumerate(script):
        # slow enough that clips sampled every 4 frames see unaliased motion
        period = rng.uniform(24.0, 40.0)
        phase0 = rng.uniform(0, 2 * math.pi)
        centre = (w * rng.uniform(0.35, 0.65), h * rng.uniform(0.35, 0.65))
        amp = (w * rng.uniform(0.18, 0.28), h * rng.uniform(0.18, 0.28))
        for tau in range(lengths[p]):
            t = len(frames)
            shift = np.float32([[1, 0, drift[0] * math.sin(t / 7.0)], [0, 1, drift[1] * math.cos(t / 9.0)]])
            img = cv2.warpAffine(bg, shift, (w, h), borderMode=cv2.BORDER_REFLECT)
            trips = set()
            if sprite is not None:
                x, y = _tip_position(motion, tau, period, phase0, centre, amp)
                x = float(np.clip(x, 1, w - 2))
                y = float(np.clip(y, 1, h - 2))
                ex, ey = _ENTRY_POINTS[sprite]
                entry = (int(round(ex * (w - 1))), int(round(ey * (h - 1))))
                tip = (int(round(x)), int(round(y)))
                thick = max(2, w // 16)
                cv2.line(img, entry, tip, (105.0, 105.0, 115.0), thick, cv2.LINE_AA)
                cv2.circle(img, tip, max(2, w // 10), tuple(float(c) for c in _TIP_COLOURS[sprite]), -1, cv2.LINE_AA)
                trips.add((sprite, motion, region_of(x, y, h, w)))
            frames.append(np.clip(img, 0, 255).astype(np.uint8))
            phases.append(p)
            triplets.append(trips)
    return np.stack(frames), phases, triplets


def generate_synthetic_corpus(
    config: SyntheticSceneConfig,
    n_videos: int,
    seed: int,
    out_dir,
    split: str = "pretrain",
    prefix: str = "synth",
):
    """Render ``n_videos`` videos under ``out_dir`` and write their manifest.

    Returns ``(manifests, phase_labels, triplet_labels)`` where the label
    dicts are keyed by video id. Output is a pure function of (config,
    n_videos, seed, prefix).
    """
    config.validate()
    if n_videos < 0:
        raise ConfigError("n_videos must be >= 0")
    out_dir = Path(out_dir)
    manifests, phase_labels, triplet_labels = [], {}, {}
    for i in range(n_videos):
        vid = f"{prefix}_{seed}_{i:03d}"
        rng = np.random.default_rng([seed, config.background_texture_seed, i])
        frames, phases, trips = render_video(config, rng)
        frame_dir = out_dir / "frames" / vid
        frame_dir.mkdir(parents=True, exist_ok=True)
        for k, f in enumerate(frames):
            cv2.imwrite(str(frame_dir / frame_filename(k)), cv2.cvtColor(f, cv2.COLOR_RGB2BGR))
        phase_path = write_phase_labels(out_dir / "labels" / f"{vid}_phase.csv", phases)
        write_triplet_labels(out_dir / "labels" / f"{vid}_triplet.csv", trips, len(frames))
        manifests.append(
            VideoManifest(
                video_id=vid,
                frame_dir=str(frame_dir),
                frame_count=len(frames),
                source_fps_sampled=1.0,
                procedure_tag="synthetic",
                split=split,
                label_path=str(phase_path),
            )
        )
        phase_labels[vid] = phases
        triplet_labels[vid] = trips
    write_manifests(out_dir / "manifest.jsonl", manifests)
    return manifests, phase_labels, triplet_labels


def triplet_label_path(manifest: VideoManifest) -> Path:
    if not manifest.label_path:
        raise ConfigError(f"{manifest.video_id} has no label path")
    p = Path(manifest.label_path)
    return p.with_name(p.name.replace("_phase.csv", "_triplet.csv"))
