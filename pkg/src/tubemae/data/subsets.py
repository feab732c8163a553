"""Nested pre-training corpora for data-scaling experiments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from tubemae.data.manifest import VideoManifest
from tubemae.errors import ConfigError

SETTING_NAMES = ("A", "B", "C", "D", "E")


@dataclass(frozen=True)
class ScalingSetting:
    name: str
    member_dataset_ids: tuple
    total_frames: int = 0


# Frames actually available for pre-training per public corpus, and the
# settings each corpus joins (it stays in every later setting).
REFERENCE_DATASET_FRAMES = {
    "Cholec80": 86_344,
    "M2CAI16-Workflow": 67_578,
    "HeiChole": 55_139,
    "PitVis": 120_018,
    "PSI-AVA": 72_318,
    "AutoLaparo": 40_211,
    "BernBypass70": 303_764,
    "StrasBypass70": 457_787,
    "SurgWeb": 2_349_618,
}
REFERENCE_DATASET_FIRST_SETTING = {
    "Cholec80": "A",
    "M2CAI16-Workflow": "B",
    "HeiChole": "C",
    "PitVis": "C",
    "PSI-AVA": "C",
    "AutoLaparo": "C",
    "BernBypass70": "D",
    "StrasBypass70": "D",
    "SurgWeb": "E",
}


def reference_settings() -> list[ScalingSetting]:
    """Settings A-E assembled from the per-dataset membership metadata."""
    out = []
    for k, name in enumerate(SETTING_NAMES):
        members = tuple(
            d for d, first in REFERENCE_DATASET_FIRST_SETTING.items() if SETTING_NAMES.index(first) <= k
        )
        out.append(ScalingSetting(name, members, sum(REFERENCE_DATASET_FRAMES[d] for d in members)))
    return out


def check_nesting(settings: Sequence[ScalingSetting]) -> None:
    for prev, cur in zip(settings, settings[1:]):
        if not set(prev.member_dataset_ids) <= set(cur.member_dataset_ids):
            missing = sorted(set(prev.member_dataset_ids) - set(cur.member_dataset_ids))
            raise ConfigError(f"nesting violated: {prev.name} -> {cur.name} drops {missing}")


def dataset_of(manifest: VideoManifest) -> str:
    """Dataset id a video belongs to (its procedure tag, falling back to the id)."""
    return manifest.procedure_tag or manifest.video_id


def build_scaling_subsets(
    corpus: Sequence[VideoManifest],
    settings: Sequence[ScalingSetting],
    dataset_key=dataset_of,
) -> dict[str, dict]:
    """Resolve each setting to its manifests.

    Returns ``{name: {"manifests": [...], "total_frames": int}}`` preserving
    the order of ``settings``.
    """
    check_nesting(settings)
    by_dataset: dict[str, list] = {}
    for m in corpus:
        by_dataset.setdefault(dataset_key(m), []).append(m)
    out = {}
    for s in settings:
        unknown = [d for d in s.member_dataset_ids if d not in by_dataset]
        if unknown:
            raise ConfigError(f"setting {s.name}: unresolved dataset ids {unknown}")
        members = [m for d in s.member_dataset_ids for m in by_dataset[d]]
        out[s.name] = {"manifests": members, "total_frames": sum(m.frame_count for m in members)}
    return out


def metadata_totals(settings: Sequence[ScalingSetting], frames: Mapping[str, int]) -> dict[str, int]:
    check_nesting(settings)
    return {s.name: sum(frames[d] for d in s.member_dataset_ids) for s in settings}
