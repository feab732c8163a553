"""Video manifests and label files.

A manifest file holds one JSON object per line, with exactly the fields of
:class:`VideoManifest`. Phase labels are stored as ``frame_index,label`` CSV
rows; triplet labels as ``frame_index,instrument,verb,target`` rows, with any
number of rows per frame.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Optional

from tubemae.errors import CorruptCorpusError, ValidationError

SPLITS = ("pretrain", "train", "val", "test")
FRAME_SUFFIX = ".png"


def frame_filename(index: int) -> str:
    return f"{index:06d}{FRAME_SUFFIX}"


@dataclass(frozen=True)
class VideoManifest:
    video_id: str
    frame_dir: str
    frame_count: int
    source_fps_sampled: float = 1.0
    procedure_tag: str = ""
    split: str = "pretrain"
    label_path: Optional[str] = None

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValidationError(f"{self.video_id}: frame_count must be >= 1, got {self.frame_count}")
        if self.split not in SPLITS:
            raise ValidationError(f"{self.video_id}: unknown split {self.split!r}")

    def frame_path(self, index: int) -> Path:
        return Path(self.frame_dir) / frame_filename(index)

    def with_split(self, split: str) -> "VideoManifest":
        d = asdict(self)
        d["split"] = split
        return VideoManifest(**d)


_FIELD_NAMES = {f.name for f in fields(VideoManifest)}


def manifest_from_dict(record: dict) -> VideoManifest:
    keys = set(record)
    if keys != _FIELD_NAMES:
        raise ValidationError(f"manifest record fields mismatch: extra={keys - _FIELD_NAMES}, missing={_FIELD_NAMES - keys}")
    return VideoManifest(**record)


def check_unique_ids(manifests: Iterable[VideoManifest]) -> None:
    seen = set()
    for m in manifests:
        if m.video_id in seen:
            raise ValidationError(f"duplicate video_id {m.video_id!r} in corpus")
        seen.add(m.video_id)


def write_manifests(path, manifests: Iterable[VideoManifest]) -> Path:
    manifests = list(manifests)
    check_unique_ids(manifests)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for m in manifests:
            fh.write(json.dumps(asdict(m), sort_keys=True) + "\n")
    return path


def read_manifests(path) -> list[VideoManifest]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: not a JSON record ({exc})") from None
            out.append(manifest_from_dict(record))
    check_unique_ids(out)
    return out


def verify_frames(manifest: VideoManifest) -> tuple[int, int]:
    """Check that every frame file exists and all share one size; return (H, W)."""
    import cv2

    shape = None
    for i in range(manifest.frame_count):
        p = manifest.frame_path(i)
        if not p.exists():
            raise CorruptCorpusError(f"{manifest.video_id}: missing frame {p}")
        img = cv2.imread(str(p), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise CorruptCorpusError(f"{manifest.video_id}: cannot decode {p}")
        if shape is None:
            shape = img.shape[:2]
        elif img.shape[:2] != shape:
            raise CorruptCorpusError(f"{manifest.video_id}: frame {i} is {img.shape[:2]}, expected {shape}")
    return shape


# -- labels ------------------------------------------------------------------


def write_phase_labels(path, labels) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "label"])
        for i, lab in enumerate(labels):
            w.writerow([i, int(lab)])
    return path


def read_phase_labels(path) -> list[int]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    labels = {}
    for r in rows:
        labels[int(r["frame_index"])] = int(r["label"])
    if sorted(labels) != list(range(len(labels))):
        raise ValidationError(f"{path}: phase labels must cover frames 0..n-1 exactly once")
    return [labels[i] for i in range(len(labels))]


def write_triplet_labels(path, triplets, frame_count: int) -> Path:
    """``triplets[i]`` is a collection of (instrument, verb, target) for frame i."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if len(triplets) != frame_count:
        raise ValidationError("one triplet set per frame required")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "instrument", "verb", "target"])
        for i, trips in enumerate(triplets):
            for ins, verb, tgt in sorted(trips):
                w.writerow([i, ins, verb, tgt])
    return path


def read_triplet_labels(path, frame_count: int) -> list[set]:
    out = [set() for _ in range(frame_count)]
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            i = int(r["frame_index"])
            if not 0 <= i < frame_count:
                raise ValidationError(f"{path}: frame index {i} out of range")
            out[i].add((int(r["instrument"]), int(r["verb"]), int(r["target"])))
    return out
