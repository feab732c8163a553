"""Decode source videos into 1 fps frame stores."""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict
from pathlib import Path

import cv2

from tubemae.data.manifest import VideoManifest, frame_filename, read_manifests
from tubemae.errors import EmptyVideoError, IngestError

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


def sample_positions(n_native: int, native_fps: float, target_fps: float) -> list[int]:
    """Native frame indices kept when resampling to ``target_fps``.

    Output frame k is taken at time k / target_fps; frames past the end of the
    source are dropped, so a 60 s clip at 1 fps gives 60 frames.
    """
    if target_fps <= 0 or native_fps <= 0:
        raise IngestError(f"fps must be positive (native={native_fps}, target={target_fps})")
    if target_fps > native_fps + 1e-9:
        raise IngestError(f"target fps {target_fps} exceeds native fps {native_fps}")
    step = native_fps / target_fps
    out = []
    k = 0
    while True:
        idx = int(round(k * step))
        if idx >= n_native:
            break
        out.append(idx)
        k += 1
    return out


def ingest_video(
    source_path,
    video_id: str,
    root,
    target_fps: float = 1.0,
    procedure_tag: str = "",
    split: str = "pretrain",
) -> VideoManifest:
    """Extract frames of ``source_path`` at ``target_fps`` into ``root/frames/<video_id>``.

    The manifest record is appended to ``root/manifest.jsonl``. Re-ingesting an
    id already present under ``root`` raises :class:`IngestError`.
    """
    root = Path(root)
    frame_dir = root / "frames" / video_id
    manifest_path = root / MANIFEST_NAME
    known = {m.video_id for m in read_manifests(manifest_path)} if manifest_path.exists() else set()
    if video_id in known or frame_dir.exists():
        raise IngestError(f"duplicate video_id {video_id!r} under {root}")

    cap = cv2.VideoCapture(str(source_path))
    if not cap.isOpened():
        raise IngestError(f"cannot decode {source_path}")
    try:
        native_fps = cap.get(cv2.CAP_PROP_FPS)
        n_native = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
        if native_fps <= 0 or n_native <= 0:
            # container metadata missing; count by decoding
            frames = []
            while True:
                ok, frame = cap.read()
                if not ok:
                    break
                frames.append(frame)
            n_native = len(frames)
            native_fps = native_fps if native_fps > 0 else target_fps
        else:
            frames = None
        if n_native == 0:
            raise EmptyVideoError(f"{source_path}: no decodable frames")
        keep = sample_positions(n_native, native_fps, target_fps)
        frame_dir.mkdir(parents=True)
        written = 0
        try:
            keep_set = set(keep)
            if frames is None:
                pos = 0
                while keep and pos <= keep[-1]:
                    ok, frame = cap.read()
                    if not ok:
                        break
                    if pos in keep_set:
                        cv2.imwrite(str(frame_dir / frame_filename(written)), frame)
                        written += 1
                    pos += 1
            else:
                for idx in keep:
                    cv2.imwrite(str(frame_dir / frame_filename(written)), frames[idx])
                    written += 1
            if written == 0:
                raise EmptyVideoError(f"{source_path}: zero frames extracted")
        except Exception:
            shutil.rmtree(frame_dir, ignore_errors=True)
            raise
    finally:
        cap.release()

    manifest = VideoManifest(
        video_id=video_id,
        frame_dir=str(frame_dir),
        frame_count=written,
        source_fps_sampled=float(target_fps),
        procedure_tag=procedure_tag,
        split=split,
        label_path=None,
    )
    with open(manifest_path, "a") as fh:
        fh.write(json.dumps(asdict(manifest), sort_keys=True) + "\n")
    log.info("ingested %s: %d frames at %.3g fps", video_id, written, target_fps)
    return manifest
