"""Prediction dumps and metric reports.

A prediction dump holds one JSON record per line::

    {"video_id": "...", "frame_index": 12, "true": 3, "pred": 3, "scores": [...]}

``true`` is an int (phase, action), a 0/1 list (skill) or a list of
``[instrument, verb, target]`` triples (triplet). ``scores`` is required for
every task except phase, where ``pred`` suffices.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tubemae.errors import ConfigError, EmptyInputError, ValidationError
from tubemae.evaluation.metrics import (
    image_level_accuracy,
    mean_average_precision,
    multilabel_accuracy,
    phase_level_metrics,
    triplet_metrics,
    video_level_accuracy,
)
from tubemae.evaluation.stats import bootstrap_ci

TASKS = ("phase", "action", "triplet", "skill")


@dataclass
class MetricReport:
    task: str
    metrics: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)
    ci: dict = field(default_factory=dict)
    p_values: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "metrics": self.metrics,
            "per_class": self.per_class,
            "ci": {k: list(v) for k, v in self.ci.items()},
            "p_values": self.p_values,
            "flags": self.flags,
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def write_csv(self, path) -> Path:
        """One row per scalar metric: name, value, ci_lo, ci_hi."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value", "ci_lo", "ci_hi"])
            for name, value in self.metrics.items():
                lo, hi = self.ci.get(name, ("", ""))
                w.writerow([name, value, lo, hi])
        return path


def write_predictions(path, records: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def read_predictions(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            for key in ("video_id", "frame_index", "true"):
                if key not in rec:
                    raise ValidationError(f"{path}:{lineno}: missing field {key!r}")
            out.append(rec)
    if not out:
        raise EmptyInputError(f"{path}: no prediction records")
    return out


def _by_video(records) -> dict:
    videos: dict = {}
    for r in records:
        videos.setdefault(r["video_id"], []).append(r)
    return {v: sorted(rs, key=lambda r: r["frame_index"]) for v, rs in sorted(videos.items())}


def _phase_pairs(records) -> list[tuple]:
    pairs = []
    for rs in _by_video(records).values():
        true = np.array([int(r["true"]) for r in rs])
        if all("pred" in r for r in rs):
            pred = np.array([int(r["pred"]) for r in rs])
        else:
            pred = np.array([int(np.argmax(r["scores"])) for r in rs])
        pairs.append((true, pred))
    return pairs


def _clean(x):
    if x is None:
        return None
    x = float(x)
    return None if math.isnan(x) else x


def evaluate_records(
    records: Sequence[dict],
    task: str,
    class_map=None,
    n_boot: int = 0,
    seed: int = 0,
) -> MetricReport:
    """Compute the task's metric set from prediction records.

    ``n_boot > 0`` adds video-level bootstrap intervals for every scalar.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    records = list(records)
    if not records:
        raise EmptyInputError("no prediction records")
    report = MetricReport(task)
    videos = list(_by_video(records).values())

    if task == "phase":
        pairs = _phase_pairs(records)
        pm = phase_level_metrics(pairs)
        report.metrics = {
            "image_accuracy": image_level_accuracy(pairs),
            "video_accuracy": video_level_accuracy(pairs),
            "phase_precision": _clean(pm["precision"]),
            "phase_recall": _clean(pm["recall"]),
            "phase_jaccard": _clean(pm["jaccard"]),
        }
        report.per_class = {str(c): v for c, v in pm["per_class"].items()}
        report.flags = [f"phase {c}: {k} undefined" for c, k in pm["undefined"]]
        fns = {
            "image_accuracy": image_level_accuracy,
            "video_accuracy": video_level_accuracy,
            "phase_jaccard": lambda vs: phase_level_metrics(vs)["jaccard"] or 0.0,
        }
        units = pairs
    else:
        fns = {}
        units = videos

        def flat(vs):
            return [r for v in vs for r in v]

        if task == "action":
            def acc(vs):
                rs = flat(vs)
                return float(np.mean([int(np.argmax(r["scores"])) == int(r["true"]) for r in rs]))

            def mapk(vs):
                rs = flat(vs)
                s = np.array([r["scores"] for r in rs])
                y = np.zeros_like(s)
                y[np.arange(len(rs)), [int(r["true"]) for r in rs]] = 1
                return mean_average_precision(s, y)[0]

            fns = {"accuracy": acc, "mAP": mapk}
        elif task == "skill":
            def acc(vs):
                rs = flat(vs)
                return multilabel_accuracy([r["scores"] for r in rs], [r["true"] for r in rs])

            def mapk(vs):
                rs = flat(vs)
                return mean_average_precision([r["scores"] for r in rs], [r["true"] for r in rs])[0]

            fns = {"accuracy": acc, "mAP": mapk}
        else:
            if class_map is None:
                raise ConfigError("triplet evaluation needs a class map")

            def tm(vs):
                rs = flat(vs)
                s = np.array([r["scores"] for r in rs])
                y = np.zeros_like(s)
                for i, r in enumerate(rs):
                    for trip in r["true"]:
                        y[i, class_map.index(tuple(trip))] = 1
                return triplet_metrics(s, y, class_map)

            base = tm(videos)
            for name in base:
                fns[name] = (lambda n: (lambda vs: tm(vs)[n]))(name)
        report.metrics = {name: _clean(fn(units)) for name, fn in fns.items()}

    if n_boot > 0 and len(units) < 2:
        report.flags.append(f"no bootstrap CI: resampling needs >= 2 videos, got {len(units)}")
    elif n_boot > 0:
        for name, fn in fns.items():
            lo, hi, _ = bootstrap_ci(lambda vs: _nan0(fn(vs)), units, n_boot, 0.95, seed)
            report.ci[name] = (lo, hi)
    return report


def _nan0(x) -> float:
    return 0.0 if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)
