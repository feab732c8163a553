"""Workflow, action, triplet and skill metrics.

Phase predictions are passed as a sequence of ``(true, pred)`` integer arrays,
one pair per video.
"""

from __future__ import annotations

import warnings
from fractions import Fraction
from typing import Optional

import numpy as np

from tubemae.errors import ConfigError, EmptyInputError, ShapeError


def _as_pairs(videos) -> list[tuple]:
    out = []
    for true, pred in videos:
        true = np.asarray(true, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if true.shape != pred.shape or true.ndim != 1:
            raise ShapeError(f"true/pred length mismatch: {true.shape} vs {pred.shape}")
        out.append((true, pred))
    return out


def image_level_accuracy(videos) -> float:
    """Fraction of correct frames pooled over all videos."""
    pairs = _as_pairs(videos)
    n = sum(len(t) for t, _ in pairs)
    if n == 0:
        raise EmptyInputError("no frames")
    return float(Fraction(sum(int((t == p).sum()) for t, p in pairs), n))


def video_level_accuracy(videos) -> float:
    """Unweighted mean of per-video frame accuracies."""
    pairs = _as_pairs(videos)
    if not pairs:
        raise EmptyInputError("no videos")
    accs = []
    for t, p in pairs:
        if len(t) == 0:
            raise EmptyInputError("empty video")
        accs.append(Fraction(int((t == p).sum()), len(t)))
    return float(sum(accs) / len(accs))


# Counting metrics are kept as exact rationals and rounded once at the end,
# so results do not depend on summation order.


PHASE_KEYS = ("precision", "recall", "jaccard")


def _ratio(num: int, den: int) -> Optional[Fraction]:
    return Fraction(num, den) if den else None


def _macro(values) -> Optional[Fraction]:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def _to_float(v: Optional[Fraction]) -> Optional[float]:
    return None if v is None else float(v)


def _phase_exact(true: np.ndarray, pred: np.ndarray) -> tuple[dict, dict]:
    classes = sorted(set(true.tolist()) | set(pred.tolist()))
    per_class = {}
    for c in classes:
        tp = int(((pred == c) & (true == c)).sum())
        fp = int(((pred == c) & (true != c)).sum())
        fn = int(((pred != c) & (true == c)).sum())
        per_class[c] = {
            "precision": _ratio(tp, tp + fp),
            "recall": _ratio(tp, tp + fn),
            "jaccard": _ratio(tp, tp + fp + fn),
            "tp": tp,
            "fp": fp,
            "fn": fn,
        }
    macro = {key: _macro(r[key] for r in per_class.values()) for key in PHASE_KEYS}
    return per_class, macro


def phase_level_metrics(videos, per_video: bool = False) -> dict:
    """Per-phase precision, recall and Jaccard plus their macro averages.

    By default counts are pooled over all frames of all videos. Only phases
    that occur in the ground truth or the predictions take part; a per-phase
    value whose denominator is zero is left out of its macro average and
    listed under ``"undefined"``. With ``per_video=True`` the macro values
    are computed per video and then averaged over videos.
    """
    pairs = _as_pairs(videos)
    if not pairs or sum(len(t) for t, _ in pairs) == 0:
        raise EmptyInputError("no frames")
    if per_video:
        macros = [_phase_exact(t, p)[1] for t, p in pairs if len(t)]
        out = {"per_class": None, "undefined": []}
        for key in PHASE_KEYS:
            out[key] = _to_float(_macro(m[key] for m in macros))
        return out
    true = np.concatenate([t for t, _ in pairs])
    pred = np.concatenate([p for _, p in pairs])
    per_class, macro = _phase_exact(true, pred)
    undefined = [(c, key) for c, row in per_class.items() for key in PHASE_KEYS if row[key] is None]
    for row in per_class.values():
        for key in PHASE_KEYS:
            row[key] = _to_float(row[key])
    return {"per_class": per_class, **{k: _to_float(v) for k, v in macro.items()}, "undefined": undefined}


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Ties in score keep the original order. Returns NaN when there is no
    positive label.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    n_pos = int(labels.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order].astype(np.float64)
    cum_hits = np.cumsum(hits)
    precision_at = cum_hits / np.arange(1, len(hits) + 1)
    return float((precision_at * hits).sum() / n_pos)


def mean_average_precision(scores, labels) -> tuple[float, np.ndarray]:
    """Mean AP over columns with at least one positive; returns (mAP, per-class AP)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    aps = np.array([average_precision(scores[:, c], labels[:, c]) for c in range(scores.shape[1])])
    missing = np.flatnonzero(np.isnan(aps))
    if len(missing):
        warnings.warn(f"{len(missing)} class(es) without positives excluded from mAP: {missing.tolist()}", stacklevel=2)
    if len(missing) == len(aps):
        return float("nan"), aps
    return float(np.nanmean(aps)), aps


def _projection(class_map, key) -> dict:
    """Map each derived class (component or pair) to the triplet columns containing it."""
    groups: dict = {}
    for k, trip in enumerate(class_map.triplets):
        groups.setdefault(key(trip), []).append(k)
    return dict(sorted(groups.items()))


TRIPLET_KEYS = {
    "AP_I": lambda t: t[0],
    "AP_V": lambda t: t[1],
    "AP_T": lambda t: t[2],
    "AP_IV": lambda t: (t[0], t[1]),
    "AP_IT": lambda t: (t[0], t[2]),
    "AP_IVT": lambda t: tuple(t),
}


def project_scores(matrix: np.ndarray, class_map, name: str) -> tuple[list, np.ndarray]:
    """Max-project IVT columns onto the derived classes of metric ``name``."""
    groups = _projection(class_map, TRIPLET_KEYS[name])
    cols = [matrix[:, idx].max(axis=1) for idx in groups.values()]
    return list(groups), np.stack(cols, axis=1)


def triplet_metrics(ivt_scores, ivt_labels, class_map) -> dict:
    """AP_I, AP_V, AP_T, AP_IV, AP_IT and AP_IVT from per-frame IVT scores.

    ``ivt_labels`` is a 0/1 matrix over the same triplet columns. Component
    and pair scores (and labels) are the per-frame maximum over the triplet
    classes that contain them.
    """
    if class_map is None:
        raise ConfigError("triplet metrics need a class map")
    scores = np.asarray(ivt_scores, dtype=np.float64)
    labels = np.asarray(ivt_labels)
    if scores.ndim != 2 or scores.shape[1] != class_map.n_triplets or labels.shape != scores.shape:
        raise ConfigError(f"score matrix {scores.shape} does not match class map with {class_map.n_triplets} triplets")
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name in TRIPLET_KEYS:
            _, s = project_scores(scores, class_map, name)
            _, y = project_scores(labels, class_map, name)
            out[name], _ = mean_average_precision(s, y)
    return out


def multilabel_accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of (sample, class) decisions correct after thresholding."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    if scores.size == 0:
        raise EmptyInputError("no predictions")
    return float(((scores >= threshold) == (labels == 1)).mean())
