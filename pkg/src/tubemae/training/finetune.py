"""Supervised fine-tuning of the pre-trained encoder with a single linear head."""

from __future__ import annotations

import copy
import itertools
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from tubemae.data.clips import Normalization, build_clip_index, load_clip
from tubemae.data.manifest import VideoManifest
from tubemae.errors import ConfigError
from tubemae.model import Encoder, ModelConfig, VideoClassifier, VideoPretrainModel
from tubemae.training.checkpoint import load_checkpoint
from tubemae.training.optim import OptimizerConfig, build_optimizer, layer_lr_scale, lr_at, set_lr

log = logging.getLogger(__name__)

TASKS = ("phase", "action", "triplet", "skill")


@dataclass(frozen=True)
class TripletClassMap:
    """Valid (instrument, verb, target) combinations, indexed by position."""

    n_instruments: int
    n_verbs: int
    n_targets: int
    triplets: tuple

    def __post_init__(self):
        for i, v, t in self.triplets:
            if not (0 <= i < self.n_instruments and 0 <= v < self.n_verbs and 0 <= t < self.n_targets):
                raise ConfigError(f"triplet {(i, v, t)} outside component ranges")
        if len(set(self.triplets)) != len(self.triplets):
            raise ConfigError("duplicate triplet classes")

    @classmethod
    def full(cls, n_instruments: int, n_verbs: int, n_targets: int) -> "TripletClassMap":
        trips = tuple(itertools.product(range(n_instruments), range(n_verbs), range(n_targets)))
        return cls(n_instruments, n_verbs, n_targets, trips)

    @property
    def n_triplets(self) -> int:
        return len(self.triplets)

    def index(self, triplet) -> int:
        try:
            return self.triplets.index(tuple(triplet))
        except ValueError:
            raise ConfigError(f"triplet {tuple(triplet)} not in class map") from None

    def to_dict(self) -> dict:
        return {
            "n_instruments": self.n_instruments,
            "n_verbs": self.n_verbs,
            "n_targets": self.n_targets,
            "triplets": [list(t) for t in self.triplets],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TripletClassMap":
        return cls(d["n_instruments"], d["n_verbs"], d["n_targets"], tuple(tuple(t) for t in d["triplets"]))


@dataclass(frozen=True)
class TaskSpec:
    """Output layout of the head: named groups of logits, single- or multi-label."""

    task: str
    groups: tuple  # ((name, size), ...)
    multi_label: bool
    per_frame: bool
    class_map: Optional[TripletClassMap] = None

    @property
    def n_outputs(self) -> int:
        return sum(size for _, size in self.groups)

    def group_slices(self) -> dict:
        out, start = {}, 0
        for name, size in self.groups:
            out[name] = slice(start, start + size)
            start += size
        return out

    @classmethod
    def phase(cls, n_phases: int) -> "TaskSpec":
        return cls("phase", (("phase", n_phases),), False, True)

    @classmethod
    def action(cls, n_actions: int) -> "TaskSpec":
        return cls("action", (("action", n_actions),), False, False)

    @classmethod
    def skill(cls, n_criteria: int = 3) -> "TaskSpec":
        return cls("skill", (("cvs", n_criteria),), True, False)

    @classmethod
    def triplet(cls, class_map: TripletClassMap) -> "TaskSpec":
        groups = (
            ("ivt", class_map.n_triplets),
            ("i", class_map.n_instruments),
            ("v", class_map.n_verbs),
            ("t", class_map.n_targets),
        )
        return cls("triplet", groups, True, True, class_map)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 2e-4
    weight_decay: float = 0.05
    warmup_fraction: float = 0.1
    seed: int = 0
    clip_len: int = 16
    interval: int = 4
    image_size: tuple = (64, 64)
    max_steps_per_epoch: Optional[int] = None
    layer_decay: float = 1.0  # 1.0 = one lr for every layer

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 < self.layer_decay <= 1:
            raise ConfigError(f"layer_decay must lie in (0, 1], got {self.layer_decay}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


def encode_target(spec: TaskSpec, label) -> np.ndarray:
    """Training target for one sample: class index (single-label) or 0/1 vector."""
    if not spec.multi_label:
        k = spec.groups[0][1]
        if not isinstance(label, (int, np.integer)) or not 0 <= int(label) < k:
            raise ConfigError(f"{spec.task} label must be an int in [0, {k}), got {label!r}")
        return np.int64(label)
    vec = np.zeros(spec.n_outputs, dtype=np.float32)
    if spec.task == "triplet":
        cm = spec.class_map
        sl = spec.group_slices()
        if not isinstance(label, (set, frozenset, list, tuple)):
            raise ConfigError(f"triplet label must be a set of (i, v, t), got {label!r}")
        for trip in label:
            if len(trip) != 3:
                raise ConfigError(f"triplet label must be a set of (i, v, t), got {label!r}")
            i, v, t = trip
            vec[sl["ivt"].start + cm.index(trip)] = 1
            vec[sl["i"].start + i] = 1
            vec[sl["v"].start + v] = 1
            vec[sl["t"].start + t] = 1
        return vec
    arr = np.asarray(label, dtype=np.float32)
    if arr.shape != (spec.n_outputs,) or not np.isin(arr, (0, 1)).all():
        raise ConfigError(f"{spec.task} label must be a 0/1 vector of length {spec.n_outputs}")
    return arr


def build_samples(spec: TaskSpec, manifests: Sequence[VideoManifest], labels: Mapping, cfg: FinetuneConfig):
    """(ClipSpec, target) pairs: one per frame for per-frame tasks, one per video otherwise.

    Per-frame samples use causal clips ending at the labelled (anchor) frame.
    Clip-level samples use the causal clip anchored at the last frame.
    """
    samples = []
    for m in manifests:
        if m.video_id not in labels:
            raise ConfigError(f"no labels for {m.video_id}")
        lab = labels[m.video_id]
        clips = build_clip_index(m.frame_count, cfg.clip_len, cfg.interval, "finetune_causal", m.video_id)
        if spec.per_frame:
            if not isinstance(lab, (list, tuple)) or len(lab) != m.frame_count:
                raise ConfigError(f"{spec.task}: expected one label per frame for {m.video_id}")
            samples.extend((c, encode_target(spec, lab[c.anchor_frame])) for c in clips)
        else:
            samples.append((clips[-1], encode_target(spec, lab)))
    return samples


def task_loss(spec: TaskSpec, logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if spec.multi_label:
        return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))
    return F.cross_entropy(logits, targets)


def encoder_from_checkpoint(path, model_cfg: Optional[ModelConfig] = None) -> tuple:
    rec = load_checkpoint(path, None if model_cfg is None else model_cfg.fingerprint())
    cfg = ModelConfig.from_dict(rec.config["model"])
    model = VideoPretrainModel(cfg)
    model.load_state_dict(rec.model_state)
    return model.encoder, cfg, rec


@dataclass
class FinetuneResult:
    classifier: VideoClassifier
    spec: TaskSpec
    history: list = field(default_factory=list)


def _load_batch(samples, by_id, cfg: FinetuneConfig, norm: Normalization, dtype):
    clips = np.stack([load_clip(s, by_id[s.video_id], cfg.image_size, norm) for s, _ in samples])
    targets = np.stack([t for _, t in samples])
    return torch.as_tensor(clips, dtype=dtype), torch.as_tensor(targets)


def finetune(
    spec: TaskSpec,
    encoder: Encoder,
    manifests: Sequence[VideoManifest],
    labels: Mapping,
    cfg: FinetuneConfig = FinetuneConfig(),
    cube=(2, 16, 16),
    norm: Normalization = Normalization(),
) -> FinetuneResult:
    """Train a copy of ``encoder`` plus a fresh linear head end to end."""
    if spec.task not in TASKS:
        raise ConfigError(f"unknown task {spec.task!r}")
    samples = build_samples(spec, manifests, labels, cfg)
    if not samples:
        raise ConfigError("no fine-tuning samples")
    dtype = next(encoder.parameters()).dtype
    clf = VideoClassifier(copy.deepcopy(encoder), spec.n_outputs, cube, seed=cfg.seed).to(dtype)
    n_layers = clf.encoder.cfg.layers
    opt = build_optimizer(
        clf,
        OptimizerConfig(base_lr=cfg.lr, weight_decay=cfg.weight_decay, beta2=0.999, grad_accum_steps=1),
        None if cfg.layer_decay == 1.0 else (lambda name: layer_lr_scale(name, n_layers, cfg.layer_decay)),
    )
    by_id = {m.video_id: m for m in manifests}
    steps_per_epoch = max(1, len(samples) // cfg.batch_size)
    if cfg.max_steps_per_epoch is not None:
        steps_per_epoch = min(steps_per_epoch, cfg.max_steps_per_epoch)
    total = cfg.epochs * steps_per_epoch
    history, step = [], 0
    torch.manual_seed(cfg.seed)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(len(samples))
        clf.train()
        for k in range(steps_per_epoch):
            batch = [samples[i] for i in order[k * cfg.batch_size : (k + 1) * cfg.batch_size]]
            x, y = _load_batch(batch, by_id, cfg, norm, dtype)
            loss = task_loss(spec, clf(x), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            set_lr(opt, lr_at(step, total, cfg.lr, cfg.warmup_fraction))
            opt.step()
            step += 1
            history.append({"step": step, "epoch": epoch, "loss": loss.item()})
        log.info("finetune %s epoch %d: loss %.4f", spec.task, epoch + 1, history[-1]["loss"])
    return FinetuneResult(clf, spec, history)


@torch.no_grad()
def predict(
    result: FinetuneResult,
    manifests: Sequence[VideoManifest],
    labels: Mapping,
    cfg: FinetuneConfig = FinetuneConfig(),
    norm: Normalization = Normalization(),
    batch_size: int = 32,
) -> list[dict]:
    """Prediction records (the prediction-dump schema) for every sample of ``manifests``."""
    spec, clf = result.spec, result.classifier
    clf.eval()
    dtype = next(clf.parameters()).dtype
    by_id = {m.video_id: m for m in manifests}
    records = []
    for m in manifests:
        samples = build_samples(spec, [m], labels, cfg)
        raw = labels[m.video_id]
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            x, _ = _load_batch(chunk, by_id, cfg, norm, dtype)
            logits = clf(x)
            for (clip, _), row in zip(chunk, logits):
                true = raw[clip.anchor_frame] if spec.per_frame else raw
                records.append(make_record(spec, m.video_id, clip.anchor_frame, true, row))
    return records


def make_record(spec: TaskSpec, video_id: str, frame_index: int, true, logits: torch.Tensor) -> dict:
    rec = {"video_id": video_id, "frame_index": int(frame_index)}
    if spec.multi_label:
        scores = torch.sigmoid(logits).tolist()
        if spec.task == "triplet":
            rec["true"] = sorted([list(map(int, t)) for t in true])
            rec["scores"] = scores[spec.group_slices()["ivt"]]
        else:
            rec["true"] = [int(v) for v in true]
            rec["scores"] = scores
    else:
        probs = torch.softmax(logits, dim=-1)
        rec["true"] = int(true)
        rec["pred"] = int(torch.argmax(logits))
        rec["scores"] = probs.tolist()
    return rec
