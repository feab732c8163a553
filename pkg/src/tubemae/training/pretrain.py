"""Masked reconstruction + distillation pre-training."""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from tubemae.data.audit import audit_leakage
from tubemae.data.clips import ClipSpec, Normalization, build_clip_index, load_clip
from tubemae.data.manifest import VideoManifest
from tubemae.errors import ConfigError, LeakageError, NumericsError
from tubemae.model import ModelConfig, VideoPretrainModel
from tubemae.objectives import LossBreakdown, normalize_targets, reconstruction_loss, smooth_l1, total_loss
from tubemae.teacher import ReferenceTeacher, align_temporal, extract_frame_features
from tubemae.tokenization import TubeMask, grid_shape, make_tube_mask, patchify
from tubemae.training.checkpoint import CheckpointRecord, load_checkpoint, save_checkpoint
from tubemae.training.optim import OptimizerConfig, build_optimizer, lr_at, set_lr

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 5
    batch_size: int = 8
    seed: int = 0
    mask_ratio: float = 0.85
    clip_len: int = 16
    interval: int = 4
    image_size: tuple = (64, 64)
    lambda_recon: float = 1.0
    lambda_distill: float = 0.05
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if self.clip_len % 2:
            raise ConfigError("clip_len must be even (2-frame cubes)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class PretrainBatch:
    clips: torch.Tensor  # (B, T, H, W, 3)
    visible_index: torch.Tensor  # (B, Nv) long
    token_mask: torch.Tensor  # (B, N) bool, True = masked
    teacher_targets: Optional[torch.Tensor]  # (B, N, D_t)


def make_batch(
    clips,
    masks: Sequence[TubeMask],
    teacher=None,
    cube=(2, 16, 16),
    dtype=torch.float32,
) -> PretrainBatch:
    clips = torch.as_tensor(np.asarray(clips), dtype=dtype)
    t, h, w = grid_shape(clips.shape[-4:], cube)
    token_mask = np.stack([m.token_mask(t) for m in masks])
    visible = np.stack([m.visible_index(t) for m in masks])
    targets = None
    if teacher is not None:
        feats = align_temporal(extract_frame_features(clips, teacher))
        if feats.shape[-3:-1] != (h, w):
            raise ConfigError(f"teacher grid {tuple(feats.shape[-3:-1])} does not match token grid {(h, w)}")
        targets = feats.reshape(feats.shape[0], t * h * w, feats.shape[-1]).to(dtype)
    return PretrainBatch(clips, torch.from_numpy(visible), torch.from_numpy(token_mask), targets)


def compute_losses(model: VideoPretrainModel, batch: PretrainBatch, lambda_distill: float = 0.05):
    """(recon, distill) loss tensors for one micro-batch.

    With ``lambda_distill == 0`` the distillation branch is evaluated without
    autograd, so its parameters receive no gradient at all.
    """
    use_distill = batch.teacher_targets is not None
    with_grad_distill = use_distill and lambda_distill != 0
    latents, recon, distill = model(batch.clips, batch.visible_index, with_distill=with_grad_distill)
    target = normalize_targets(patchify(batch.clips, model.cfg.cube))
    recon_loss = reconstruction_loss(recon, target, batch.token_mask)
    if not use_distill:
        return recon_loss, torch.zeros((), dtype=recon_loss.dtype)
    if not with_grad_distill:
        with torch.no_grad():
            distill = model.distill_decoder(latents.detach(), batch.visible_index, grid_shape(batch.clips.shape[-4:], model.cfg.cube))
            return recon_loss, smooth_l1(distill, batch.teacher_targets)
    return recon_loss, smooth_l1(distill, batch.teacher_targets)


def pretrain_step(
    model: VideoPretrainModel,
    optimizer: torch.optim.Optimizer,
    micro_batches: Sequence[PretrainBatch],
    lr: float,
    grad_accum_steps: int = 4,
    lambda_recon: float = 1.0,
    lambda_distill: float = 0.05,
    step: int = 0,
) -> LossBreakdown:
    """Accumulate gradients over ``grad_accum_steps`` micro-batches and apply one update.

    Each micro-batch loss is scaled by 1/accum before backward, so the update
    uses the mean gradient. The returned breakdown is the micro-batch mean.
    """
    if len(micro_batches) != grad_accum_steps:
        raise ConfigError(f"expected {grad_accum_steps} micro-batches, got {len(micro_batches)}")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    recon_sum = distill_sum = 0.0
    for i, mb in enumerate(micro_batches):
        recon, distill = compute_losses(model, mb, lambda_distill)
        loss = lambda_recon * recon + (lambda_distill * distill if lambda_distill else 0.0)
        if not torch.isfinite(loss):
            raise NumericsError(
                f"non-finite loss at step {step}, micro-batch {i}: recon={recon.item()}, distill={distill.item()}, lr={lr}"
            )
        (loss / grad_accum_steps).backward()
        recon_sum += recon.item()
        distill_sum += distill.item()
    set_lr(optimizer, lr)
    optimizer.step()
    return total_loss(recon_sum / grad_accum_steps, distill_sum / grad_accum_steps, lambda_recon, lambda_distill)


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, step])


class Pretrainer:
    """Owns the model, optimizer and step counters of one pre-training run.

    All randomness after initialization is derived statelessly from
    (seed, epoch) for data order and (seed, step) for masks, so a run resumed
    from a checkpoint replays exactly.
    """

    def __init__(
        self,
        model_cfg: ModelConfig,
        run_cfg: RunConfig,
        opt_cfg: OptimizerConfig,
        teacher=None,
        norm: Normalization = Normalization(),
        steps_per_epoch: int = 1,
    ):
        self.model_cfg, self.run_cfg, self.opt_cfg = model_cfg, run_cfg, opt_cfg
        self.dtype = DTYPES[run_cfg.dtype]
        torch.manual_seed(run_cfg.seed)
        self.model = VideoPretrainModel(model_cfg, seed=run_cfg.seed).to(self.dtype)
        self.teacher = teacher
        self.norm = norm
        self.optimizer = build_optimizer(self.model, opt_cfg)
        self.steps_per_epoch = max(1, steps_per_epoch)
        self.total_steps = run_cfg.epochs * self.steps_per_epoch
        self.global_step = 0
        self.epoch = 0
        self.peak_lr = opt_cfg.effective_lr(run_cfg.batch_size)

    def current_lr(self) -> float:
        return lr_at(self.global_step, self.total_steps, self.peak_lr, self.opt_cfg.warmup_fraction, self.opt_cfg.schedule)

    def sample_masks(self, n: int, h_tokens: int, w_tokens: int, step: Optional[int] = None) -> list[TubeMask]:
        rng = _step_rng(self.run_cfg.seed, self.global_step if step is None else step)
        seeds = rng.integers(0, 2**62, size=n)
        return [make_tube_mask(h_tokens, w_tokens, self.run_cfg.mask_ratio, int(s)) for s in seeds]

    def batch_from_clips(self, clips, step: Optional[int] = None) -> PretrainBatch:
        clips = np.asarray(clips)
        _, h, w = grid_shape(clips.shape[-4:], self.model_cfg.cube)
        masks = self.sample_masks(len(clips), h, w, step)
        return make_batch(clips, masks, self.teacher, self.model_cfg.cube, self.dtype)

    def step(self, micro_batches: Sequence[PretrainBatch]) -> tuple[LossBreakdown, float]:
        lr = self.current_lr()
        lb = pretrain_step(
            self.model,
            self.optimizer,
            micro_batches,
            lr,
            self.opt_cfg.grad_accum_steps,
            self.run_cfg.lambda_recon,
            self.run_cfg.lambda_distill,
            self.global_step,
        )
        self.global_step += 1
        return lb, lr

    # -- checkpointing ---------------------------------------------------------

    def record(self) -> CheckpointRecord:
        return CheckpointRecord(
            model_state=dict(self.model.state_dict()),
            optimizer_state=self.optimizer.state_dict(),
            epoch=self.epoch,
            global_step=self.global_step,
            rng={"torch": torch.get_rng_state(), "seed": self.run_cfg.seed},
            config={
                "model": self.model_cfg.to_dict(),
                "run": self.run_cfg.to_dict(),
                "optimizer": self.opt_cfg.to_dict(),
                "steps_per_epoch": self.steps_per_epoch,
            },
            fingerprint=self.model_cfg.fingerprint(),
            normalization=self.norm.to_dict(),
        )

    def save(self, path) -> Path:
        return save_checkpoint(path, self.record())

    def restore(self, record: CheckpointRecord) -> None:
        if record.fingerprint != self.model_cfg.fingerprint():
            raise ConfigError(f"checkpoint fingerprint {record.fingerprint} != {self.model_cfg.fingerprint()}")
        self.model.load_state_dict(record.model_state)
        if record.optimizer_state is not None:
            self.optimizer.load_state_dict(record.optimizer_state)
        self.epoch = record.epoch
        self.global_step = record.global_step
        if "torch" in record.rng:
            torch.set_rng_state(record.rng["torch"])

    @classmethod
    def from_checkpoint(cls, path, teacher=None) -> "Pretrainer":
        rec = load_checkpoint(path)
        cfg = rec.config
        run = cfg["run"]
        run_cfg = RunConfig(**{**run, "image_size": tuple(run["image_size"])})
        trainer = cls(
            ModelConfig.from_dict(cfg["model"]),
            run_cfg,
            OptimizerConfig(**cfg["optimizer"]),
            teacher=teacher,
            norm=Normalization(tuple(rec.normalization["mean"]), tuple(rec.normalization["std"])),
            steps_per_epoch=cfg["steps_per_epoch"],
        )
        trainer.restore(rec)
        return trainer


@dataclass
class PretrainResult:
    checkpoints: list
    final: Path
    log_path: Path
    losses: list = field(default_factory=list)


def epoch_order(n_clips: int, per_epoch: int, seed: int, epoch: int) -> np.ndarray:
    """Clip indices consumed in one epoch; wraps around when the corpus is small."""
    rng = np.random.default_rng([seed, 0, epoch])
    reps = math.ceil(per_epoch / n_clips)
    return np.concatenate([rng.permutation(n_clips) for _ in range(reps)])[:per_epoch]


def run_pretraining(
    corpus: Sequence[VideoManifest],
    run_cfg: RunConfig,
    opt_cfg: OptimizerConfig,
    out_dir,
    model_cfg: Optional[ModelConfig] = None,
    eval_splits: Sequence = (),
    teacher=None,
    norm: Normalization = Normalization(),
    max_steps_per_epoch: Optional[int] = None,
) -> PretrainResult:
    """Pre-train on every dense clip of ``corpus`` and write per-epoch checkpoints.

    Refuses to start (LeakageError) if any pre-training video id appears in
    ``eval_splits``. The last epoch's checkpoint is also written as
    ``checkpoint_final.ckpt``; no validation data is consulted.
    """
    report = audit_leakage(corpus, eval_splits)
    if not report.passed:
        raise LeakageError(report.shared_ids)
    if not corpus:
        raise ConfigError("empty pre-training corpus")
    if model_cfg is None:
        model_cfg = ModelConfig.toy()
    if teacher is None and run_cfg.lambda_distill != 0:
        teacher = ReferenceTeacher(model_cfg.decoder.distill_out_dim, stride=model_cfg.cube[1])

    by_id = {m.video_id: m for m in corpus}
    clips: list[ClipSpec] = []
    for m in corpus:
        clips.extend(build_clip_index(m.frame_count, run_cfg.clip_len, run_cfg.interval, "pretrain_dense", m.video_id))
    per_step = run_cfg.batch_size * opt_cfg.grad_accum_steps
    steps_per_epoch = max(1, len(clips) // per_step)
    if max_steps_per_epoch is not None:
        steps_per_epoch = min(steps_per_epoch, max_steps_per_epoch)

    trainer = Pretrainer(model_cfg, run_cfg, opt_cfg, teacher, norm, steps_per_epoch)
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    checkpoints, losses = [], []
    with open(log_path, "w") as log_fh:
        for epoch in range(run_cfg.epochs):
            trainer.epoch = epoch
            order = epoch_order(len(clips), steps_per_epoch * per_step, run_cfg.seed, epoch)
            for k in range(steps_per_epoch):
                chunk = order[k * per_step : (k + 1) * per_step]
                micro = []
                for j in range(opt_cfg.grad_accum_steps):
                    specs = [clips[i] for i in chunk[j * run_cfg.batch_size : (j + 1) * run_cfg.batch_size]]
                    arr = np.stack([load_clip(s, by_id[s.video_id], run_cfg.image_size, norm) for s in specs])
                    micro.append(trainer.batch_from_clips(arr, step=trainer.global_step * opt_cfg.grad_accum_steps + j))
                lb, lr = trainer.step(micro)
                losses.append(lb)
                row = {"step": trainer.global_step, "epoch": epoch, **lb.as_dict(), "lr": lr}
                log_fh.write(json.dumps(row) + "\n")
            trainer.epoch = epoch + 1
            path = trainer.save(ckpt_dir / f"epoch_{epoch + 1:04d}.ckpt")
            checkpoints.append(path)
            log.info("epoch %d done: total=%.4f", epoch + 1, losses[-1].total)
    final = out_dir / "checkpoint_final.ckpt"
    shutil.copyfile(checkpoints[-1], final)
    return PretrainResult(checkpoints, final, log_path, losses)
