"""Data-scaling harness and run reports (tables, loss curves, reconstruction panels)."""

from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from tubemae.data.clips import Normalization, build_clip_index, load_clip  # noqa: E402
from tubemae.data.manifest import VideoManifest, read_manifests  # noqa: E402
from tubemae.data.subsets import ScalingSetting, build_scaling_subsets, dataset_of  # noqa: E402
from tubemae.errors import ValidationError  # noqa: E402
from tubemae.evaluation.report import MetricReport, evaluate_records, write_predictions  # noqa: E402
from tubemae.evaluation.stats import mse_map  # noqa: E402
from tubemae.model import ModelConfig, VideoPretrainModel  # noqa: E402
from tubemae.objectives import normalize_targets, reconstruction_loss, smooth_l1  # noqa: E402
from tubemae.teacher import ReferenceTeacher  # noqa: E402
from tubemae.tokenization import TubeMask, grid_shape, make_tube_mask, patchify, unpatchify  # noqa: E402
from tubemae.training.checkpoint import load_checkpoint  # noqa: E402
from tubemae.training.finetune import FinetuneConfig, TaskSpec, encoder_from_checkpoint, finetune, predict  # noqa: E402
from tubemae.training.optim import OptimizerConfig  # noqa: E402
from tubemae.training.pretrain import RunConfig, make_batch, run_pretraining  # noqa: E402

log = logging.getLogger(__name__)


# -- scaling harness -----------------------------------------------------------


def nested_settings(corpus: Sequence[VideoManifest], n_groups: int) -> tuple[list[ScalingSetting], Callable]:
    """Split ``corpus`` into ``n_groups`` contiguous chunks; setting k holds chunks 0..k.

    Returns the settings and the dataset-key function mapping a manifest to its chunk.
    """
    if not 1 <= n_groups <= len(corpus):
        raise ValidationError(f"need 1 <= n_groups <= {len(corpus)}, got {n_groups}")
    chunks = np.array_split(np.arange(len(corpus)), n_groups)
    group_of = {corpus[i].video_id: f"group{k}" for k, idx in enumerate(chunks) for i in idx}
    names = [chr(ord("A") + k) for k in range(n_groups)]
    settings = [ScalingSetting(names[k], tuple(f"group{j}" for j in range(k + 1))) for k in range(n_groups)]
    return settings, lambda m: group_of[m.video_id]


def _clip_mask(seed: int, video_id: str, anchor: int, h: int, w: int, ratio: float) -> TubeMask:
    # keyed by clip identity, so a clip gets the same mask in every setting
    return make_tube_mask(h, w, ratio, int(np.random.default_rng([seed, zlib.crc32(video_id.encode()), anchor]).integers(2**62)))


@torch.no_grad()
def clip_init_losses(
    model_cfg: ModelConfig,
    manifests: Sequence[VideoManifest],
    run_cfg: RunConfig,
    norm: Normalization = Normalization(),
    clip_stride: int = 1,
    batch_size: int = 32,
) -> dict:
    """Pre-training loss of the seed-``run_cfg.seed`` initial weights on every clip.

    Returns ``{(video_id, start): loss}``. Every clip's mask is a function of the
    clip alone, so the per-clip losses are shared across nested settings.
    """
    model = VideoPretrainModel(model_cfg, seed=run_cfg.seed).eval()
    teacher = None
    if run_cfg.lambda_distill:
        teacher = ReferenceTeacher(model_cfg.decoder.distill_out_dim, stride=model_cfg.cube[1])
    by_id = {m.video_id: m for m in manifests}
    specs = []
    for m in manifests:
        specs.extend(build_clip_index(m.frame_count, run_cfg.clip_len, run_cfg.interval, "pretrain_dense", m.video_id)[::clip_stride])
    out = {}
    for start in range(0, len(specs), batch_size):
        chunk = specs[start : start + batch_size]
        clips = np.stack([load_clip(s, by_id[s.video_id], run_cfg.image_size, norm) for s in chunk])
        _, h, w = grid_shape(clips.shape[-4:], model_cfg.cube)
        masks = [_clip_mask(run_cfg.seed, s.video_id, s.anchor_frame, h, w, run_cfg.mask_ratio) for s in chunk]
        batch = make_batch(clips, masks, teacher, model_cfg.cube)
        _, recon, distill = model(batch.clips, batch.visible_index, with_distill=teacher is not None)
        target = normalize_targets(patchify(batch.clips, model_cfg.cube))
        for i, s in enumerate(chunk):
            loss = run_cfg.lambda_recon * reconstruction_loss(recon[i : i + 1], target[i : i + 1], batch.token_mask[i : i + 1])
            if teacher is not None:
                loss = loss + run_cfg.lambda_distill * smooth_l1(distill[i], batch.teacher_targets[i])
            out[(s.video_id, s.anchor_frame)] = float(loss)
    return out


@dataclass
class ScalingConfig:
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    run: RunConfig = RunConfig(epochs=1)
    optim: OptimizerConfig = OptimizerConfig(base_lr=1e-3, grad_accum_steps=1)
    finetune: FinetuneConfig = FinetuneConfig(epochs=1)
    n_phases: int = 4
    max_pretrain_steps_per_epoch: Optional[int] = None
    init_loss_clip_stride: int = 1
    norm: Normalization = Normalization()


TABLE_BASE_COLUMNS = ("setting", "n_videos", "frames_used", "init_loss_sum", "init_loss_mean", "final_pretrain_loss")


def scaling_run(
    settings: Sequence[ScalingSetting],
    corpus: Sequence[VideoManifest],
    cfg: ScalingConfig,
    train: Sequence[VideoManifest],
    test: Sequence[VideoManifest],
    phase_labels: Mapping,
    out_dir,
    dataset_key=dataset_of,
) -> list[dict]:
    """Pre-train, fine-tune on the phase task and evaluate once per setting.

    Writes ``scaling_table.json`` / ``.csv`` and per-setting run directories
    under ``out_dir``; returns the table rows in setting order.
    """
    out_dir = Path(out_dir)
    subsets = build_scaling_subsets(corpus, settings, dataset_key)
    largest = subsets[settings[-1].name]["manifests"]
    clip_losses = clip_init_losses(cfg.model, largest, cfg.run, cfg.norm, cfg.init_loss_clip_stride)
    rows = []
    for s in settings:
        members = subsets[s.name]["manifests"]
        ids = {m.video_id for m in members}
        own = [v for (vid, _), v in clip_losses.items() if vid in ids]
        run_dir = out_dir / f"setting_{s.name}"
        res = run_pretraining(
            members,
            cfg.run,
            cfg.optim,
            run_dir,
            model_cfg=cfg.model,
            eval_splits=test,
            norm=cfg.norm,
            max_steps_per_epoch=cfg.max_pretrain_steps_per_epoch,
        )
        encoder, _, _ = encoder_from_checkpoint(res.final)
        ft_cfg = cfg.finetune
        result = finetune(TaskSpec.phase(cfg.n_phases), encoder, train, phase_labels, ft_cfg, cfg.model.cube, cfg.norm)
        records = predict(result, test, phase_labels, ft_cfg, cfg.norm)
        write_predictions(run_dir / "predictions.jsonl", records)
        report = evaluate_records(records, "phase")
        report.write_json(run_dir / "metrics.json")
        row = {
            "setting": s.name,
            "n_videos": len(members),
            "frames_used": subsets[s.name]["total_frames"],
            "init_loss_sum": float(np.sum(own)),
            "init_loss_mean": float(np.mean(own)),
            "final_pretrain_loss": res.losses[-1].total,
            **report.metrics,
        }
        log.info("setting %s: %s", s.name, row)
        rows.append(row)
    write_table(out_dir / "scaling_table", rows)
    return rows


def write_table(stem, rows: Sequence[dict]) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    jpath = stem.with_suffix(".json")
    jpath.write_text(json.dumps(list(rows), indent=2, sort_keys=True) + "\n")
    cpath = stem.with_suffix(".csv")
    cols = list(rows[0]) if rows else list(TABLE_BASE_COLUMNS)
    with open(cpath, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    return jpath, cpath


# -- reports -------------------------------------------------------------------


def plot_loss_curves(log_path, out_path) -> Path:
    rows = [json.loads(line) for line in Path(log_path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ValidationError(f"{log_path}: empty training log")
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("total", "recon", "distill"):
        if any(r.get(key) for r in rows):
            ax.plot(steps, [r[key] for r in rows], label=key)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def _to_image(frame: np.ndarray, norm: Normalization) -> np.ndarray:
    return np.clip(frame * np.asarray(norm.std) + np.asarray(norm.mean), 0.0, 1.0)


@torch.no_grad()
def reconstruction_panels(
    model: VideoPretrainModel,
    clips: np.ndarray,
    masks: Sequence[TubeMask],
    out_path,
    norm: Normalization = Normalization(),
) -> tuple[int, int]:
    """Grid of original / masked input / reconstruction / MSE map, one row per clip.

    Shows the middle frame of each clip. Predicted cubes are mapped back to
    pixel space with the per-cube statistics of the original. Returns the grid
    shape (rows, columns).
    """
    model.eval()
    cube = model.cfg.cube
    x = torch.as_tensor(np.asarray(clips), dtype=next(model.parameters()).dtype)
    grid = grid_shape(x.shape[-4:], cube)
    batch = make_batch(x, masks, None, cube, x.dtype)
    _, recon, _ = model(batch.clips, batch.visible_index, with_distill=False)
    cubes = patchify(batch.clips, cube)
    mean = cubes.mean(dim=-1, keepdim=True)
    std = cubes.var(dim=-1, unbiased=False, keepdim=True).sqrt()
    target = normalize_targets(cubes)
    pixels = recon * (std + 1e-6) + mean
    token_mask = batch.token_mask.unsqueeze(-1)
    shown = unpatchify(torch.where(token_mask, pixels, cubes), grid, cube)
    masked_in = unpatchify(torch.where(token_mask, torch.zeros_like(cubes), cubes), grid, cube)

    n = len(masks)
    f = x.shape[1] // 2
    fig, axes = plt.subplots(n, 4, figsize=(8, 2 * n), squeeze=False)
    for i in range(n):
        err, _ = mse_map(recon[i], target[i], batch.token_mask[i].numpy(), grid)
        panels = [
            _to_image(x[i, f].numpy(), norm),
            _to_image(masked_in[i, f].numpy(), norm),
            _to_image(shown[i, f].numpy(), norm),
            err[:, :, f // cube[0]],
        ]
        for j, (ax, img) in enumerate(zip(axes[i], panels)):
            ax.imshow(img, cmap="magma" if j == 3 else None, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
    for ax, title in zip(axes[0], ("original", "masked", "reconstruction", "MSE")):
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return n, 4


def format_metrics(report: dict) -> str:
    lines = [f"task: {report['task']}"]
    ci = report.get("ci", {})
    for name, value in report["metrics"].items():
        text = "undefined" if value is None else f"{value:.4f}"
        if name in ci:
            text += f"  [{ci[name][0]:.4f}, {ci[name][1]:.4f}]"
        lines.append(f"  {name}: {text}")
    for flag in report.get("flags", []):
        lines.append(f"  note: {flag}")
    return "\n".join(lines) + "\n"


def report(run_dir, n_panels: int = 4, seed: int = 0, corpus=None) -> dict:
    """Render every report the artifacts in ``run_dir`` support.

    Reconstruction panels need clips: ``corpus`` names a manifest, defaulting
    to the one recorded in the run's effective config. Returns ``{artifact
    name: path}``. Raises ValidationError if the directory
    holds no recognised run artifacts.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ValidationError(f"run directory {run_dir} does not exist")
    out = {}
    cfg = {}
    cfg_path = run_dir / "effective_config.json"
    if cfg_path.exists():
        cfg = json.loads(cfg_path.read_text())

    if (run_dir / "train_log.jsonl").exists():
        out["loss_curve"] = plot_loss_curves(run_dir / "train_log.jsonl", run_dir / "loss_curve.png")

    if (run_dir / "metrics.json").exists():
        data = json.loads((run_dir / "metrics.json").read_text())
        rep = MetricReport(data["task"], data["metrics"], data.get("per_class", {}), {k: tuple(v) for k, v in data.get("ci", {}).items()})
        out["metrics_csv"] = rep.write_csv(run_dir / "metrics.csv")
        (run_dir / "metrics.txt").write_text(format_metrics(data))
        out["metrics_txt"] = run_dir / "metrics.txt"

    if (run_dir / "scaling_table.json").exists():
        rows = json.loads((run_dir / "scaling_table.json").read_text())
        _, out["scaling_csv"] = write_table(run_dir / "scaling_table", rows)
        text = "\n".join("  ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()) for r in rows)
        (run_dir / "scaling_table.txt").write_text(text + "\n")
        out["scaling_txt"] = run_dir / "scaling_table.txt"

    ckpt = run_dir / "checkpoint_final.ckpt"
    corpus = corpus or cfg.get("corpus")
    if ckpt.exists() and corpus and n_panels > 0:
        out["recon_panels"] = _panels_from_run(ckpt, Path(corpus), run_dir / "recon_panels.png", n_panels, seed)

    if not out:
        raise ValidationError(f"{run_dir}: no run artifacts found (train_log.jsonl, metrics.json, scaling_table.json)")
    return out


def _panels_from_run(ckpt: Path, corpus_path: Path, out_path: Path, n: int, seed: int) -> Path:
    rec = load_checkpoint(ckpt)
    model_cfg = ModelConfig.from_dict(rec.config["model"])
    run = rec.config["run"]
    model = VideoPretrainModel(model_cfg)
    model.load_state_dict(rec.model_state)
    norm = Normalization(tuple(rec.normalization["mean"]), tuple(rec.normalization["std"]))
    manifests = read_manifests(corpus_path)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(manifests), size=n, replace=len(manifests) < n)
    size = tuple(run["image_size"])
    clips, masks = [], []
    for k, i in enumerate(picks):
        m = manifests[i]
        specs = build_clip_index(m.frame_count, run["clip_len"], run["interval"], "pretrain_dense", m.video_id)
        clips.append(load_clip(specs[int(rng.integers(len(specs)))], m, size, norm))
        _, h, w = grid_shape(clips[-1].shape, model_cfg.cube)
        masks.append(make_tube_mask(h, w, run["mask_ratio"], seed + k))
    reconstruction_panels(model, np.stack(clips), masks, out_path, norm)
    return out_path
