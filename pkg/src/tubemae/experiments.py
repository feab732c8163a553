"""Desk-scale transfer and distillation-ablation experiments on synthetic video."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from tubemae.data.synthetic import SyntheticSceneConfig, generate_synthetic_corpus
from tubemae.evaluation.report import evaluate_records
from tubemae.model import ModelConfig, VideoPretrainModel
from tubemae.training.finetune import FinetuneConfig, TaskSpec, encoder_from_checkpoint, finetune, predict
from tubemae.training.optim import OptimizerConfig
from tubemae.training.pretrain import RunConfig, run_pretraining

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransferSetup:
    scene: SyntheticSceneConfig = SyntheticSceneConfig()
    n_pretrain: int = 20
    n_train: int = 6
    n_val: int = 2
    n_test: int = 2
    data_seed: int = 0
    run: RunConfig = RunConfig(epochs=4, batch_size=8)
    optim: OptimizerConfig = OptimizerConfig(base_lr=1e-3, grad_accum_steps=1)
    # low-budget fine-tuning: with more epochs random init catches up on this task
    finetune: FinetuneConfig = FinetuneConfig(epochs=1)
    max_pretrain_steps_per_epoch: Optional[int] = None


@dataclass
class SyntheticSplits:
    pretrain: list
    train: list
    val: list
    test: list
    phase_labels: dict
    triplet_labels: dict


def make_splits(setup: TransferSetup, root) -> SyntheticSplits:
    """Pre-training videos and disjoint fine-tuning train/val/test videos."""
    root = Path(root)
    pre, ph1, tr1 = generate_synthetic_corpus(setup.scene, setup.n_pretrain, setup.data_seed, root / "pretrain", "pretrain", "pre")
    n_ft = setup.n_train + setup.n_val + setup.n_test
    ft, ph2, tr2 = generate_synthetic_corpus(setup.scene, n_ft, setup.data_seed, root / "finetune", "train", "ft")
    train = ft[: setup.n_train]
    val = [m.with_split("val") for m in ft[setup.n_train : setup.n_train + setup.n_val]]
    test = [m.with_split("test") for m in ft[setup.n_train + setup.n_val :]]
    return SyntheticSplits(pre, train, val, test, {**ph1, **ph2}, {**tr1, **tr2})


def pretrain_variant(setup: TransferSetup, splits: SyntheticSplits, out_dir, seed: int, distill: bool):
    run = replace(setup.run, seed=seed, lambda_distill=setup.run.lambda_distill if distill else 0.0)
    return run_pretraining(
        splits.pretrain,
        run,
        setup.optim,
        out_dir,
        model_cfg=ModelConfig.toy(),
        eval_splits=splits.test,
        max_steps_per_epoch=setup.max_pretrain_steps_per_epoch,
    )


def finetune_phase(setup: TransferSetup, splits: SyntheticSplits, seed: int, checkpoint=None) -> dict:
    """Fine-tune on the phase task from ``checkpoint`` (or random init); test-split metrics."""
    if checkpoint is None:
        encoder = VideoPretrainModel(ModelConfig.toy(), seed=seed).encoder
    else:
        encoder, _, _ = encoder_from_checkpoint(checkpoint)
    cfg = replace(setup.finetune, seed=seed)
    spec = TaskSpec.phase(setup.scene.n_phases)
    result = finetune(spec, encoder, splits.train, splits.phase_labels, cfg)
    out = {}
    for name, vids in (("val", splits.val), ("test", splits.test)):
        rep = evaluate_records(predict(result, vids, splits.phase_labels, cfg), "phase")
        out[name] = rep.metrics
    return out


def transfer_experiment(setup: TransferSetup, root, seeds=(0, 1, 2)) -> list[dict]:
    """Per seed: test metrics for random init, pre-trained with and without distillation."""
    root = Path(root)
    splits = make_splits(setup, root / "data")
    rows = []
    for seed in seeds:
        row = {"seed": seed}
        row["random"] = finetune_phase(setup, splits, seed)["test"]
        for name, kd in (("kd_on", True), ("kd_off", False)):
            res = pretrain_variant(setup, splits, root / f"seed{seed}_{name}", seed, kd)
            row[name] = finetune_phase(setup, splits, seed, res.final)["test"]
            row[f"{name}_final_loss"] = res.losses[-1].total
        log.info("seed %d: %s", seed, row)
        rows.append(row)
    return rows
