from tubemae.training.checkpoint import CheckpointRecord, load_checkpoint, save_checkpoint
from tubemae.training.finetune import (
    FinetuneConfig,
    TaskSpec,
    TripletClassMap,
    encoder_from_checkpoint,
    finetune,
    predict,
)
from tubemae.training.optim import OptimizerConfig, lr_at
from tubemae.training.pretrain import Pretrainer, PretrainBatch, RunConfig, make_batch, pretrain_step, run_pretraining

__all__ = [
    "CheckpointRecord",
    "FinetuneConfig",
    "OptimizerConfig",
    "PretrainBatch",
    "Pretrainer",
    "RunConfig",
    "TaskSpec",
    "TripletClassMap",
    "encoder_from_checkpoint",
    "finetune",
    "load_checkpoint",
    "lr_at",
    "make_batch",
    "predict",
    "pretrain_step",
    "run_pretraining",
    "save_checkpoint",
]
