"""Command-line entry point: ``tubemae <command> [options]``.

Every command reads a flat JSON config (``--config``), applies ``--set
key=value`` overrides on top, and writes the effective config to
``<out>/effective_config.json`` before doing any work.

Exit codes: 0 success, 1 validation/config error (including bad flags),
2 numerics error, 3 leakage-audit failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

from tubemae.data.audit import audit_leakage
from tubemae.data.ingest import ingest_video
from tubemae.data.manifest import read_manifests, read_phase_labels, read_triplet_labels
from tubemae.data.subsets import SETTING_NAMES, build_scaling_subsets, reference_settings
from tubemae.data.synthetic import N_MOTIONS, N_REGIONS, SyntheticSceneConfig, generate_synthetic_corpus, triplet_label_path
from tubemae.errors import LeakageError, NumericsError, TubeMAEError, ValidationError
from tubemae.evaluation.report import evaluate_records, read_predictions, write_predictions
from tubemae.harness import ScalingConfig, nested_settings, report, scaling_run
from tubemae.model import ModelConfig, VideoPretrainModel
from tubemae.training.finetune import FinetuneConfig, TaskSpec, TripletClassMap, encoder_from_checkpoint, finetune, predict
from tubemae.training.optim import OptimizerConfig
from tubemae.training.pretrain import RunConfig, run_pretraining

log = logging.getLogger("tubemae")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICS, EXIT_LEAKAGE = 0, 1, 2, 3
COMMANDS = ("ingest", "synth", "subsets", "audit", "pretrain", "finetune", "evaluate", "scaling-run", "report")


@dataclass
class Settings:
    """Flat, typed experiment configuration shared by all commands."""

    seed: int = 0
    model: str = "toy"  # toy | vit_b
    # pre-training
    epochs: int = 5
    batch_size: int = 8
    mask_ratio: float = 0.85
    clip_len: int = 16
    interval: int = 4
    image_size: list = field(default_factory=lambda: [64, 64])
    lambda_recon: float = 1.0
    lambda_distill: float = 0.05
    dtype: str = "float32"
    lr: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    warmup_fraction: float = 0.05
    grad_accum_steps: int = 4
    linear_scaling: bool = False
    max_steps_per_epoch: int = 0  # 0 = no cap
    eval_manifests: list = field(default_factory=list)
    # fine-tuning
    task: str = "phase"
    ft_epochs: int = 5
    ft_batch_size: int = 8
    ft_lr: float = 2e-4
    ft_weight_decay: float = 0.05
    ft_warmup_fraction: float = 0.1
    ft_max_steps_per_epoch: int = 0
    ft_layer_decay: float = 1.0
    n_classes: int = 4
    # evaluation
    n_boot: int = 0
    # synthetic corpus
    n_videos: int = 20
    n_phases: int = 4
    frames_per_phase: list = field(default_factory=lambda: [20, 30])
    n_sprites: int = 2
    texture_seed: int = 0
    split: str = "pretrain"
    prefix: str = "synth"
    # scaling harness
    scaling_groups: int = 3
    init_loss_clip_stride: int = 1
    # reports
    n_panels: int = 4

    @classmethod
    def load(cls, path: Optional[str], overrides: Sequence[str], seed: Optional[int]) -> "Settings":
        values = {}
        if path:
            try:
                values = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ValidationError(f"cannot read config {path}: {exc}") from None
            if not isinstance(values, dict):
                raise ValidationError("config must be a flat JSON object")
        types = {f.name: f.type for f in fields(cls)}
        defaults = asdict(cls())
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ValidationError(f"override must be key=value, got {item!r}")
            if key not in types:
                raise ValidationError(f"unknown config key {key!r}")
            values[key] = _parse_value(raw, defaults[key])
        if seed is not None:
            values["seed"] = seed
        for key, value in values.items():
            values[key] = _coerce(key, value, defaults[key])
        return cls(**values)

    def model_config(self) -> ModelConfig:
        if self.model == "toy":
            return ModelConfig.toy()
        if self.model == "vit_b":
            return ModelConfig.vit_b()
        raise ValidationError(f"model must be toy or vit_b, got {self.model!r}")

    def run_config(self) -> RunConfig:
        return RunConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            mask_ratio=self.mask_ratio,
            clip_len=self.clip_len,
            interval=self.interval,
            image_size=tuple(self.image_size),
            lambda_recon=self.lambda_recon,
            lambda_distill=self.lambda_distill,
            dtype=self.dtype,
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            beta1=self.beta1,
            beta2=self.beta2,
            base_lr=self.lr,
            weight_decay=self.weight_decay,
            warmup_fraction=self.warmup_fraction,
            grad_accum_steps=self.grad_accum_steps,
            linear_scaling=self.linear_scaling,
        )

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(
            epochs=self.ft_epochs,
            batch_size=self.ft_batch_size,
            lr=self.ft_lr,
            weight_decay=self.ft_weight_decay,
            warmup_fraction=self.ft_warmup_fraction,
            seed=self.seed,
            clip_len=self.clip_len,
            interval=self.interval,
            image_size=tuple(self.image_size),
            max_steps_per_epoch=self.ft_max_steps_per_epoch or None,
            layer_decay=self.ft_layer_decay,
        )

    def scene_config(self) -> SyntheticSceneConfig:
        return SyntheticSceneConfig(
            n_phases=self.n_phases,
            frames_per_phase=tuple(self.frames_per_phase),
            n_instrument_sprites=self.n_sprites,
            background_texture_seed=self.texture_seed,
            image_size=tuple(self.image_size),
        )


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValidationError(f"expected a boolean, got {raw!r}")
    if isinstance(default, list):
        if raw.startswith("["):
            return _parse_scalar(raw)
        return [] if not raw else [_parse_scalar(p) for p in raw.split(",")]
    return raw if isinstance(default, str) else _parse_scalar(raw)


def _parse_scalar(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ValidationError(f"{key}: expected a list, got {value!r}")
        if default and isinstance(default[0], int):
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ValidationError(f"{key}: expected a list of integers, got {value!r}")
        return value
    if not isinstance(value, str):
        raise ValidationError(f"{key}: expected a string, got {value!r}")
    return value


# -- argument parsing ----------------------------------------------------------


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    parser = _Parser(prog="tubemae", description="Masked video pre-training toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="extract frames from a video file")
    p.add_argument("--source", required=True)
    p.add_argument("--video-id", required=True)
    p.add_argument("--fps", type=float, default=1.0)
    p.add_argument("--procedure-tag", default="")

    sub.add_parser("synth", parents=[common], help="render a synthetic corpus")

    p = sub.add_parser("subsets", parents=[common], help="nested scaling subsets and frame totals")
    p.add_argument("--corpus", help="manifest; omit to report the reference settings A-E from metadata")

    p = sub.add_parser("audit", parents=[common], help="check pretrain/eval video-id overlap")
    p.add_argument("--corpus", required=True)
    p.add_argument("--eval", dest="eval_manifests", action="append", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="masked pre-training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--setting", default="custom", choices=[*SETTING_NAMES, "custom"])
    p.add_argument("--eval", dest="eval_manifests", action="append", default=[])

    p = sub.add_parser("finetune", parents=[common], help="fine-tune and predict on a labelled task")
    p.add_argument("--checkpoint", help="pre-trained checkpoint; random init when omitted")
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--test", required=True, help="evaluation manifest")

    p = sub.add_parser("evaluate", parents=[common], help="metrics from a prediction dump")
    p.add_argument("--preds", required=True)
    p.add_argument("--task", required=True, choices=["phase", "action", "triplet", "skill"])
    p.add_argument("--class-map", help="JSON triplet class map (triplet task)")

    p = sub.add_parser("scaling-run", parents=[common], help="pretrain/fine-tune/evaluate per nested setting")
    p.add_argument("--corpus", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)

    p = sub.add_parser("report", parents=[common], help="tables and figures for a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--corpus", help="manifest for reconstruction panels; defaults to the run's recorded corpus")
    return parser


# -- commands ------------------------------------------------------------------


def _write_effective(out: Path, settings: Settings, extra: dict, name: str = "effective_config.json") -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps({**asdict(settings), **extra}, indent=2, sort_keys=True) + "\n")
    return path


def _labels_for(task: str, manifests) -> dict:
    out = {}
    for m in manifests:
        if not m.label_path:
            raise ValidationError(f"{m.video_id}: manifest has no label_path")
        if task == "phase":
            out[m.video_id] = read_phase_labels(m.label_path)
        elif task == "triplet":
            out[m.video_id] = read_triplet_labels(triplet_label_path(m), m.frame_count)
        else:
            out[m.video_id] = json.loads(Path(m.label_path).read_text())
    return out


def _task_spec(s: Settings) -> TaskSpec:
    if s.task == "phase":
        return TaskSpec.phase(s.n_classes)
    if s.task == "action":
        return TaskSpec.action(s.n_classes)
    if s.task == "skill":
        return TaskSpec.skill(s.n_classes)
    if s.task == "triplet":
        # synthetic triplets: (sprite, motion, region)
        return TaskSpec.triplet(TripletClassMap.full(max(1, s.n_sprites), N_MOTIONS, N_REGIONS))
    raise ValidationError(f"unknown task {s.task!r}")


def cmd_ingest(args, s: Settings, out: Path) -> int:
    m = ingest_video(args.source, args.video_id, out, args.fps, args.procedure_tag)
    print(f"{m.video_id}: {m.frame_count} frames")
    return EXIT_OK


def cmd_synth(args, s: Settings, out: Path) -> int:
    manifests, _, _ = generate_synthetic_corpus(s.scene_config(), s.n_videos, s.seed, out, s.split, s.prefix)
    print(f"{len(manifests)} videos, {sum(m.frame_count for m in manifests)} frames -> {out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_subsets(args, s: Settings, out: Path) -> int:
    if args.corpus:
        corpus = read_manifests(args.corpus)
        settings, key = nested_settings(corpus, s.scaling_groups)
        subsets = build_scaling_subsets(corpus, settings, key)
        table = {
            name: {"total_frames": v["total_frames"], "video_ids": [m.video_id for m in v["manifests"]]}
            for name, v in subsets.items()
        }
    else:
        table = {st.name: {"total_frames": st.total_frames, "datasets": list(st.member_dataset_ids)} for st in reference_settings()}
    (out / "subsets.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    for name, v in table.items():
        print(f"{name}: {v['total_frames']:,} frames")
    return EXIT_OK


def _eval_manifests(paths) -> list:
    return [m for p in paths for m in read_manifests(p)]


def cmd_audit(args, s: Settings, out: Path) -> int:
    rep = audit_leakage(read_manifests(args.corpus), _eval_manifests(args.eval_manifests))
    (out / "audit.json").write_text(json.dumps({"shared_ids": rep.shared_ids}, indent=2) + "\n")
    if not rep.passed:
        print(f"leakage: {len(rep)} shared video id(s): {', '.join(rep.shared_ids)}", file=sys.stderr)
        return EXIT_LEAKAGE
    print("audit passed: no shared video ids")
    return EXIT_OK


def cmd_pretrain(args, s: Settings, out: Path) -> int:
    corpus = read_manifests(args.corpus)
    if args.setting != "custom":
        members = {st.name: set(st.member_dataset_ids) for st in reference_settings()}[args.setting]
        corpus = [m for m in corpus if m.procedure_tag in members]
        if not corpus:
            raise ValidationError(f"no corpus videos belong to setting {args.setting}")
    evals = _eval_manifests([*args.eval_manifests, *s.eval_manifests])
    res = run_pretraining(
        corpus,
        s.run_config(),
        s.optimizer_config(),
        out,
        model_cfg=s.model_config(),
        eval_splits=evals,
        max_steps_per_epoch=s.max_steps_per_epoch or None,
    )
    print(f"final loss {res.losses[-1].total:.4f}; checkpoint {res.final}")
    return EXIT_OK


def cmd_finetune(args, s: Settings, out: Path) -> int:
    train, test = read_manifests(args.train), read_manifests(args.test)
    spec = _task_spec(s)
    if args.checkpoint:
        encoder, model_cfg, _ = encoder_from_checkpoint(args.checkpoint)
    else:
        model_cfg = s.model_config()
        encoder = VideoPretrainModel(model_cfg, seed=s.seed).encoder
    cfg = s.finetune_config()
    result = finetune(spec, encoder, train, _labels_for(s.task, train), cfg, model_cfg.cube)
    records = predict(result, test, _labels_for(s.task, test), cfg)
    write_predictions(out / "predictions.jsonl", records)
    rep = evaluate_records(records, s.task, spec.class_map, s.n_boot, s.seed)
    rep.write_json(out / "metrics.json")
    rep.write_csv(out / "metrics.csv")
    if spec.class_map is not None:
        (out / "class_map.json").write_text(json.dumps(spec.class_map.to_dict()) + "\n")
    print(json.dumps(rep.metrics, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args, s: Settings, out: Path) -> int:
    class_map = None
    if args.class_map:
        class_map = TripletClassMap.from_dict(json.loads(Path(args.class_map).read_text()))
    rep = evaluate_records(read_predictions(args.preds), args.task, class_map, s.n_boot, s.seed)
    rep.write_json(out / "metrics.json")
    rep.write_csv(out / "metrics.csv")
    print(json.dumps(rep.metrics, sort_keys=True))
    return EXIT_OK


def cmd_scaling_run(args, s: Settings, out: Path) -> int:
    corpus = read_manifests(args.corpus)
    train, test = read_manifests(args.train), read_manifests(args.test)
    labels = _labels_for("phase", [*train, *test])
    settings, key = nested_settings(corpus, s.scaling_groups)
    cfg = ScalingConfig(
        model=s.model_config(),
        run=s.run_config(),
        optim=s.optimizer_config(),
        finetune=s.finetune_config(),
        n_phases=s.n_classes,
        max_pretrain_steps_per_epoch=s.max_steps_per_epoch or None,
        init_loss_clip_stride=s.init_loss_clip_stride,
    )
    rows = scaling_run(settings, corpus, cfg, train, test, labels, out, key)
    for r in rows:
        print(f"{r['setting']}: frames={r['frames_used']} init_loss_sum={r['init_loss_sum']:.3f} acc={r['image_accuracy']:.3f}")
    return EXIT_OK


def cmd_report(args, s: Settings, out: Path) -> int:
    produced = report(args.run, s.n_panels, s.seed, args.corpus)
    for name, path in produced.items():
        print(f"{name}: {path}")
    return EXIT_OK


HANDLERS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "subsets": cmd_subsets,
    "audit": cmd_audit,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "scaling-run": cmd_scaling_run,
    "report": cmd_report,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    try:
        settings = Settings.load(args.config, args.overrides, args.seed)
        out = Path(args.run if args.command == "report" else args.out)
        extra = {"command": args.command, **{k: v for k, v in vars(args).items() if k not in ("config", "overrides", "seed", "out", "command")}}
        # a report must not clobber the snapshot of the run it renders
        _write_effective(out, settings, extra, "report_config.json" if args.command == "report" else "effective_config.json")
        return HANDLERS[args.command](args, settings, out)
    except LeakageError as exc:
        print(f"leakage audit failed: {exc}", file=sys.stderr)
        return EXIT_LEAKAGE
    except NumericsError as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except (TubeMAEError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
