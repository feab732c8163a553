"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the PASS/FAIL lines are
printed in the terminal summary. Criterion 7 runs a full pre-train/fine-tune
experiment over three seeds and dominates the runtime (about half an hour on
one CPU core).
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from tubemae import cli
from tubemae.data.clips import Normalization, build_clip_index, load_clip
from tubemae.data.manifest import write_manifests
from tubemae.data.subsets import REFERENCE_DATASET_FRAMES, build_scaling_subsets, metadata_totals, reference_settings
from tubemae.data.synthetic import SyntheticSceneConfig, generate_synthetic_corpus
from tubemae.evaluation import wilcoxon_one_sided
from tubemae.experiments import TransferSetup, transfer_experiment
from tubemae.harness import TABLE_BASE_COLUMNS, ScalingConfig, nested_settings, scaling_run
from tubemae.model import ModelConfig, VideoPretrainModel, count_parameters
from tubemae.objectives import reconstruction_loss, smooth_l1, total_loss
from tubemae.teacher import ReferenceTeacher
from tubemae.tokenization import grid_shape, make_tube_mask
from tubemae.training.checkpoint import load_checkpoint, save_checkpoint
from tubemae.training.finetune import FinetuneConfig
from tubemae.training.optim import OptimizerConfig, build_optimizer
from tubemae.training.pretrain import Pretrainer, RunConfig, compute_losses, make_batch, pretrain_step

pytestmark = pytest.mark.acceptance

RESULTS = {}


def verdict(n, ok, detail, elapsed, budget):
    """Record and print the PASS/FAIL line for criterion ``n``, then assert it."""
    within = elapsed <= budget
    passed = bool(ok) and within
    line = f"{'PASS' if passed else 'FAIL'} criterion {n:2d}: {detail} ({elapsed:.1f}s, budget {budget:g}s)"
    RESULTS[n] = line
    print(line)
    assert ok, line
    assert within, line


def synthetic_clips(root, n, seed=0):
    scene = SyntheticSceneConfig(n_phases=2, frames_per_phase=(20, 20))
    (m,), _, _ = generate_synthetic_corpus(scene, 1, seed, root, "pretrain", "acc")
    specs = build_clip_index(m.frame_count, 16, 4, "pretrain_dense", m.video_id)
    picks = np.linspace(0, len(specs) - 1, n).astype(int)
    return np.stack([load_clip(specs[i], m, (64, 64), Normalization()) for i in picks])


# -- 1 -------------------------------------------------------------------------


def test_criterion_01_token_and_mask_counts():
    t0 = time.perf_counter()
    grid = grid_shape((16, 224, 224, 3))
    n_tokens = grid[0] * grid[1] * grid[2]
    mask = make_tube_mask(14, 14, 0.85, seed=0)
    tm = mask.token_mask(grid[0])
    masked, visible_tubes = mask.n_masked_spatial, 196 - mask.n_masked_spatial
    visible_tokens = int((~tm).sum())
    ok = (n_tokens, masked, visible_tubes, visible_tokens) == (1568, 166, 30, 240)
    detail = f"tokens={n_tokens} masked_tubes={masked} visible_tubes={visible_tubes} visible_tokens={visible_tokens}"
    verdict(1, ok, detail, time.perf_counter() - t0, 1)


# -- 2 -------------------------------------------------------------------------


def test_criterion_02_parameter_counts():
    t0 = time.perf_counter()
    cfg = ModelConfig.vit_b()
    enc, total = count_parameters(cfg, "encoder"), count_parameters(cfg, "all")
    enc_err, total_err = abs(enc - 87.4e6) / 87.4e6, abs(total - 100.8e6) / 100.8e6
    ok = enc_err <= 0.015 and total_err <= 0.03
    detail = f"encoder={enc / 1e6:.2f}M (err {enc_err:.2%}) total={total / 1e6:.2f}M (err {total_err:.2%})"
    verdict(2, ok, detail, time.perf_counter() - t0, 1)


# -- 3 -------------------------------------------------------------------------


def test_criterion_03_gradient_check():
    t0 = time.perf_counter()
    model = VideoPretrainModel(ModelConfig.toy(), seed=0).double()
    model.train()
    teacher = ReferenceTeacher(64).double()
    clips = torch.from_numpy(np.random.default_rng(0).normal(size=(1, 16, 64, 64, 3)))
    batch = make_batch(clips, [make_tube_mask(4, 4, 0.85, 0)], teacher, dtype=torch.float64)

    def loss_fn():
        recon, distill = compute_losses(model, batch, 0.05)
        return recon + 0.05 * distill

    model.zero_grad()
    loss_fn().backward()
    params = dict(model.named_parameters())
    rng = np.random.default_rng(0)
    names = sorted(params)
    # denominator floor: float64 roundoff in the difference quotient is ~eps*|L|/h ~ 1e-11,
    # so a pure ratio is meaningless for gradients near zero
    worst, worst_abs, h, floor = 0.0, 0.0, 1e-5, 1e-6
    with torch.no_grad():
        for name in rng.choice(names, size=20, replace=False):
            p = params[name]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            analytic = float(p.grad[idx])
            orig = float(p[idx])
            p[idx] = orig + h
            up = float(loss_fn())
            p[idx] = orig - h
            down = float(loss_fn())
            p[idx] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
            worst_abs = max(worst_abs, abs(analytic - numeric))
    detail = f"20 sampled parameters, max relative error {worst:.2e} (tol 1e-4, denominator floor {floor:g}), max absolute error {worst_abs:.1e}"
    verdict(3, worst <= 1e-4, detail, time.perf_counter() - t0, 120)


# -- 4 -------------------------------------------------------------------------


def test_criterion_04_loss_contracts():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    pred = torch.randn(2, 32, 12, generator=g, dtype=torch.float64)
    target = torch.randn(2, 32, 12, generator=g, dtype=torch.float64)
    mask = torch.rand(2, 32, generator=g) < 0.85
    mask[:, 0] = True
    mask[:, 1] = False
    perturbed = target.clone()
    perturbed[~mask] += 1e3 * torch.randn(int((~mask).sum()), 12, generator=g, dtype=torch.float64)
    delta = float(reconstruction_loss(pred, perturbed, mask) - reconstruction_loss(pred, target, mask))
    totals_exact = all(total_loss(r, d).total == r + 0.05 * d for r, d in [(0.7, 0.3), (1.25, 0.5), (0.123, 4.56)])
    z = torch.zeros(1, dtype=torch.float64)
    b1 = float(smooth_l1(torch.tensor([0.5], dtype=torch.float64), z))
    b2 = float(smooth_l1(torch.tensor([2.0], dtype=torch.float64), z))
    ok = delta == 0.0 and totals_exact and (b1, b2) == (0.125, 1.5)
    detail = f"visible-perturbation delta={delta} total exact={totals_exact} smooth_l1(0.5)={b1} smooth_l1(2.0)={b2}"
    verdict(4, ok, detail, time.perf_counter() - t0, 1)


# -- 5 -------------------------------------------------------------------------


def test_criterion_05_gradient_accumulation():
    t0 = time.perf_counter()
    teacher = ReferenceTeacher(64).double()
    clips = np.random.default_rng(1).normal(size=(2, 16, 64, 64, 3))
    batch = make_batch(clips, [make_tube_mask(4, 4, 0.85, s) for s in range(2)], teacher, dtype=torch.float64)
    models = []
    for accum, micro in ((1, [batch]), (4, [batch] * 4)):
        model = VideoPretrainModel(ModelConfig.toy(), seed=0).double()
        opt = build_optimizer(model, OptimizerConfig(base_lr=1e-3, grad_accum_steps=accum))
        for step in range(2):
            pretrain_step(model, opt, micro, 1e-3, accum, step=step)
        models.append(model)
    diff = max((p - q).abs().max().item() for p, q in zip(models[0].parameters(), models[1].parameters()))
    verdict(5, diff <= 1e-10, f"max parameter difference accum=4 vs accum=1 after 2 updates: {diff:.2e} (tol 1e-10)", time.perf_counter() - t0, 60)


# -- 6 -------------------------------------------------------------------------


def test_criterion_06_overfit(tmp_path):
    t0 = time.perf_counter()
    clips = synthetic_clips(tmp_path, 4)
    model = VideoPretrainModel(ModelConfig.toy(), seed=0)
    batch = make_batch(clips, [make_tube_mask(4, 4, 0.85, s) for s in range(4)], ReferenceTeacher(64))
    opt = build_optimizer(model, OptimizerConfig(base_lr=1e-3, grad_accum_steps=1))
    losses = [pretrain_step(model, opt, [batch], 1e-3, 1, step=s).total for s in range(300)]
    drop = 1 - losses[-1] / losses[0]
    detail = f"total loss {losses[0]:.4f} -> {losses[-1]:.4f} over 300 steps, drop {drop:.1%} (need >= 90%)"
    verdict(6, drop >= 0.9, detail, time.perf_counter() - t0, 600)


# -- 7 -------------------------------------------------------------------------


def test_criterion_07_transfer_and_distillation(tmp_path):
    t0 = time.perf_counter()
    rows = transfer_experiment(TransferSetup(), tmp_path, seeds=(0, 1, 2))
    (tmp_path / "transfer.json").write_text(json.dumps(rows, indent=2))
    gains = [r["kd_on"]["image_accuracy"] - r["random"]["image_accuracy"] for r in rows]
    mean_gain = float(np.mean(gains))
    kd_wins = sum(
        r["kd_on"]["image_accuracy"] >= r["kd_off"]["image_accuracy"] and r["kd_on"]["phase_jaccard"] >= r["kd_off"]["phase_jaccard"]
        for r in rows
    )
    per_seed = "; ".join(
        f"seed {r['seed']}: random {r['random']['image_accuracy']:.3f}, "
        f"KD-on {r['kd_on']['image_accuracy']:.3f}/{r['kd_on']['phase_jaccard']:.3f}, "
        f"KD-off {r['kd_off']['image_accuracy']:.3f}/{r['kd_off']['phase_jaccard']:.3f}"
        for r in rows
    )
    print(per_seed)
    ok = mean_gain >= 0.05 and kd_wins >= 2
    detail = f"{TransferSetup().finetune.epochs}-epoch fine-tuning: mean accuracy gain over random init {100 * mean_gain:.1f} points (need >= 5); KD-on >= KD-off on (acc, Jaccard) in {kd_wins}/3 seeds (need >= 2)"
    verdict(7, ok, detail, time.perf_counter() - t0, 45 * 60)


# -- 8 -------------------------------------------------------------------------


def test_criterion_08_metric_oracles():
    import test_evaluation as ev

    t0 = time.perf_counter()
    checks = {
        "accuracy": ev.test_accuracy_variants_against_oracle,
        "phase P/R/J": ev.test_phase_metrics_against_oracle,
        "AP": ev.test_average_precision_against_oracle,
        "triplet projections": ev.test_triplet_metrics_against_oracle,
        "bootstrap endpoints": ev.test_bootstrap_endpoints_against_oracle,
    }
    failed = []
    for name, check in checks.items():
        try:
            check()
        except AssertionError:
            failed.append(name)
    detail = f"500 randomized instances each for {', '.join(checks)}; mismatching: {failed or 'none'}"
    verdict(8, not failed, detail, time.perf_counter() - t0, 120)


# -- 9 -------------------------------------------------------------------------


def test_criterion_09_wilcoxon_exact():
    import itertools
    from fractions import Fraction

    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    mismatches, checked = 0, 0
    for n in range(1, 11):
        for _ in range(10):
            diffs = rng.integers(-4, 5, n).astype(float)
            diffs[diffs == 0] = 1.0
            absd = np.abs(diffs)
            ranks = [Fraction(2 * int((absd < a).sum()) + int((absd == a).sum()) + 1, 2) for a in absd]
            w_obs = sum(r for r, d in zip(ranks, diffs) if d > 0)
            hits = sum(
                sum(r for r, s in zip(ranks, signs) if s) >= w_obs for signs in itertools.product((0, 1), repeat=n)
            )
            mismatches += wilcoxon_one_sided(diffs) != float(Fraction(hits, 2**n))
            checked += 1
    example = wilcoxon_one_sided([1, 2, 3, 4, 5])
    ok = mismatches == 0 and example == 0.03125
    verdict(9, ok, f"{checked} cases n<=10 vs 2^n enumeration, {mismatches} mismatches; n=5 all-positive p={example}", time.perf_counter() - t0, 60)


# -- 10 ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def leak_inputs(tmp_path_factory):
    root = tmp_path_factory.mktemp("leak")
    scene = SyntheticSceneConfig(n_phases=2, frames_per_phase=(8, 8))
    pre, _, _ = generate_synthetic_corpus(scene, 2, 0, root / "pre", "pretrain", "pre")
    test, _, _ = generate_synthetic_corpus(scene, 1, 1, root / "test", "test", "tst")
    write_manifests(root / "leaky_test.jsonl", [*test, pre[0].with_split("test")])
    return root


def test_criterion_10_leakage_gate(leak_inputs):
    t0 = time.perf_counter()
    out = leak_inputs / "run"
    code = cli.run(["pretrain", "--corpus", str(leak_inputs / "pre" / "manifest.jsonl"), "--eval", str(leak_inputs / "leaky_test.jsonl"), "--out", str(out)])
    aborted = not (out / "checkpoint_final.ckpt").exists() and not (out / "train_log.jsonl").exists()
    verdict(10, code == 3 and aborted, f"pretrain exit code {code} with one shared video id, no training artifacts={aborted}", time.perf_counter() - t0, 1)


# -- 11 ------------------------------------------------------------------------


def test_criterion_11_checkpoint_fidelity(tmp_path):
    t0 = time.perf_counter()

    def trainer():
        run = RunConfig(epochs=1, batch_size=2, seed=0, dtype="float64")
        return Pretrainer(ModelConfig.toy(), run, OptimizerConfig(base_lr=1e-3, grad_accum_steps=1), ReferenceTeacher(64).double(), steps_per_epoch=4)

    clips = [np.random.default_rng(s).normal(size=(2, 16, 64, 64, 3)) for s in range(3)]
    a = trainer()
    for c in clips[:2]:
        a.step([a.batch_from_clips(c)])
    path = a.save(tmp_path / "mid.ckpt")
    rec = load_checkpoint(path)
    bitwise = path.read_bytes() == save_checkpoint(tmp_path / "again.ckpt", rec).read_bytes() and all(
        torch.equal(rec.model_state[k], v) for k, v in a.model.state_dict().items()
    )
    a.step([a.batch_from_clips(clips[2])])
    b = Pretrainer.from_checkpoint(path, ReferenceTeacher(64).double())
    b.step([b.batch_from_clips(clips[2])])
    diff = max((p - q).abs().max().item() for p, q in zip(a.model.parameters(), b.model.parameters()))
    verdict(11, bitwise and diff <= 1e-10, f"round trip bitwise-equal={bitwise}; resume vs uninterrupted max diff {diff:.2e} (tol 1e-10)", time.perf_counter() - t0, 60)


# -- 12 ------------------------------------------------------------------------


def test_criterion_12_scaling_bookkeeping(tmp_path):
    t0 = time.perf_counter()
    expected = {"A": 86_344, "B": 153_922, "C": 441_608, "D": 1_203_159, "E": 3_552_777}
    settings = reference_settings()
    totals = metadata_totals(settings, REFERENCE_DATASET_FRAMES)
    reference_ok = totals == expected and {s.name: s.total_frames for s in settings} == expected

    scene = SyntheticSceneConfig(n_phases=3, frames_per_phase=(8, 12))
    corpus, ph1, _ = generate_synthetic_corpus(scene, 6, 0, tmp_path / "pre", "pretrain", "pre")
    ft, ph2, _ = generate_synthetic_corpus(scene, 2, 1, tmp_path / "ft", "train", "ft")
    nested, key = nested_settings(corpus, 3)
    cfg = ScalingConfig(
        run=RunConfig(epochs=1, batch_size=4),
        finetune=FinetuneConfig(epochs=1, batch_size=4, max_steps_per_epoch=4),
        n_phases=3,
        max_pretrain_steps_per_epoch=4,
    )
    test = [m.with_split("test") for m in ft[1:]]
    rows = scaling_run(nested, corpus, cfg, ft[:1], test, {**ph1, **ph2}, tmp_path / "scaling", key)
    sums = [r["init_loss_sum"] for r in rows]
    monotone = all(a <= b for a, b in zip(sums, sums[1:]))
    subsets = build_scaling_subsets(corpus, nested, key)
    frames_ok = [r["frames_used"] for r in rows] == [subsets[s.name]["total_frames"] for s in nested]
    columns = (*TABLE_BASE_COLUMNS, "image_accuracy", "video_accuracy", "phase_precision", "phase_recall", "phase_jaccard")
    complete = len(rows) == len(nested) and all(
        isinstance(r.get(c), (int, float, str)) and (not isinstance(r[c], float) or math.isfinite(r[c])) for r in rows for c in columns
    )
    ok = reference_ok and monotone and frames_ok and complete
    detail = (
        f"reference totals {'match' if reference_ok else 'differ'}; synthetic init-loss sums "
        f"{', '.join(f'{s:.2f}' for s in sums)} monotone={monotone}; table complete={complete} frames={frames_ok}"
    )
    verdict(12, ok, detail, time.perf_counter() - t0, 300)
