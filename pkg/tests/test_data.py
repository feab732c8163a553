import json

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tubemae.data import audit_leakage
from tubemae.data.clips import ClipSpec, Normalization, build_clip_index, clear_frame_cache, load_clip
from tubemae.data.ingest import ingest_video, sample_positions
from tubemae.data.manifest import (
    VideoManifest,
    frame_filename,
    manifest_from_dict,
    read_manifests,
    read_phase_labels,
    read_triplet_labels,
    verify_frames,
    write_manifests,
    write_phase_labels,
    write_triplet_labels,
)
from tubemae.data.subsets import (
    REFERENCE_DATASET_FRAMES,
    ScalingSetting,
    build_scaling_subsets,
    metadata_totals,
    reference_settings,
)
from tubemae.data.synthetic import SyntheticSceneConfig, generate_synthetic_corpus, region_of, render_video
from tubemae.errors import ConfigError, CorruptCorpusError, EmptyVideoError, IngestError, ValidationError


def write_video(path, n_frames, fps=25.0, size=(32, 24)):
    w, h = size
    vw = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), fps, (w, h))
    assert vw.isOpened()
    for i in range(n_frames):
        img = np.full((h, w, 3), i % 256, dtype=np.uint8)
        vw.write(img)
    vw.release()
    return path


# -- manifests -----------------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    ms = [
        VideoManifest("a", str(tmp_path / "a"), 10, 1.0, "lap", "pretrain"),
        VideoManifest("b", str(tmp_path / "b"), 3, 1.0, "", "test", "labels/b.csv"),
    ]
    path = write_manifests(tmp_path / "m.jsonl", ms)
    assert read_manifests(path) == ms
    for line in path.read_text().splitlines():
        assert set(json.loads(line)) == {
            "video_id", "frame_dir", "frame_count", "source_fps_sampled", "procedure_tag", "split", "label_path",
        }


def test_manifest_rejects_unknown_fields():
    rec = {"video_id": "a", "frame_dir": "x", "frame_count": 1, "source_fps_sampled": 1.0,
           "procedure_tag": "", "split": "train", "label_path": None, "extra": 1}
    with pytest.raises(ValidationError):
        manifest_from_dict(rec)


def test_manifest_duplicate_ids_rejected(tmp_path):
    m = VideoManifest("a", "x", 1)
    with pytest.raises(ValidationError):
        write_manifests(tmp_path / "m.jsonl", [m, m])


@pytest.mark.parametrize("bad", [{"frame_count": 0}, {"split": "holdout"}])
def test_manifest_validation(bad):
    kw = {"video_id": "a", "frame_dir": "x", "frame_count": 3, **bad}
    with pytest.raises(ValidationError):
        VideoManifest(**kw)


def test_frame_filenames_sort_numerically():
    names = [frame_filename(i) for i in (0, 9, 10, 100, 999999)]
    assert names == sorted(names)


def test_label_files_round_trip(tmp_path):
    phases = [0, 0, 1, 2, 2]
    assert read_phase_labels(write_phase_labels(tmp_path / "p.csv", phases)) == phases
    trips = [set(), {(0, 1, 2)}, {(0, 1, 2), (1, 0, 3)}, set()]
    assert read_triplet_labels(write_triplet_labels(tmp_path / "t.csv", trips, 4), 4) == trips


def test_phase_labels_must_cover_every_frame(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("frame_index,label\n0,1\n2,1\n")
    with pytest.raises(ValidationError):
        read_phase_labels(p)


# -- ingest --------------------------------------------------------------------


def test_sample_positions_one_fps():
    assert sample_positions(1500, 25.0, 1.0) == [25 * k for k in range(60)]
    assert sample_positions(25, 25.0, 1.0) == [0]
    with pytest.raises(IngestError):
        sample_positions(100, 25.0, 30.0)


def test_ingest_sixty_seconds(tmp_path):
    src = write_video(tmp_path / "v.avi", 1500)
    m = ingest_video(src, "vid1", tmp_path / "store")
    assert m.frame_count == 60
    assert verify_frames(m) == (24, 32)
    assert read_manifests(tmp_path / "store" / "manifest.jsonl") == [m]
    # frame k holds native frame 25k; grey level encodes the native index mod 256
    img = cv2.imread(str(m.frame_path(3)))
    assert abs(int(img.mean()) - 75) <= 3


def test_ingest_one_second_and_duplicate(tmp_path):
    src = write_video(tmp_path / "v.avi", 25)
    m = ingest_video(src, "short", tmp_path / "store")
    assert m.frame_count == 1
    with pytest.raises(IngestError, match="duplicate"):
        ingest_video(src, "short", tmp_path / "store")


def test_ingest_undecodable(tmp_path):
    bad = tmp_path / "bad.avi"
    bad.write_bytes(b"not a video at all")
    with pytest.raises(IngestError):
        ingest_video(bad, "bad", tmp_path / "store")


def test_ingest_empty_video(tmp_path, monkeypatch):
    class NoFrames:
        def __init__(self, path):
            pass

        def isOpened(self):
            return True

        def get(self, prop):
            return 0.0

        def read(self):
            return False, None

        def release(self):
            pass

    monkeypatch.setattr(cv2, "VideoCapture", NoFrames)
    with pytest.raises(EmptyVideoError):
        ingest_video(tmp_path / "x.avi", "empty", tmp_path / "store")
    assert not (tmp_path / "store" / "manifest.jsonl").exists()


# -- clip index ----------------------------------------------------------------


def test_dense_clip_examples():
    clips = build_clip_index(100, mode="pretrain_dense")
    assert len(clips) == 100
    assert clips[0].frame_indices == tuple(range(0, 61, 4))
    assert clips[99].frame_indices == (99,) * 16


def test_causal_clip_short_video():
    clip = build_clip_index(5, mode="finetune_causal")[2]
    oracle = tuple(max(0, 2 - 4 * k) for k in range(15, -1, -1))
    assert clip.frame_indices == oracle
    assert clip.frame_indices[-1] == 2 and clip.anchor_frame == 2


@pytest.mark.parametrize("kw", [{"clip_len": 0}, {"interval": 0}, {"mode": "bogus"}])
def test_clip_index_config_errors(kw):
    with pytest.raises(ConfigError):
        build_clip_index(10, **kw)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 120),
    clip_len=st.integers(1, 20),
    interval=st.integers(1, 6),
    mode=st.sampled_from(["pretrain_dense", "finetune_causal"]),
)
def test_clip_index_properties(n, clip_len, interval, mode):
    clips = build_clip_index(n, clip_len, interval, mode)
    assert len(clips) == n
    for s, c in enumerate(clips):
        idx = np.array(c.frame_indices)
        assert len(idx) == clip_len
        assert idx.min() >= 0 and idx.max() <= n - 1
        assert c.anchor_frame == s
        raw = s + np.arange(clip_len) * interval if mode == "pretrain_dense" else s - np.arange(clip_len)[::-1] * interval
        inside = (raw >= 0) & (raw <= n - 1)
        assert np.array_equal(idx[inside], raw[inside])
        assert np.all(np.diff(idx) >= 0)


# -- clip loading --------------------------------------------------------------


def _frame_store(tmp_path, frames):
    d = tmp_path / "frames"
    d.mkdir()
    for i, f in enumerate(frames):
        cv2.imwrite(str(d / frame_filename(i)), f)
    return VideoManifest("v", str(d), len(frames))


def test_load_clip_black_frames(tmp_path):
    m = _frame_store(tmp_path, [np.zeros((40, 50, 3), np.uint8)] * 4)
    norm = Normalization()
    clip = load_clip(ClipSpec("v", (0, 1, 2, 3), 3), m, (32, 32), norm)
    assert clip.shape == (4, 32, 32, 3) and clip.dtype == np.float32
    expected = (0.0 - np.array(norm.mean)) / np.array(norm.std)
    np.testing.assert_allclose(clip[0, 0, 0], expected, rtol=1e-6)
    assert np.all(clip == clip[0, 0, 0])


def test_load_clip_default_size_and_determinism(tmp_path):
    rng = np.random.default_rng(0)
    m = _frame_store(tmp_path, [rng.integers(0, 255, (100, 120, 3), dtype=np.uint8) for _ in range(3)])
    spec = ClipSpec("v", (0, 1, 2) * 5 + (2,), 2)
    a = load_clip(spec, m)
    clear_frame_cache()
    b = load_clip(spec, m)
    assert a.shape == (16, 224, 224, 3)
    assert a.tobytes() == b.tobytes()


def test_load_clip_channel_order(tmp_path):
    bgr = np.zeros((16, 16, 3), np.uint8)
    bgr[..., 2] = 255  # pure red in OpenCV's BGR order
    m = _frame_store(tmp_path, [bgr])
    clip = load_clip(ClipSpec("v", (0,), 0), m, (16, 16), Normalization((0, 0, 0), (1, 1, 1)))
    np.testing.assert_allclose(clip[0, 0, 0], [1.0, 0.0, 0.0])


def test_load_clip_missing_frame(tmp_path):
    m = _frame_store(tmp_path, [np.zeros((8, 8, 3), np.uint8)])
    with pytest.raises(CorruptCorpusError):
        load_clip(ClipSpec("v", (0, 5), 5), m, (8, 8))


# -- synthetic generator -------------------------------------------------------


def test_synthetic_determinism(tmp_path):
    cfg = SyntheticSceneConfig(frames_per_phase=(5, 7))
    a = generate_synthetic_corpus(cfg, 2, 7, tmp_path / "a")
    b = generate_synthetic_corpus(cfg, 2, 7, tmp_path / "b")
    assert a[1] == b[1] and a[2] == b[2]
    for ma, mb in zip(a[0], b[0]):
        assert ma.frame_count == mb.frame_count
        for i in range(ma.frame_count):
            assert ma.frame_path(i).read_bytes() == mb.frame_path(i).read_bytes()


def test_synthetic_fixed_phase_lengths(tmp_path):
    cfg = SyntheticSceneConfig(n_phases=3, frames_per_phase=(20, 20))
    ms, phases, _ = generate_synthetic_corpus(cfg, 2, 0, tmp_path)
    for m in ms:
        assert m.frame_count == 60
        assert phases[m.video_id] == [0] * 20 + [1] * 20 + [2] * 20
        assert read_phase_labels(m.label_path) == phases[m.video_id]


def test_synthetic_no_sprites_means_no_triplets(tmp_path):
    cfg = SyntheticSceneConfig(n_instrument_sprites=0, frames_per_phase=(3, 4))
    _, _, trips = generate_synthetic_corpus(cfg, 1, 0, tmp_path)
    assert all(t == set() for t in next(iter(trips.values())))


def test_synthetic_triplets_follow_script():
    cfg = SyntheticSceneConfig(n_phases=4, frames_per_phase=(4, 4), n_instrument_sprites=2)
    frames, phases, trips = render_video(cfg, np.random.default_rng(0))
    assert frames.shape == (16, 64, 64, 3) and frames.dtype == np.uint8
    for p, ts in zip(phases, trips):
        (sprite, motion, region), = ts
        assert (sprite, motion) == (p % 2, p % 4)
        assert 0 <= region < 4


def test_region_quadrants():
    assert [region_of(x, y, 64, 64) for x, y in [(1, 1), (40, 1), (1, 40), (40, 40)]] == [0, 1, 2, 3]


@pytest.mark.parametrize("kw", [{"n_phases": 1}, {"frames_per_phase": (5, 2)}, {"n_instrument_sprites": 99}])
def test_synthetic_config_validation(kw, tmp_path):
    with pytest.raises(ConfigError):
        generate_synthetic_corpus(SyntheticSceneConfig(**kw), 1, 0, tmp_path)


# -- scaling subsets -----------------------------------------------------------


def test_reference_setting_totals():
    totals = [s.total_frames for s in reference_settings()]
    assert totals == [86_344, 153_922, 441_608, 1_203_159, 3_552_777]
    assert metadata_totals(reference_settings(), REFERENCE_DATASET_FRAMES) == dict(zip("ABCDE", totals))


def test_reference_settings_nest():
    sets = [set(s.member_dataset_ids) for s in reference_settings()]
    assert all(a <= b for a, b in zip(sets, sets[1:]))


def test_single_dataset_settings_identical():
    corpus = [VideoManifest(f"v{i}", "x", 10 + i, procedure_tag="only") for i in range(3)]
    settings = [ScalingSetting(n, ("only",)) for n in "ABCDE"]
    out = build_scaling_subsets(corpus, settings)
    assert len({tuple(m.video_id for m in v["manifests"]) for v in out.values()}) == 1
    assert all(v["total_frames"] == 33 for v in out.values())


def test_synthetic_nested_totals(small_corpus):
    corpus = small_corpus["pretrain"]
    key = {m.video_id: f"g{i}" for i, m in enumerate(corpus)}
    settings = [ScalingSetting(n, tuple(f"g{j}" for j in range(k + 1))) for k, n in enumerate("ABC")]
    out = build_scaling_subsets(corpus, settings, lambda m: key[m.video_id])
    oracle = np.cumsum([m.frame_count for m in corpus]).tolist()
    assert [v["total_frames"] for v in out.values()] == oracle
    assert oracle == sorted(oracle)


def test_non_nested_settings_rejected():
    corpus = [VideoManifest("a", "x", 1, procedure_tag="d1"), VideoManifest("b", "x", 1, procedure_tag="d2")]
    with pytest.raises(ConfigError, match="nesting"):
        build_scaling_subsets(corpus, [ScalingSetting("A", ("d1",)), ScalingSetting("B", ("d2",))])


def test_unresolved_dataset_rejected():
    with pytest.raises(ConfigError):
        build_scaling_subsets([VideoManifest("a", "x", 1, procedure_tag="d1")], [ScalingSetting("A", ("zz",))])


# -- leakage audit -------------------------------------------------------------


def test_audit_examples():
    assert audit_leakage(["a", "b"], ["c"]).passed
    rep = audit_leakage(["a", "b"], ["b", "c"])
    assert len(rep) == 1 and rep.shared_ids == ["b"]
    pre = [f"v{i:02d}" for i in range(40)]
    test = ["v03", "v11", "v17", "v29", "v38", "x1", "x2"]
    assert audit_leakage(pre, test).shared_ids == ["v03", "v11", "v17", "v29", "v38"]


def test_audit_accepts_manifests():
    a = [VideoManifest("a", "x", 1), VideoManifest("b", "x", 1)]
    assert audit_leakage(a, [VideoManifest("b", "y", 2, split="test")]).shared_ids == ["b"]


@given(st.sets(st.integers(0, 30)), st.sets(st.integers(0, 30)))
def test_audit_symmetric(a, b):
    a, b = [str(x) for x in a], [str(x) for x in b]
    assert set(audit_leakage(a, b).shared_ids) == set(audit_leakage(b, a).shared_ids) == set(a) & set(b)
