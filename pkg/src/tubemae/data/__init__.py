from tubemae.data.audit import LeakageReport, audit_leakage
from tubemae.data.clips import ClipSpec, Normalization, build_clip_index, load_clip
from tubemae.data.ingest import ingest_video
from tubemae.data.manifest import VideoManifest, read_manifests, write_manifests
from tubemae.data.subsets import ScalingSetting, build_scaling_subsets, reference_settings
from tubemae.data.synthetic import SyntheticSceneConfig, generate_synthetic_corpus

__all__ = [
    "ClipSpec",
    "LeakageReport",
    "Normalization",
    "ScalingSetting",
    "SyntheticSceneConfig",
    "VideoManifest",
    "audit_leakage",
    "build_clip_index",
    "build_scaling_subsets",
    "generate_synthetic_corpus",
    "ingest_video",
    "load_clip",
    "reference_settings",
    "read_manifests",
    "write_manifests",
]
