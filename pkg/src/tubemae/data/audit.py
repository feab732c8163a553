from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from tubemae.data.manifest import VideoManifest


@dataclass
class LeakageReport:
    shared_ids: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.shared_ids

    def __len__(self):
        return len(self.shared_ids)


def _ids(items: Iterable) -> set:
    return {m.video_id if isinstance(m, VideoManifest) else str(m) for m in items}


def audit_leakage(pretrain: Iterable, eval_splits: Iterable) -> LeakageReport:
    """List every video id present in both the pre-training corpus and the evaluation splits.

    Both arguments accept manifests or bare id strings.
    """
    return LeakageReport(sorted(_ids(pretrain) & _ids(eval_splits)))
