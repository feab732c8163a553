import numpy as np
import pytest
import torch

from tubemae.data.synthetic import SyntheticSceneConfig, generate_synthetic_corpus

SMALL_SCENE = SyntheticSceneConfig(n_phases=3, frames_per_phase=(6, 9))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Three short pre-training videos and two disjoint labelled test videos."""
    root = tmp_path_factory.mktemp("corpus")
    pre, ph1, tr1 = generate_synthetic_corpus(SMALL_SCENE, 3, 0, root / "pre", "pretrain", "pre")
    test, ph2, tr2 = generate_synthetic_corpus(SMALL_SCENE, 2, 1, root / "test", "test", "tst")
    return {
        "root": root,
        "pretrain": pre,
        "test": test,
        "phase_labels": {**ph1, **ph2},
        "triplet_labels": {**tr1, **tr2},
    }


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.RESULTS[n])
