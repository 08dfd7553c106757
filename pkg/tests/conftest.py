import numpy as np
import pytest

from crtreg.backbone import TapPoint
from crtreg.context import ContextMode
from crtreg.dataset import EmbeddingCache
from crtreg.pipeline import extract_observation, make_backbones, preprocess_observation
from crtreg.synthetic import SyntheticSpec, make_synthetic_dataset

SMALL_INPUT = 64  # backbone input side for fast fixtures


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """8 synthetic runners, preprocessed and extracted for every cell with the stub backbone."""
    root = tmp_path_factory.mktemp("small")
    manifest = make_synthetic_dataset(root / "data", SyntheticSpec(n_runners=8, seed=3))
    cache = EmbeddingCache(root / "cache")
    backbones = make_backbones(stub=True)
    for rec in manifest.records:
        preprocess_observation(manifest, rec, list(ContextMode), root / "processed")
        extract_observation(
            rec, root / "processed", cache, backbones, list(ContextMode), list(TapPoint), input_size=SMALL_INPUT
        )
    return manifest, cache, root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
