import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from byola import tensor as T  # noqa: E402
from byola import data  # noqa: E402


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Ten clips per class of the default tone corpus, written once per session."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    spec = data.SynthSpec(clips_per_class=10, seed=3)
    data.synth_dataset(spec, out)
    return out / "manifest.csv"
