import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from emae import data  # noqa: E402


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "small.emaeds"
    data.generate(data.SynthSpec(n_images=32, seed=3), path)
    return path
