import numpy as np
import pytest

from gvcc.data import gen_synthetic
from gvcc.fields import ToyField, ToyFieldWeights, TrainConfig, train_toy_field

TOY_DIMS = (3, 4, 8, 8)  # one 9-frame GOP in latent frames


@pytest.fixture(scope="session")
def toy_weights_path(tmp_path_factory):
    """Toy velocity field trained once per session on moving-blob videos."""
    data = gen_synthetic("moving_blob", 3000, TOY_DIMS, seed=0).videos
    res = train_toy_field(data, TrainConfig(epochs=30, hidden=256, seed=0))
    path = tmp_path_factory.mktemp("field") / "toy.gvcf"
    res.weights.save(path)
    return path


@pytest.fixture(scope="session")
def toy_field(toy_weights_path):
    return ToyField(ToyFieldWeights.load(toy_weights_path))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for _, line in sorted(lines.items()):
        terminalreporter.write_line(line)
