import numpy as np
import pytest

from mlorq.model_store import write_model
from mlorq.netsim import Layer, SequentialModel

_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    _ACCEPTANCE.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_model(rng, dims, activations=None, bias=True):
    acts = activations or ["relu"] * (len(dims) - 2) + ["none"]
    layers = []
    for i, (n_in, n_out) in enumerate(zip(dims, dims[1:])):
        W = rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)
        b = 0.1 * rng.standard_normal(n_out) if bias else None
        layers.append(Layer(f"fc{i}", W, b, acts[i]))
    return SequentialModel(layers, name="toy")


@pytest.fixture
def small_model(rng):
    return random_model(rng, [6, 8, 5, 3])


@pytest.fixture
def model_dir(tmp_path, rng):
    """A 4 -> 3 -> 2 chain written as manifest plus container."""
    model = random_model(rng, [4, 3, 2])
    calib = rng.standard_normal((16, 4))
    # round-trip through float32 so in-memory values match the stored ones
    model = SequentialModel(
        [Layer(l.name, l.weight.astype(np.float32), l.bias.astype(np.float32), l.activation)
         for l in model.layers],
        name="toy",
    )
    path = write_model(tmp_path / "model", model, calib.astype(np.float32))
    return path
