import numpy as np
import pytest

from fxgesture import gesturedata, netcore, trainer

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def accel_split():
    samples = gesturedata.synth_accel(classes=8, per_class=40, noise=0.05, seed=0)
    return gesturedata.stratified_split(samples, (0.5, 0.2, 0.3), seed=0)


@pytest.fixture(scope="session")
def small_accel_split():
    samples = gesturedata.synth_accel(classes=4, per_class=12, t_range=(8, 14),
                                      noise=0.05, seed=1)
    return gesturedata.stratified_split(samples, (0.5, 0.25, 0.25), seed=1)


@pytest.fixture(scope="session")
def trained_accel(accel_split):
    """Float N=32 accelerometer model trained on the seeded synthetic set."""
    model = netcore.MasterModel.initialize(netcore.accel_lstm_graph(32), seed=0)
    cfg = trainer.TrainConfig(max_epochs=60, seed=0)
    return trainer.train_float(model, accel_split, cfg)


@pytest.fixture(scope="session")
def small_trained(small_accel_split):
    model = netcore.MasterModel.initialize(netcore.accel_lstm_graph(8, classes=4), seed=0)
    cfg = trainer.TrainConfig(max_epochs=25, seed=0)
    return trainer.train_float(model, small_accel_split, cfg).model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
