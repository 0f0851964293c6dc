import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from daf import synthworld as sw

settings.register_profile(
    "daf", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("daf")


@pytest.fixture(scope="session")
def small_cfg():
    return sw.DatasetConfig(episodes=40, seed=7)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, small_cfg):
    path = tmp_path_factory.mktemp("data") / "small.dafset"
    sw.generate_dataset(small_cfg, path)
    return sw.Dataset(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_features(small_dataset):
    from daf import model as md

    return md.dataset_features(small_dataset)


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS, line

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(line(n))
