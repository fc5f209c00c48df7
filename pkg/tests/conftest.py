import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedsim.data import ClientShard, Dataset

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_shard(labels, num_classes, feature_dim=6, seed=0, client_id=0) -> ClientShard:
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(labels.shape[0], feature_dim))
    idx = np.arange(labels.shape[0])
    return ClientShard(client_id, Dataset(X, labels, num_classes), idx)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
