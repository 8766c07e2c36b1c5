import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


OVERFIT_EPOCHS = 15


@pytest.fixture(scope="session")
def overfit_run():
    """The 100-sample memorization run: default network, lr 1e-3, seeded.

    Returns ``(net, dataset, records)``; the training set doubles as the
    validation set so ``val_accuracy`` is infer-mode accuracy on it.
    """
    from ildcnn import data, model, optim

    ds = data.synthesize_dataset(20, seed=1)
    net = model.build(seed=0)
    cfg = optim.TrainingConfig(learning_rate=1e-3, epochs=OVERFIT_EPOCHS, seed=0)
    net, records = optim.fit(net, ds, ds, cfg)
    return net, ds, records


# -- acceptance reporting ------------------------------------------------------------

_CRITERIA: list[tuple[str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    failed = rep.failed or (rep.when == "setup" and rep.skipped)
    if rep.when == "call" or failed:
        _CRITERIA.append((item.nodeid, f"{'PASS' if rep.passed else 'FAIL'} {mark.args[0]}"))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    seen = {}
    for nodeid, line in _CRITERIA:
        # a failing setup followed by teardown could report twice; keep the first
        seen.setdefault(nodeid, line)
    terminalreporter.section("acceptance criteria")
    for line in seen.values():
        terminalreporter.write_line(line)
