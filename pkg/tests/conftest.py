import os
from collections import OrderedDict

import numpy as np
import pytest
import torch

torch.set_num_threads(max(1, os.cpu_count() or 1))

_criteria = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): tags a test as part of an acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            number, title = mark.args
            _criteria.setdefault(number, {"title": title, "outcomes": {}})




@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    entry = _criteria.setdefault(mark.args[0], {"title": mark.args[1], "outcomes": {}})
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry["outcomes"][item.nodeid] = "passed" if rep.passed else rep.outcome


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        outcomes = list(entry["outcomes"].values())
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        elif any(o == "failed" for o in outcomes):
            status = "FAIL"
        else:
            status = "SKIP"
        tr.write_line(f"criterion {number}: {status} - {entry['title']} ({len(outcomes)} checks)")
        for note in entry.get("notes", []):
            tr.write_line(f"    {note}")


@pytest.fixture
def note(request):
    """Attach a measured value to the acceptance summary line of the calling test."""
    mark = request.node.get_closest_marker("acceptance")

    def add(text):
        entry = _criteria.setdefault(mark.args[0], {"title": mark.args[1], "outcomes": {}})
        entry.setdefault("notes", []).append(text)

    return add


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_domains():
    """Three small shifted synthetic domains on 20x20 images, 4 classes."""
    from csac.datasets import synthetic_domains

    return synthetic_domains(seed=3, H=3, C=4, shift=1.0, n_train_per_class=12, n_test_per_class=8)


@pytest.fixture
def tiny_cfg():
    from csac.federation import TrainingConfig

    return TrainingConfig(acquisition_epochs=1, rounds=2, calibration_epochs=1, batch_size=16, seed=5)
