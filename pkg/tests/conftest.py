import os
from collections import OrderedDict

import numpy as np
import pytest
import torch

from ssmnormals import synthetic

torch.set_num_threads(int(os.environ.get("SSMNORMALS_THREADS", "1")))

_criteria = OrderedDict()


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    num, text = marker
    entry = _criteria.setdefault(num, {"text": text, "outcomes": []})
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry["outcomes"].append("skipped" if report.skipped else report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        entry = _criteria[num]
        outs = entry["outcomes"]
        if not outs:
            status = "NOT RUN"
        elif any(o == "failed" for o in outs):
            status = "FAIL"
        elif all(o == "skipped" for o in outs):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {num:>2} {status:<7} {entry['text']}")


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    synthetic.make_dataset(root, n_points=3000, eval_count=200, seed=0)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
