import numpy as np
import pytest

from mega import autodiff as ad
from mega import losses
from mega.gradcheck import small_graph
from mega.model import GraphInputs


@pytest.fixture(autouse=True)
def _clean_state():
    ad.set_default_dtype(np.float64)
    ad.reset_stats()
    losses.counters.clear()
    yield
    ad.set_default_dtype(np.float64)


@pytest.fixture
def tiny_dataset():
    return small_graph(num_nodes=10, num_features=4, num_classes=4, seed=0)


@pytest.fixture
def tiny_graph(tiny_dataset):
    return GraphInputs.from_dataset(tiny_dataset)


# --- acceptance reporting: one PASS/FAIL line per criterion ----------------

ACCEPTANCE_LINES: list[str] = []


class Criterion:
    def __init__(self):
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)


@pytest.fixture
def criterion(request):
    c = Criterion()
    request.node.criterion = c
    return c


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    c = getattr(item, "criterion", None)
    if c is None or rep.when != "call":
        return
    status = "PASS" if rep.passed else "FAIL"
    line = f"{status} {item.name.removeprefix('test_')}"
    if c.details:
        line += " | " + "; ".join(c.details)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
