import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("uwno", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("uwno")


# With ReLU masks and pool choices frozen, a network output is affine in any
# single weight, so central differences have no truncation error and a wider
# step only shrinks float32 cancellation noise.
COMPOSITE_STEP = 0.1


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def projection(rng, shape):
    """Random linear functional, turning a tensor-valued op into a scalar for gradient checks."""
    from uwno import tensor as T

    weights = T.Tensor(rng.uniform(-1, 1, shape))
    return lambda out: T.sum(out * weights)


def off_kink(rng, shape, step=1e-2):
    """Uniform [-1, 1] draws with every |x| >= 2*step, so ReLU stencils stay on one side."""
    x = rng.uniform(-1, 1, shape)
    while np.any(small := np.abs(x) < 2 * step):
        x[small] = rng.uniform(-1, 1, int(small.sum()))
    return x


# ---------------------------------------------------------------------------
# acceptance reporting: tests marked ``criterion(n, title)`` get one summary
# line each, with any ``record_property("detail", ...)`` text appended

_criteria: dict[str, tuple[int, str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = dict(report.user_properties).get("detail", "")
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        _criteria[report.nodeid] = (marker[0], marker[1], outcome, detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result()._criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, detail in sorted(_criteria.values()):
        terminalreporter.write_line(f"{outcome}  criterion {number:>2} {title}: {detail}".rstrip(": "))
