import numpy as np
import pytest

from mambadesk.numerics import Tape, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f(arr)`` w.r.t. every entry of ``arr``."""
    work = arr.astype(np.float64).copy()
    out = np.empty_like(work)
    for i in np.ndindex(work.shape):
        orig = work[i]
        work[i] = orig + eps
        up = f(work.copy())
        work[i] = orig - eps
        down = f(work.copy())
        work[i] = orig
        out[i] = (up - down) / (2 * eps)
    return out


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8))


def tape_grad(fn, *arrays):
    """Gradients of scalar ``fn(*tensors)`` w.r.t. each input array."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
    g = tape.backward(out)
    return [g[t] for t in ts]


# -- acceptance summary ------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line each in the
# terminal summary; ``record_property("detail", ...)`` adds the measured values.

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = _MARKERS.get(report.nodeid)
    if marker is None:
        return
    number, title = marker
    detail = dict(report.user_properties).get("detail", "")
    if report.outcome == "skipped":
        status = "SKIP"
    else:
        status = "PASS" if report.passed else "FAIL"
    # several tests may share a criterion: any failure sticks, details accumulate
    prev = _CRITERIA.get(number)
    if prev is not None:
        status = "FAIL" if "FAIL" in (prev[0], status) else status
        detail = "; ".join(d for d in (prev[2], detail) if d)
    _CRITERIA[number] = (status, title, detail)


_MARKERS: dict[str, tuple[int, str]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _MARKERS[item.nodeid] = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    expected = sorted(set(n for n, _ in _MARKERS.values()))
    if not expected:
        return
    terminalreporter.section("acceptance criteria")
    titles = {n: t for n, t in _MARKERS.values()}
    for n in expected:
        status, title, detail = _CRITERIA.get(n, ("NOT RUN", titles[n], ""))
        line = f"criterion {n}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
