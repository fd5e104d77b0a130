import numpy as np
import pytest

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = mark.args
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
        _ACCEPTANCE[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture
def measured(request):
    """Attach a measured-value string to the acceptance summary line."""

    def note(text):
        request.node.user_properties.append(("measured", text))

    return note


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, m, lo=0.5, hi=2.0):
    Q, _ = np.linalg.qr(rng.normal(size=(m, m)))
    return (Q * rng.uniform(lo, hi, m)) @ Q.T


def random_psd(rng, m, rank=None, scale=1.0):
    G = rng.normal(size=(m, rank or m)) * scale
    return G @ G.T


def random_antisym(rng, m, norm=None):
    X = rng.normal(size=(m, m))
    J = X - X.T
    if norm is not None and m > 1:
        J *= norm / np.linalg.norm(J)
    return J
