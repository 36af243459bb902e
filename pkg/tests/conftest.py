import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from anosovfam.family import (
    AffineToral,
    PerturbedCat,
    cat_family,
    constant_family,
    random_perturbed_cat_family,
)
from anosovfam.splitting import estimate_splitting, fit_constants

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0
LAM_CAT = (3.0 - np.sqrt(5.0)) / 2.0
# eigenvectors of [[2,1],[1,1]]
E_U = np.array([GOLDEN, 1.0]) / np.hypot(GOLDEN, 1.0)
E_S = np.array([-1.0, GOLDEN]) / np.hypot(GOLDEN, 1.0)


@pytest.fixture(scope="session")
def cat():
    return cat_family(1)


@pytest.fixture(scope="session")
def cat_split(cat):
    return estimate_splitting(cat, grid=8)


@pytest.fixture(scope="session")
def pcat():
    return constant_family(PerturbedCat(-0.9), 1, name="pcat")


@pytest.fixture(scope="session")
def pcat_split(pcat):
    return estimate_splitting(pcat, grid=12)


@pytest.fixture(scope="session")
def pcat_fit(pcat, pcat_split):
    return fit_constants(pcat, pcat_split)


@pytest.fixture(scope="session")
def random_pcat():
    return random_perturbed_cat_family(8, seed=1)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# --- acceptance reporting --------------------------------------------------------

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    ok = rep.passed and _ACCEPTANCE.get(n, (True,))[0]
    _ACCEPTANCE[n] = (ok, title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, title = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}")
