import pytest
from hypothesis import strategies as st

from brwre.env_law import (DensityPiece, Environment, EnvironmentLaw, LawAtom, MeanFamily, OffspringDistribution,
                           two_point_law)

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(id, text): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark and rep.when == "call":
        _ACCEPTANCE.append((mark.args[0], mark.args[1], rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, text, outcome in sorted(_ACCEPTANCE, key=lambda r: int(r[0])):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {cid}: {verdict}  {text}")


@pytest.fixture
def case_a_law():
    return two_point_law(0.75, 10 / 9, 2 / 5, drift=0.3)


@pytest.fixture
def case_c_law():
    return two_point_law(0.5, 2.0, 2 / 3, drift=0.5, delta=0.1)


@pytest.fixture
def density_law():
    return EnvironmentLaw.density([DensityPiece(0.5, 1.0, 1.6), DensityPiece(1.0, 2.0, 0.2)], drift=0.5)


DENSITY_PIECES = [(0.5, 1.0, 1.6), (1.0, 2.0, 0.2)]


def homogeneous_env(m, h, length, k=2):
    return Environment.homogeneous(OffspringDistribution.bernoulli_pair(1 - m / k, k), h, length)


means = st.floats(0.2, 3.0, allow_nan=False)
drifts = st.floats(0.05, 1.0, allow_nan=False)


@st.composite
def environments(draw, min_len=1, max_len=12):
    n = draw(st.integers(min_len, max_len))
    ms = draw(st.lists(means, min_size=n, max_size=n))
    hs = draw(st.lists(drifts, min_size=n, max_size=n))
    fam = MeanFamily("bernoulli_pair", 3)
    return Environment.from_sites([(fam(m), h) for m, h in zip(ms, hs)])


@st.composite
def two_atom_laws(draw):
    q = draw(st.floats(0.05, 0.95))
    m1 = draw(st.floats(0.2, 3.0))
    m2 = draw(st.floats(0.2, 3.0))
    h = draw(st.floats(0.05, 1.0))
    fam = MeanFamily("bernoulli_pair", 3)
    return EnvironmentLaw.atomic([LawAtom(fam(m1), h, q), LawAtom(fam(m2), h, 1 - q)], delta=0.05)
