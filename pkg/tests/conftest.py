import pytest

from arda.evalharness import demo_plan, load_fixtures
from arda.knowledge import KnowledgeBase
from arda.simenv import SimEnvironment, load_surface
from arda.symlang import load_schema

FIXED_CLOCK = "2024-01-01T00:00:00+00:00"


@pytest.fixture(scope="session")
def schema():
    return load_schema()


@pytest.fixture(scope="session")
def surface():
    return load_surface()


@pytest.fixture(scope="session")
def fixtures():
    return load_fixtures()


@pytest.fixture
def env(surface, schema):
    return SimEnvironment(surface, schema)


@pytest.fixture
def quiet_env(surface, schema):
    return SimEnvironment(surface.with_noise(0.0), schema)


@pytest.fixture
def kb(schema):
    return KnowledgeBase(schema=schema, clock=lambda: FIXED_CLOCK)


@pytest.fixture
def plan():
    return demo_plan("none", "LGBModel")


# -- acceptance reporting ----------------------------------------------------------

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; printed in the summary."""

    def report(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
