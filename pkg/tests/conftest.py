import json

import pytest

from towerdecay.tower import TowerSpec


@pytest.fixture
def three_atom_spec():
    """Aperiodic 3-atom tower used by several modules."""
    return TowerSpec.build([0.5, 0.3, 0.2], [1, 2, 1], [[1, 2, 3], [1, 3], [2]])


@pytest.fixture
def spec_file(tmp_path):
    def write(doc, name="tower.json"):
        path = tmp_path / name
        path.write_text(json.dumps(doc))
        return path
    return write


ACCEPTANCE = {}


@pytest.fixture
def record():
    """Store one verdict line per acceptance criterion for the terminal summary."""
    def put(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok
    return put


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
