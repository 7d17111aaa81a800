import pytest

from pmprims import nodes as nd
from pmprims._core import CArenaCore, PyArenaCore
from pmprims.pstore import Arena

CORES = [pytest.param(PyArenaCore, id="python")]
if CArenaCore is not None:
    CORES.append(pytest.param(CArenaCore, id="cython"))


@pytest.fixture(params=CORES)
def core_cls(request):
    return request.param


@pytest.fixture
def arena(core_cls):
    return Arena(1 << 20, core_cls=core_cls)


def value(i: int) -> bytes:
    return nd.pack_value(i, -i, i / 4)


def fill(node, keys):
    node.build([(k, value(k)) for k in keys], instrumented=False)
    return node


ACCEPTANCE: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
