import numpy as np
import pytest

from plrbias.experiment import REFERENCE_A, REFERENCE_B, REFERENCE_R, REFERENCE_S
from plrbias.lti_core import Polynomial, RationalFilter
from plrbias.loop_sim import ControllerRS, simulate_closed_loop
from plrbias.models import Kind, ModelStructure
from plrbias.pem import pem_estimate
from plrbias.plr import run_plr
from plrbias.signals import PrbsConfig, prbs_generate


@pytest.fixture(scope="session")
def controller():
    return ControllerRS(REFERENCE_R, REFERENCE_S)


@pytest.fixture(scope="session")
def plant():
    return RationalFilter(REFERENCE_B, REFERENCE_A)


@pytest.fixture(scope="session")
def prbs():
    return prbs_generate(PrbsConfig(registers=9, taps=(9, 5), length=8 * 511), seed=511)


@pytest.fixture(scope="session")
def loop_data(plant, controller, prbs):
    """Noise-free closed-loop record of the reference loop."""
    return simulate_closed_loop(plant, controller, prbs)


@pytest.fixture(scope="session")
def order2(controller):
    return ModelStructure(Kind.CL_OE, 2, 2, controller=controller)


@pytest.fixture(scope="session")
def plr_order2(order2, loop_data):
    return run_plr(order2, loop_data)


@pytest.fixture(scope="session")
def pem_order2(order2, loop_data, plr_order2):
    return pem_estimate(order2, loop_data, plr_order2.theta)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion, echoed in the terminal summary."""

    def report(number: int, title: str, ok: bool, detail: str):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
