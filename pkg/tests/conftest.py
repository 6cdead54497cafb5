import contextlib
import time

import pytest

from clusteradm import bmcproto
from clusteradm.bmcproto import ChassisState, Power, SensorKind, SensorRecord

DEFAULT_SENSORS = (
    SensorRecord(1, SensorKind.CPU_TEMP, 45, 70),
    SensorRecord(2, SensorKind.FAN_SPEED, 5400, 9000),
    SensorRecord(3, SensorKind.VOLTAGE, 1450, 1600),
)


@pytest.fixture
def emulator_farm(tmp_path):
    """Start one BMC emulator per node; returns (emulators, endpoints file)."""
    started = []

    def make(nodes, power=Power.ON, sensors=DEFAULT_SENSORS):
        emus = {}
        for n in nodes:
            emu = bmcproto.BmcEmulator(("127.0.0.1", 0), list(sensors), ChassisState(power)).start()
            started.append(emu)
            emus[n] = emu
        path = tmp_path / "endpoints"
        path.write_text("".join(f"{n} {e.endpoint}\n" for n, e in emus.items()))
        return emus, path

    yield make
    for emu in started:
        emu.stop()


# -- acceptance reporting ----------------------------------------------------

def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def criterion(request):
    """Context manager that records one PASS/FAIL line per acceptance criterion."""
    results = request.config._acceptance

    @contextlib.contextmanager
    def check(number, title):
        notes = []
        start = time.monotonic()
        try:
            yield notes
        except BaseException:
            outcome = "FAIL"
            raise
        else:
            outcome = "PASS"
        finally:
            detail = "; ".join(notes)
            line = f"criterion {number:>2} {outcome}  {title} ({time.monotonic() - start:.2f}s{': ' + detail if detail else ''})"
            results[number] = line
            print(line)

    return check


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_acceptance", {})
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
