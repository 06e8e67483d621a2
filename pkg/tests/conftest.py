import json
from pathlib import Path

import pytest

from tunneltimes.core import Potential, WavePacketSpec, gaussian_packet, make_grid, UNITS
from tunneltimes.harness import SweepConfig, simulate, trajectories
from tunneltimes.propagator import PropagatorConfig, evolve

FIXTURES = json.loads((Path(__file__).parent / "oracles" / "fixtures.json").read_text())

# lines printed at the end of the session by the acceptance suite
ACCEPTANCE_LINES: dict = {}


@pytest.fixture(scope="session")
def fixtures():
    return FIXTURES


@pytest.fixture(scope="session")
def fast_config():
    """Default configuration at 8x the default time step."""
    return SweepConfig(dt_scale=8.0)


@pytest.fixture(scope="session")
def base_fast(fast_config):
    setup, f0, rec = simulate(fast_config)
    return setup, f0, rec


@pytest.fixture(scope="session")
def base_ensemble(fast_config, base_fast):
    setup, f0, rec = base_fast
    main, ens, fld = trajectories(fast_config, rec, f0, setup.potential.a, setup.potential.b)
    return main, ens


@pytest.fixture(scope="session")
def free_run():
    """Free packet with a measurement region [0, 3] in front of it."""
    k0 = UNITS.wavenumber(5.0)
    spec = WavePacketSpec(-60.0, 6.0, k0)
    pot = Potential.free(0.0, 3.0)
    t_max = 75.0
    grid = make_grid(spec, pot, t_span=t_max, planes=(0.0, 3.0))
    f0 = gaussian_packet(grid, spec)
    dt = 8 * grid.dt
    cfg = PropagatorConfig(dt=dt, t_max=t_max, frame_stride=max(1, round(0.05 / dt)),
                           t_min=60.0 / spec.group_velocity)
    return spec, f0, evolve(f0, pot, cfg, (0.0, 3.0))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
