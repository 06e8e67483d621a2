import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import constants

from tunneltimes.core import (
    UNITS, Grid, GridError, Potential, StateFrame, WavePacketSpec, current, density,
    derivative, gaussian_packet, make_grid, max_spacing,
)
from tunneltimes.propagator import PropagatorConfig, evolve


def default_spec(center=-78.0, sigma=12.0):
    return WavePacketSpec.from_energy(5.0, sigma, center)


def test_kinetic_constant_matches_codata(fixtures):
    ref = constants.hbar**2 / (2 * constants.m_e) / constants.e * 1e20
    assert UNITS.kinetic_constant == pytest.approx(ref, rel=1e-12)
    assert UNITS.kinetic_constant == pytest.approx(3.8100, rel=1e-4)
    assert UNITS.kinetic_constant == pytest.approx(fixtures["kinetic_constant_eV_A2"], rel=1e-12)
    assert UNITS.time_unit_fs == pytest.approx(fixtures["time_unit_fs"], rel=1e-12)


@given(st.floats(1e-3, 1e3))
def test_energy_round_trip(e):
    assert UNITS.energy_to_ev(UNITS.energy_to_internal(e)) == pytest.approx(e, rel=1e-12)
    assert UNITS.energy(UNITS.wavenumber(e)) == pytest.approx(e, rel=1e-12)


@given(st.floats(1e-3, 1e4))
def test_time_round_trip(t):
    assert UNITS.time_to_internal(UNITS.time_to_fs(t)) == pytest.approx(t, rel=1e-12)


def test_spec_derived_quantities(fixtures):
    s = default_spec()
    assert s.k0 == pytest.approx(fixtures["k0_5eV"], rel=1e-12)
    assert s.energy == pytest.approx(5.0, rel=1e-12)
    assert s.group_velocity == 2 * s.k0
    with pytest.raises(GridError):
        WavePacketSpec(0.0, -1.0, 1.0)
    with pytest.raises(GridError):
        WavePacketSpec(0.0, 1.0, 0.0)
    with pytest.raises(GridError):
        WavePacketSpec.from_energy(-1.0, 1.0, 0.0)


def test_resolution_rule(fixtures):
    assert max_spacing(fixtures["k0_5eV"]) == pytest.approx(0.09145, abs=5e-5)
    assert max_spacing(fixtures["k0_5eV"]) ** 2 / 25 == pytest.approx(3.346e-4, rel=2e-3)
    assert max_spacing(math.pi / 30) == pytest.approx(1.0, rel=1e-15)


def test_make_grid_invariants(fixtures):
    pot = Potential(a=0.0, b=3.0, V0=10.0)
    g = make_grid(default_spec(), pot)
    assert g.dx == (g.x_max - g.x_min) / (g.n_points - 1)
    assert g.dx <= fixtures["dx_max_5eV"] * (1 + 1e-12)
    assert g.dt == g.dx**2 / 25
    x = g.x
    assert np.min(np.abs(x - 0.0)) < 1e-9 * g.dx
    assert np.min(np.abs(x - 3.0)) < 1e-9 * g.dx
    assert x[0] <= -78.0 - 6.5 * 12 and x[-1] >= 3.0
    assert g.with_dt(0.01).dt == 0.01


def test_make_grid_rejections():
    pot = Potential(a=0.0, b=3.0, V0=10.0)
    with pytest.raises(GridError):
        make_grid(default_spec(), pot, margins=4.0)
    with pytest.raises(GridError):
        make_grid(default_spec(), pot, margins=-1.0)
    with pytest.raises(GridError):
        make_grid(default_spec(), pot, max_points=1000)


def test_make_grid_holds_mirror_image():
    pot = Potential(a=0.0, b=3.0, V0=10.0)
    s = default_spec()
    g = make_grid(s, pot, t_span=80.0)
    front = s.center + s.group_velocity * 80.0
    assert g.x_max > front + 6 * s.width_at(80.0)
    assert g.x_min < -front - 6 * s.width_at(80.0)


def test_potential_sampling():
    pot = Potential(a=0.0, b=3.0, V0=10.0)
    g = make_grid(default_spec(), pot)
    v = pot.sample(g)
    v0 = UNITS.energy_to_internal(10.0)
    ia, ib = g.index(0.0), g.index(3.0)
    assert v[ia] == v[ib] == pytest.approx(0.5 * v0)
    assert np.all(v[ia + 1:ib] == v0)
    assert np.all(v[:ia] == 0) and np.all(v[ib + 1:] == 0)
    # trapezoid area equals V0 d
    assert np.trapezoid(v, dx=g.dx) == pytest.approx(v0 * 3.0, rel=1e-12)
    assert pot(np.array([-1.0, 1.0, 4.0])).tolist() == [0.0, 10.0, 0.0]
    assert np.all(Potential.free(0, 3).sample(g) == 0)
    with pytest.raises(ValueError):
        Potential(a=3.0, b=0.0)
    with pytest.raises(ValueError):
        Potential(kind="gaussian")


@settings(max_examples=20, deadline=None)
@given(sigma=st.floats(3.0, 20.0), e=st.floats(1.0, 20.0), xc=st.floats(-200.0, -50.0))
def test_packet_norm_and_centre(sigma, e, xc):
    spec = WavePacketSpec.from_energy(e, sigma, xc)
    g = make_grid(spec, Potential(a=0.0, b=2.0, V0=10.0))
    f = gaussian_packet(g, spec)
    assert f.norm() == pytest.approx(1.0, abs=1e-12)
    rho = density(f)
    mean = np.trapezoid(g.x * rho, dx=g.dx)
    assert abs(mean - xc) < g.dx
    assert abs(g.x[np.argmax(rho)] - xc) <= g.dx
    assert np.all(np.isfinite(f.psi))


def test_packet_mean_wavenumber():
    spec = default_spec()
    g = make_grid(spec, Potential(a=0.0, b=3.0, V0=10.0))
    f = gaussian_packet(g, spec)
    phi = np.fft.fft(f.psi)
    k = 2 * np.pi * np.fft.fftfreq(g.n_points, d=g.dx)
    w = np.abs(phi) ** 2
    assert np.sum(k * w) / np.sum(w) == pytest.approx(spec.k0, rel=1e-3)


def test_packet_truncation_rejected():
    spec = default_spec(center=0.0)
    g = Grid(-40.0, 40.0, 801)
    with pytest.raises(GridError):
        gaussian_packet(g, spec)


def test_density_zero_region():
    g = Grid(0.0, 10.0, 101)
    psi = np.zeros(101, dtype=complex)
    psi[50:] = 1.0
    rho = density(StateFrame(0.0, psi, g))
    assert np.all(rho[:50] == 0) and np.all(rho >= 0)


def test_current_plane_wave():
    g = Grid(0.0, 50.0, 2001)
    k0, amp = 1.1456, 0.7
    psi = amp * np.exp(1j * k0 * g.x)
    j = current(StateFrame(0.0, psi, g))
    assert np.allclose(j[2:-2], 2 * k0 * amp**2, rtol=1e-6)


def test_current_real_and_stationary():
    g = Grid(-30.0, 30.0, 601)
    real = np.exp(-g.x**2 / 20).astype(complex)
    assert np.all(current(StateFrame(0.0, real, g)) == 0)
    # k0 = 0 Gaussian with a global phase: j is antisymmetric (and ~0)
    stat = np.exp(-g.x**2 / 20) * np.exp(0.3j)
    j = current(StateFrame(0.0, stat, g))
    assert np.max(np.abs(j + j[::-1])) < 1e-8


def test_derivative_order():
    errs = []
    for n in (201, 401):
        x = np.linspace(0, 2 * np.pi, n)
        d = derivative(np.sin(x), x[1] - x[0])
        errs.append(np.max(np.abs(d - np.cos(x))))
    assert errs[0] / errs[1] > 12  # fourth order including one-sided edges


def test_continuity_between_frames():
    spec = default_spec(center=-40.0, sigma=6.0)
    pot = Potential(a=0.0, b=3.0, V0=10.0)
    g = make_grid(spec, pot, t_span=30.0)
    f0 = gaussian_packet(g, spec)
    dt = g.dt
    rec = evolve(f0, pot, PropagatorConfig(dt=dt, t_max=16.0, frame_stride=4), (0.0, 3.0))
    worst = 0.0
    for k in range(len(rec.frame_times) // 2, len(rec.frame_times) - 1, 50):
        a, b = rec.frame(k), rec.frame(k + 1)
        h = b.t - a.t
        drho = (density(b) - density(a)) / h
        jm = 0.5 * (current(a) + current(b))
        djdx = derivative(jm, g.dx)
        res = drho + djdx
        worst = max(worst, np.linalg.norm(res[4:-4]) * math.sqrt(g.dx) / np.max(np.abs(djdx)))
    assert worst < 1e-4
