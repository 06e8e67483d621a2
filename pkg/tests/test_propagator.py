import math

import numpy as np
import pytest

from tunneltimes.core import (
    UNITS, Grid, Potential, StateFrame, WavePacketSpec, density, gaussian_packet, make_grid,
)
from tunneltimes.harness import SweepConfig, prepare
from tunneltimes.propagator import (
    SUZUKI_P, CrankNicolsonStepper, NormDriftError, ProductFormulaStepper, PropagatorConfig,
    evolve, load_record, reference_step, save_record, step,
)


def l2(u, v, dx):
    return math.sqrt(dx * float(np.sum(np.abs(u - v) ** 2)))


def small_case(sigma=6.0, center=-40.0):
    spec = WavePacketSpec.from_energy(5.0, sigma, center)
    pot = Potential(a=0.0, b=3.0, V0=10.0)
    g = make_grid(spec, pot, t_span=30.0)
    return spec, pot, g, gaussian_packet(g, spec)


def test_suzuki_weight(fixtures):
    assert SUZUKI_P == pytest.approx(fixtures["suzuki_p"], rel=1e-14)
    assert 4 * SUZUKI_P + (1 - 4 * SUZUKI_P) == pytest.approx(1.0)


def test_free_step_preserves_norm():
    spec, pot, g, f0 = small_case()
    f = f0
    for _ in range(20):
        f = step(f, Potential.free(0, 3), 0.05)
    assert abs(f.norm() - f0.norm()) < 1e-12
    assert f.t == pytest.approx(1.0)


def test_constant_potential_is_a_phase():
    spec, pot, g, f0 = small_case()
    c, dt = 0.37, 0.02
    free = step(f0, np.zeros(g.n_points), dt)
    shifted = step(f0, np.full(g.n_points, c), dt)
    assert l2(shifted.psi, free.psi * np.exp(-1j * c * dt), g.dx) < 1e-10


def test_free_spreading_law():
    spec = WavePacketSpec.from_energy(5.0, 6.0, -100.0)
    g = make_grid(spec, Potential.free(0, 0), t_span=60.0)
    f0 = gaussian_packet(g, spec)
    s = ProductFormulaStepper(g, Potential.free(0, 0), 5.0)
    s.load(f0.psi)
    for n in range(1, 13):
        s.step()
        rho = np.abs(s.buffer) ** 2
        rho /= rho.sum()
        m = np.sum(g.x * rho)
        width = math.sqrt(np.sum((g.x - m) ** 2 * rho))
        assert width == pytest.approx(spec.width_at(5.0 * n), rel=1e-6)
        assert m == pytest.approx(spec.center + spec.group_velocity * 5.0 * n, abs=1e-6)


def free_gaussian(x, t, xc, sigma, k0):
    c = 1.0 + 1j * t / sigma**2
    y = x - xc - 2 * k0 * t
    return ((2 * math.pi * sigma**2) ** -0.25 / np.sqrt(c)
            * np.exp(-y * y / (4 * sigma**2 * c) + 1j * k0 * (x - xc) - 1j * k0 * k0 * t))


def test_product_formula_matches_exact_free_packet():
    spec = WavePacketSpec.from_energy(5.0, 6.0, -60.0)
    g = Grid(-200.0, 200.0, 4001)  # wide margins: amplitude tails below 1e-30
    f = gaussian_packet(g, spec)
    for _ in range(6):
        f = step(f, Potential.free(0, 0), 5.0)
    exact = free_gaussian(g.x, 30.0, spec.center, spec.sigma, spec.k0)
    assert l2(f.psi, exact, g.dx) < 1e-9


def test_crank_nicolson_agrees_with_product_formula():
    spec, pot, g, f0 = small_case()
    dt = g.dt
    pf, cn = ProductFormulaStepper(g, pot, dt), CrankNicolsonStepper(g, pot, dt)
    pf.load(f0.psi)
    cn.load(f0.psi)
    for _ in range(int(round(18.0 / dt))):  # packet centre on the barrier
        pf.step()
        cn.step()
    assert l2(pf.buffer, cn.buffer, g.dx) < 1e-4


def test_crank_nicolson_transmission_at_default_point():
    cfg = SweepConfig(dt_scale=8.0)
    s = prepare(cfg)
    f0 = gaussian_packet(s.grid, s.spec)
    pf = evolve(f0, s.potential, s.propagator, s.planes)
    cfg_cn = PropagatorConfig(**{**s.propagator.__dict__, "scheme": "crank_nicolson"})
    cn = evolve(f0, s.potential, cfg_cn, s.planes)
    assert abs(pf.transmission - cn.transmission) < 1e-3
    assert pf.transmission == pytest.approx(cn.transmission, rel=1e-2)


def test_pure_step_functions():
    spec, pot, g, f0 = small_case()
    before = f0.psi.copy()
    a = step(f0, pot, 0.01)
    b = reference_step(f0, pot, 0.01)
    assert np.array_equal(f0.psi, before)
    assert l2(a.psi, b.psi, g.dx) < 1e-5
    assert abs(b.norm() - 1) < 1e-12


def test_step_raises_on_norm_drift():
    spec, pot, g, f0 = small_case()
    bad = np.zeros(g.n_points)
    bad[100] = np.nan
    with pytest.raises(NormDriftError):
        step(f0, bad, 0.01)


def test_config_validation():
    with pytest.raises(ValueError):
        PropagatorConfig(dt=0.0, t_max=1.0)
    with pytest.raises(ValueError):
        PropagatorConfig(dt=0.1, t_max=1.0, scheme="euler")
    with pytest.raises(ValueError):
        PropagatorConfig(dt=0.1, t_max=1.0, eps_stop=0.1)
    with pytest.raises(ValueError):
        PropagatorConfig(dt=0.1, t_max=1.0, frame_stride=0)


def test_evolve_record_layout(free_run):
    spec, f0, rec = free_run
    assert rec.converged
    assert np.all(np.diff(rec.frame_times) > 0)
    assert np.array_equal(rec.frames[0], f0.psi)
    assert len(rec.t) == rec.j.shape[0] == rec.rho.shape[0]
    assert np.allclose(np.diff(rec.t), rec.dt)
    assert rec.max_norm_deviation < 1e-10
    p = rec.final_probabilities
    assert sum(p.values()) == pytest.approx(1.0, abs=1e-10)
    assert p["right"] == pytest.approx(1.0, abs=1e-6)
    assert p["inside"] < 1e-6
    with pytest.raises(KeyError):
        rec.plane_column(1.5)


def test_evolve_rejects_planes_outside_grid():
    spec, pot, g, f0 = small_case()
    with pytest.raises(ValueError):
        evolve(f0, pot, PropagatorConfig(dt=0.01, t_max=0.1), (0.0, g.x_max + 1.0))


def test_unconverged_run_is_reported():
    spec, pot, g, f0 = small_case()
    rec = evolve(f0, pot, PropagatorConfig(dt=0.05, t_max=2.0), (0.0, 3.0))
    assert not rec.converged
    assert rec.t[-1] == pytest.approx(2.0)


def test_record_dump_round_trip(tmp_path, free_run):
    spec, f0, rec = free_run
    path = tmp_path / "rec.bin"
    save_record(rec, path)
    back = load_record(path)
    assert np.array_equal(back["frames"], rec.frames)
    assert np.array_equal(back["j"], rec.j)
    assert np.array_equal(back["rho"], rec.rho)
    assert np.array_equal(back["frame_times"], rec.frame_times)
    assert back["n_points"] == rec.grid.n_points
    assert back["converged"] == rec.converged
    with pytest.raises(ValueError):
        (tmp_path / "junk").write_bytes(b"nope" * 10)
        load_record(tmp_path / "junk")
