"""Unitary time evolution of a 1-D wave function.

The main engine is a fourth-order Suzuki composition of symmetric
potential-kinetic-potential splits with the kinetic factor applied exactly in
Fourier space.  A Crank-Nicolson stepper with a compact fourth-order Laplacian
serves as an independent cross-check.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.fft as sfft
from scipy.linalg import lapack

from .core import Grid, Potential, StateFrame, UNITS

log = logging.getLogger(__name__)

try:  # FFTW is about twice as fast as pocketfft at these sizes
    import pyfftw
except ImportError:  # pragma: no cover - exercised only without the extra
    pyfftw = None

__all__ = [
    "SUZUKI_P",
    "PropagatorConfig",
    "EvolutionRecord",
    "NormDriftError",
    "ProductFormulaStepper",
    "CrankNicolsonStepper",
    "step",
    "reference_step",
    "evolve",
    "save_record",
    "load_record",
]

SUZUKI_P = 1.0 / (4.0 - 4.0 ** (1.0 / 3.0))
SCHEMES = ("product_formula_4", "crank_nicolson")


class NormDriftError(RuntimeError):
    pass


@dataclass(frozen=True)
class PropagatorConfig:
    dt: float
    t_max: float
    scheme: str = "product_formula_4"
    frame_stride: int = 20
    eps_stop: float = 1e-6
    hold_steps: int = 100
    t_min: float = 0.0  # stop rule is not armed before this time
    region: Optional[tuple] = None  # (a, b) for the stop rule; defaults to the potential
    edge_nodes: int = 64

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.frame_stride < 1:
            raise ValueError("frame_stride must be >= 1")
        if not 0 < self.eps_stop <= 1e-3:
            raise ValueError("eps_stop must lie in (0, 1e-3]")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")


@dataclass
class EvolutionRecord:
    """Frames every ``frame_stride`` steps plus per-step plane samples."""

    grid: Grid
    potential: Potential
    dt: float
    frame_stride: int
    frame_times: np.ndarray
    frames: np.ndarray = field(repr=False)  # (n_frames, n_points) complex
    planes: np.ndarray
    plane_index: np.ndarray
    t: np.ndarray  # per-step sample times
    j: np.ndarray = field(repr=False)  # (n_steps + 1, n_planes)
    rho: np.ndarray = field(repr=False)
    final_probabilities: dict
    converged: bool
    max_norm_deviation: float
    edge_mass_max: float
    scheme: str = "product_formula_4"

    @property
    def n_frames(self) -> int:
        return len(self.frame_times)

    @property
    def frame_interval(self) -> float:
        return self.dt * self.frame_stride

    def frame(self, i: int) -> StateFrame:
        return StateFrame(float(self.frame_times[i]), self.frames[i], self.grid)

    def plane_column(self, plane: float) -> int:
        hits = np.nonzero(np.abs(self.planes - plane) <= 1e-6 * self.grid.dx)[0]
        if len(hits) == 0:
            raise KeyError(f"plane {plane} is not registered (have {self.planes.tolist()})")
        return int(hits[0])

    @property
    def transmission(self) -> float:
        return self.final_probabilities["right"]


def _potential_array(potential, grid: Grid) -> np.ndarray:
    if isinstance(potential, Potential):
        return potential.sample(grid)
    v = np.asarray(potential, dtype=float)
    if v.shape != (grid.n_points,):
        raise ValueError("potential array does not match the grid")
    return v


def _support(v: np.ndarray):
    """Slice covering the nonzero part of ``v`` (None if v == 0)."""
    nz = np.nonzero(v)[0]
    if len(nz) == 0:
        return None
    return slice(int(nz[0]), int(nz[-1]) + 1)


class ProductFormulaStepper:
    """In-place fourth-order symmetrized product-formula step.

    U4(dt) = U2(p dt)^2 U2((1-4p) dt) U2(p dt)^2 with
    U2(h) = exp(-i V h/2) exp(-i K h) exp(-i V h/2); adjacent potential
    factors are merged.  The potential factors only touch the support of V.
    """

    def __init__(self, grid: Grid, potential, dt: float):
        n = grid.n_points
        v = _potential_array(potential, grid)
        self.dt = dt
        self.n = n
        k = 2 * np.pi * sfft.fftfreq(n, d=grid.dx)
        p = SUZUKI_P
        q = 1.0 - 4.0 * p
        scale = 1.0 / n if pyfftw is not None else 1.0
        self._kp = np.exp(-1j * k * k * p * dt) * scale
        self._kq = np.exp(-1j * k * k * q * dt) * scale
        self._kfull = np.exp(-1j * k * k * dt) * scale
        self._sl = _support(v)
        if self._sl is not None:
            vs = v[self._sl]
            self._v_half = np.exp(-0.5j * p * dt * vs)
            self._v_p = np.exp(-1j * p * dt * vs)
            self._v_pq = np.exp(-0.5j * (p + q) * dt * vs)
        if pyfftw is not None:
            self._a = pyfftw.empty_aligned(n, dtype="complex128")
            self._b = pyfftw.empty_aligned(n, dtype="complex128")
            flags = ("FFTW_ESTIMATE", "FFTW_DESTROY_INPUT")
            self._fwd = pyfftw.FFTW(self._a, self._b, flags=flags, threads=1)
            self._bwd = pyfftw.FFTW(self._b, self._a, direction="FFTW_BACKWARD",
                                    flags=flags, threads=1)
        else:
            self._a = np.empty(n, dtype=complex)

    @property
    def buffer(self) -> np.ndarray:
        """Working state; ``step`` advances it in place."""
        return self._a

    def load(self, psi: np.ndarray) -> None:
        self._a[:] = psi

    def _kinetic(self, phase: np.ndarray) -> None:
        if pyfftw is not None:
            self._fwd.execute()
            np.multiply(self._b, phase, out=self._b)
            self._bwd.execute()
        else:
            b = sfft.fft(self._a)
            b *= phase
            self._a[:] = sfft.ifft(b)

    def step(self) -> None:
        sl = self._sl
        a = self._a
        if sl is None:
            self._kinetic(self._kfull)
            return
        a[sl] *= self._v_half
        self._kinetic(self._kp)
        a[sl] *= self._v_p
        self._kinetic(self._kp)
        a[sl] *= self._v_pq
        self._kinetic(self._kq)
        a[sl] *= self._v_pq
        self._kinetic(self._kp)
        a[sl] *= self._v_p
        self._kinetic(self._kp)
        a[sl] *= self._v_half


class CrankNicolsonStepper:
    """Crank-Nicolson with the compact (Numerov) fourth-order Laplacian.

    Multiplying (1 + i dt H/2) psi' = (1 - i dt H/2) psi by the Pade matrix
    A = tridiag(1, 10, 1)/12 keeps both sides tridiagonal.  Dirichlet ends.
    """

    def __init__(self, grid: Grid, potential, dt: float):
        v = _potential_array(potential, grid)
        n = grid.n_points
        h2 = grid.dx**2
        c = 0.5j * dt
        a_off, a_diag = 1.0 / 12.0, 10.0 / 12.0
        b_off, b_diag = 1.0 / h2, -2.0 / h2
        # (A V) has A's pattern with columns scaled by V
        self._l_lo = (a_off - c * b_off + c * a_off * v[:-1]).astype(complex)
        self._l_di = (a_diag - c * b_diag + c * a_diag * v).astype(complex)
        self._l_up = (a_off - c * b_off + c * a_off * v[1:]).astype(complex)
        self._r_lo = (a_off + c * b_off - c * a_off * v[:-1]).astype(complex)
        self._r_di = (a_diag + c * b_diag - c * a_diag * v).astype(complex)
        self._r_up = (a_off + c * b_off - c * a_off * v[1:]).astype(complex)
        dl, d, du, du2, ipiv, info = lapack.zgttrf(self._l_lo, self._l_di, self._l_up)
        assert info == 0, "singular Crank-Nicolson matrix"
        self._lu = (dl, d, du, du2, ipiv)
        self._a = np.empty(n, dtype=complex)
        self.dt = dt

    @property
    def buffer(self) -> np.ndarray:
        return self._a

    def load(self, psi: np.ndarray) -> None:
        self._a[:] = psi

    def step(self) -> None:
        a = self._a
        rhs = self._r_di * a
        rhs[:-1] += self._r_up * a[1:]
        rhs[1:] += self._r_lo * a[:-1]
        x, info = lapack.zgttrs(*self._lu, rhs)
        assert info == 0
        a[:] = x


def _stepper(scheme: str, grid: Grid, potential, dt: float):
    if scheme == "product_formula_4":
        return ProductFormulaStepper(grid, potential, dt)
    if scheme == "crank_nicolson":
        return CrankNicolsonStepper(grid, potential, dt)
    raise ValueError(f"unknown scheme {scheme!r}")


def _advance(frame: StateFrame, potential, dt: float, scheme: str) -> StateFrame:
    s = _stepper(scheme, frame.grid, potential, dt)
    s.load(frame.psi)
    n0 = frame.norm()
    s.step()
    out = StateFrame(frame.t + dt, s.buffer.copy(), frame.grid)
    drift = abs(out.norm() - n0)
    if not drift <= 1e-6:  # also catches NaN
        raise NormDriftError(f"norm drifted by {drift:.3e} in one step")
    return out


def step(frame: StateFrame, potential, dt: float) -> StateFrame:
    """One fourth-order product-formula step (pure)."""
    return _advance(frame, potential, dt, "product_formula_4")


def reference_step(frame: StateFrame, potential, dt: float) -> StateFrame:
    """One Crank-Nicolson step (pure)."""
    return _advance(frame, potential, dt, "crank_nicolson")


def _stencils(grid: Grid, planes: Sequence[float]) -> np.ndarray:
    idx = np.array([grid.index(p) for p in planes], dtype=int)
    if np.any(idx < 2) or np.any(idx > grid.n_points - 3):
        raise ValueError("measurement planes must lie in the grid interior")
    return idx


def _plane_samples(psi: np.ndarray, idx: np.ndarray, dx: float):
    c = psi[idx]
    d = (psi[idx - 2] - 8 * psi[idx - 1] + 8 * psi[idx + 1] - psi[idx + 2]) / (12 * dx)
    j = 2.0 * (c.real * d.imag - c.imag * d.real)
    rho = c.real**2 + c.imag**2
    return j, rho


def _region_masses(psi: np.ndarray, grid: Grid, a: float, b: float) -> dict:
    """Masses left of a, inside [a, b] and right of b (trapezoid, edges split)."""
    rho = psi.real**2 + psi.imag**2
    ia, ib = grid.index(a), grid.index(b)
    dx = grid.dx
    cum = np.concatenate(([0.0], np.cumsum(0.5 * (rho[1:] + rho[:-1]) * dx)))
    return {"left": float(cum[ia]), "inside": float(cum[ib] - cum[ia]),
            "right": float(cum[-1] - cum[ib])}


def evolve(initial: StateFrame, potential: Potential, config: PropagatorConfig,
           planes: Sequence[float]) -> EvolutionRecord:
    """Step from ``initial`` until the stop rule holds or ``t_max`` is reached.

    Stop rule: after ``t_min``, mass inside [a, b] < eps_stop and
    |j| < eps_stop / t_max at every plane for ``hold_steps`` consecutive steps.
    """
    grid = initial.grid
    dx = grid.dx
    dt = config.dt
    planes = np.asarray(sorted(planes), dtype=float)
    idx = _stencils(grid, planes)
    a, b = config.region if config.region is not None else (potential.a, potential.b)
    ia, ib = grid.index(a), grid.index(b)
    stepper = _stepper(config.scheme, grid, potential, dt)
    stepper.load(initial.psi)
    psi = stepper.buffer

    n_max = int(math.ceil(config.t_max / dt))
    t_arr = np.empty(n_max + 1)
    j_arr = np.empty((n_max + 1, len(planes)))
    r_arr = np.empty((n_max + 1, len(planes)))
    frames = [initial.psi.copy()]
    frame_t = [initial.t]
    j0, r0 = _plane_samples(psi, idx, dx)
    t_arr[0], j_arr[0], r_arr[0] = initial.t, j0, r0

    norm0 = float(np.vdot(psi, psi).real) * dx
    last_norm = norm0
    max_dev = 0.0
    j_tol = config.eps_stop / config.t_max
    quiet = 0
    converged = False
    en = config.edge_nodes
    edge_max = 0.0
    n = 0
    while n < n_max:
        stepper.step()
        n += 1
        t = initial.t + n * dt
        jn, rn = _plane_samples(psi, idx, dx)
        t_arr[n], j_arr[n], r_arr[n] = t, jn, rn
        nrm = float(np.vdot(psi, psi).real) * dx
        if abs(nrm - last_norm) > 1e-6 or not math.isfinite(nrm):
            raise NormDriftError(f"norm drifted by {abs(nrm - last_norm):.3e} at t = {t:.4f}")
        last_norm = nrm
        max_dev = max(max_dev, abs(nrm - 1.0))
        if n % config.frame_stride == 0:
            frames.append(psi.copy())
            frame_t.append(t)
            edge = dx * float(np.vdot(psi[:en], psi[:en]).real + np.vdot(psi[-en:], psi[-en:]).real)
            edge_max = max(edge_max, edge)
        if t >= config.t_min:
            seg = psi[ia:ib + 1]
            inside = dx * float(np.vdot(seg, seg).real)
            if inside < config.eps_stop and np.all(np.abs(jn) < j_tol):
                quiet += 1
            else:
                quiet = 0
            if quiet >= config.hold_steps:
                converged = True
                break
    if n % config.frame_stride != 0:
        # the last frame may fall off the stride grid; trajectories need it
        frames.append(psi.copy())
        frame_t.append(initial.t + n * dt)
    if not converged:
        log.warning("evolution reached t_max = %.3f without meeting the stop rule", config.t_max)
    return EvolutionRecord(
        grid=grid, potential=potential, dt=dt, frame_stride=config.frame_stride,
        frame_times=np.asarray(frame_t), frames=np.stack(frames),
        planes=planes, plane_index=idx,
        t=t_arr[:n + 1].copy(), j=j_arr[:n + 1].copy(), rho=r_arr[:n + 1].copy(),
        final_probabilities=_region_masses(psi, grid, a, b),
        converged=converged, max_norm_deviation=max_dev, edge_mass_max=edge_max,
        scheme=config.scheme,
    )


# Binary dump: magic, then a header of little-endian float64 values
# [x_min, x_max, n_points, dt, frame_stride, n_frames, n_planes, n_samples,
#  V0, a, b, converged], then plane positions, frame times, frames as
# interleaved (re, im) row-major, then samples (t, j..., rho...) row-major.
_MAGIC = b"TTREC001"


def save_record(record: EvolutionRecord, path) -> None:
    g = record.grid
    header = [g.x_min, g.x_max, g.n_points, record.dt, record.frame_stride,
              record.n_frames, len(record.planes), len(record.t),
              record.potential.height, record.potential.a, record.potential.b,
              float(record.converged)]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<%dd" % len(header), *header))
        fh.write(record.planes.astype("<f8").tobytes())
        fh.write(record.frame_times.astype("<f8").tobytes())
        fh.write(record.frames.astype("<c16").tobytes())
        samples = np.column_stack([record.t, record.j, record.rho])
        fh.write(samples.astype("<f8").tobytes())


def load_record(path) -> dict:
    """Read a dump back as plain arrays (debugging aid, no stability promise)."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError("not a record dump")
    off = 8
    h = struct.unpack_from("<12d", raw, off)
    off += 12 * 8
    n_points, n_frames, n_planes, n_samples = int(h[2]), int(h[5]), int(h[6]), int(h[7])

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    planes = take(n_planes, "<f8")
    frame_times = take(n_frames, "<f8")
    frames = take(n_frames * n_points, "<c16").reshape(n_frames, n_points)
    samples = take(n_samples * (1 + 2 * n_planes), "<f8").reshape(n_samples, -1)
    return {
        "x_min": h[0], "x_max": h[1], "n_points": n_points, "dt": h[3],
        "frame_stride": int(h[4]), "V0": h[8], "a": h[9], "b": h[10],
        "converged": bool(h[11]), "planes": planes, "frame_times": frame_times,
        "frames": frames, "t": samples[:, 0], "j": samples[:, 1:1 + n_planes],
        "rho": samples[:, 1 + n_planes:],
    }
