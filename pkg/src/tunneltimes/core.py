"""Units, grids, initial states, potentials and pointwise observables.

Internally the Schrodinger equation is solved with hbar = 1 and 2m = 1, lengths
in angstrom.  In these units it reads ``i dpsi/dt = (-d2/dx2 + V) psi``, the
energy unit is hbar^2/(2 m_e A^2) (about 3.81 eV) and the time unit is
hbar / (that energy) (about 0.173 fs).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import constants, special
from scipy.fft import next_fast_len

__all__ = [
    "UnitSystem",
    "UNITS",
    "Grid",
    "WavePacketSpec",
    "Potential",
    "StateFrame",
    "make_grid",
    "gaussian_packet",
    "density",
    "current",
    "derivative",
    "GridError",
]

DEFAULT_MAX_POINTS = 1 << 20


class GridError(ValueError):
    """Raised for invalid grid or packet geometry."""


@dataclass(frozen=True)
class UnitSystem:
    """Electron in a 1-D box measured in angstrom and eV.

    ``kinetic_constant`` is hbar^2/(2 m_e) in eV*A^2.  Energies divide by it to
    become internal; internal times multiply by ``time_unit_fs``.
    """

    kinetic_constant: float = (
        constants.hbar**2 / (2.0 * constants.m_e) / constants.e * 1e20
    )
    hbar_ev_fs: float = constants.hbar / constants.e * 1e15
    length_unit: str = "angstrom"
    energy_unit: str = "eV"
    convention: str = "hbar=1, 2m=1"

    @property
    def time_unit_fs(self) -> float:
        return self.hbar_ev_fs / self.kinetic_constant

    def energy_to_internal(self, e_ev):
        return e_ev / self.kinetic_constant

    def energy_to_ev(self, e_int):
        return e_int * self.kinetic_constant

    def time_to_fs(self, t_int):
        return t_int * self.time_unit_fs

    def time_to_internal(self, t_fs):
        return t_fs / self.time_unit_fs

    def wavenumber(self, e_ev: float) -> float:
        """k0 in 1/A for a free electron of kinetic energy ``e_ev``."""
        return math.sqrt(e_ev / self.kinetic_constant)

    def energy(self, k: float) -> float:
        return self.kinetic_constant * k * k

    def velocity_to_si(self, v_int):
        """Internal velocity (A per internal time) to metres per second."""
        return v_int * 1e-10 / (self.time_unit_fs * 1e-15)


UNITS = UnitSystem()


@dataclass(frozen=True)
class WavePacketSpec:
    """Gaussian packet; ``sigma`` is the standard deviation of |psi|^2."""

    center: float
    sigma: float
    k0: float

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise GridError(f"sigma must be positive, got {self.sigma}")
        if not (self.k0 > 0 and math.isfinite(self.k0)):
            raise GridError(f"k0 must be positive, got {self.k0}")

    @classmethod
    def from_energy(cls, energy_ev: float, sigma: float, center: float,
                    units: UnitSystem = UNITS) -> "WavePacketSpec":
        if energy_ev <= 0:
            raise GridError(f"energy must be positive, got {energy_ev}")
        return cls(center=center, sigma=sigma, k0=units.wavenumber(energy_ev))

    @property
    def group_velocity(self) -> float:
        return 2.0 * self.k0

    @property
    def energy(self) -> float:
        """Mean-wavenumber energy in eV."""
        return UNITS.energy(self.k0)

    @property
    def sigma_k(self) -> float:
        return 0.5 / self.sigma

    def width_at(self, t):
        """Free-evolution position width sigma(t) in internal time.

        With hbar = 1 and m = 1/2 the velocity spread is 1/sigma, so
        sigma(t)^2 = sigma^2 + (t/sigma)^2.
        """
        return self.sigma * np.sqrt(1.0 + (t / self.sigma**2) ** 2)


@dataclass(frozen=True)
class Potential:
    """Square barrier of height ``V0`` (eV) on [a, b], or a free region.

    A free potential still carries ``a`` and ``b``; they mark the region used
    for measurement planes and dwell integrals.
    """

    kind: str = "square_barrier"
    a: float = 0.0
    b: float = 3.0
    V0: float = 10.0

    def __post_init__(self):
        if self.kind not in ("square_barrier", "free"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "square_barrier" and not self.a < self.b:
            raise ValueError("square barrier needs a < b")
        if self.kind == "free" and self.a > self.b:
            raise ValueError("free region needs a <= b")

    @classmethod
    def free(cls, a: float = 0.0, b: float = 0.0) -> "Potential":
        return cls(kind="free", a=a, b=b, V0=0.0)

    @property
    def width(self) -> float:
        return self.b - self.a

    @property
    def height(self) -> float:
        return self.V0 if self.kind == "square_barrier" else 0.0

    def __call__(self, x):
        """V(x) in eV, continuum definition."""
        x = np.asarray(x, dtype=float)
        if self.kind == "free":
            return np.zeros_like(x)
        return np.where((x >= self.a) & (x <= self.b), self.V0, 0.0)

    def sample(self, grid: "Grid", units: UnitSystem = UNITS) -> np.ndarray:
        """Internal-unit potential on grid nodes.

        Nodes that coincide with a barrier edge get V0/2, so the discrete
        barrier area equals V0*(b - a) under the trapezoid rule.
        """
        x = grid.x
        if self.kind == "free":
            return np.zeros_like(x)
        tol = 1e-6 * grid.dx
        v = np.where((x > self.a + tol) & (x < self.b - tol), 1.0, 0.0)
        v[np.abs(x - self.a) <= tol] = 0.5
        v[np.abs(x - self.b) <= tol] = 0.5
        return v * units.energy_to_internal(self.V0)


@dataclass(frozen=True)
class Grid:
    x_min: float
    x_max: float
    n_points: int
    dt_override: Optional[float] = None

    def __post_init__(self):
        if self.n_points < 8 or not self.x_max > self.x_min:
            raise GridError("degenerate grid")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_points - 1)

    @property
    def dt(self) -> float:
        """Default time step dx^2/25 in internal units."""
        if self.dt_override is not None:
            return self.dt_override
        return self.dx**2 / 25.0

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n_points)

    def index(self, x0: float) -> int:
        """Index of the node nearest ``x0``."""
        i = int(round((x0 - self.x_min) / self.dx))
        if not 0 <= i < self.n_points:
            raise GridError(f"x = {x0} lies outside the grid")
        return i

    def with_dt(self, dt: float) -> "Grid":
        return Grid(self.x_min, self.x_max, self.n_points, dt)


@dataclass(frozen=True)
class StateFrame:
    t: float
    psi: np.ndarray = field(repr=False)
    grid: Grid

    def norm(self) -> float:
        return float(np.trapezoid(np.abs(self.psi) ** 2, dx=self.grid.dx))


def max_spacing(k0: float) -> float:
    """Largest admissible node spacing, pi/(30 k0)."""
    return math.pi / (30.0 * k0)


def make_grid(spec: WavePacketSpec, potential: Potential, margins: float = 6.5,
              t_span: Optional[float] = None, planes=(),
              max_points: int = DEFAULT_MAX_POINTS) -> Grid:
    """Build a grid resolving ``spec`` with barrier edges on nodes.

    ``margins`` is in units of sigma.  When ``t_span`` is given the domain also
    holds the freely moving packet and its mirror image about ``a`` (the
    reflected part) up to that time, so a periodic propagator never wraps.
    """
    if not margins > 0:
        raise GridError("margins must be positive")
    if margins < 5:
        raise GridError("margins below 5 sigma truncate the packet")
    dx_max = max_spacing(spec.k0)
    d = potential.width
    if d > 0:
        m = math.ceil(d / dx_max - 1e-9)
        dx = d / m
    else:
        dx = dx_max
    a, b = potential.a, potential.b
    lo = min(spec.center - margins * spec.sigma, a, *planes)
    hi = max(spec.center + margins * spec.sigma, b, *planes)
    if t_span is not None and t_span > 0:
        w = float(spec.width_at(t_span))
        front = spec.center + spec.group_velocity * t_span
        hi = max(hi, front + d + margins * w)
        if potential.kind == "square_barrier":
            lo = min(lo, 2 * a - front - margins * w)
    # a few extra nodes keep the five-point stencils off the edges
    i_a = math.ceil((a - lo) / dx) + 4
    n = i_a + math.ceil((hi - a) / dx) + 5
    n = next_fast_len(n)
    if n > max_points:
        raise GridError(f"grid needs {n} points, cap is {max_points}")
    x_min = a - i_a * dx
    return Grid(x_min, x_min + (n - 1) * dx, n)


def gaussian_packet(grid: Grid, spec: WavePacketSpec, t: float = 0.0,
                    truncation_tol: float = 1e-10) -> StateFrame:
    """Normalised Gaussian exp(-(x-xc)^2/(4 sigma^2) + i k0 (x-xc))."""
    s = spec.sigma
    z_lo = (spec.center - grid.x_min) / (math.sqrt(2) * s)
    z_hi = (grid.x_max - spec.center) / (math.sqrt(2) * s)
    lost = 0.5 * (special.erfc(z_lo) + special.erfc(z_hi))
    if lost > truncation_tol:
        raise GridError(f"packet mass {lost:.2e} falls outside the grid")
    x = grid.x - spec.center
    psi = np.exp(-(x**2) / (4 * s * s) + 1j * spec.k0 * x)
    psi /= math.sqrt(np.trapezoid(np.abs(psi) ** 2, dx=grid.dx))
    return StateFrame(t, psi, grid)


def density(frame: StateFrame) -> np.ndarray:
    return frame.psi.real**2 + frame.psi.imag**2


def derivative(f: np.ndarray, dx: float) -> np.ndarray:
    """Fourth-order central first derivative, one-sided at the two edges."""
    f = np.asarray(f)
    out = np.empty_like(f)
    out[2:-2] = (f[:-4] - 8 * f[1:-3] + 8 * f[3:-1] - f[4:]) / (12 * dx)
    out[0] = (-25 * f[0] + 48 * f[1] - 36 * f[2] + 16 * f[3] - 3 * f[4]) / (12 * dx)
    out[1] = (-3 * f[0] - 10 * f[1] + 18 * f[2] - 6 * f[3] + f[4]) / (12 * dx)
    out[-1] = (25 * f[-1] - 48 * f[-2] + 36 * f[-3] - 16 * f[-4] + 3 * f[-5]) / (12 * dx)
    out[-2] = (3 * f[-1] + 10 * f[-2] - 18 * f[-3] + 6 * f[-4] - f[-5]) / (12 * dx)
    return out


def current(frame: StateFrame) -> np.ndarray:
    """Probability current j = 2 Im(psi* dpsi/dx) in internal units."""
    dpsi = derivative(frame.psi, frame.grid.dx)
    return 2.0 * (frame.psi.real * dpsi.imag - frame.psi.imag * dpsi.real)
