"""Bohmian trajectories, crossing times and ensemble-averaged barrier times.

Trajectories follow v = j / |psi|^2 through stored frames.  psi and dpsi/dx
are interpolated with four-point Lagrange cubics in x; j and |psi|^2 are then
blended linearly in time between the bracketing frames.  Ensemble averages
are weighted sums over initial positions; in quantile mode each sample carries
the probability mass of its CDF cell.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .core import StateFrame, derivative
from .flux_times import gated_flux_moments
from .propagator import EvolutionRecord

log = logging.getLogger(__name__)

__all__ = [
    "TRANSMITTED", "REFLECTED", "UNDECIDED", "LOST",
    "VelocityField",
    "Trajectory",
    "TrajectoryEnsemble",
    "BohmReport",
    "IdentityResiduals",
    "initial_cdf",
    "quantile_positions",
    "sample_initial_positions",
    "integrate_ensemble",
    "integrate_trajectory",
    "refine_transmitted",
    "bohm_report",
    "identity_residuals",
    "write_trajectories_csv",
]

TRANSMITTED, REFLECTED, UNDECIDED, LOST = 1, 0, -1, -2
_LABELS = {TRANSMITTED: "transmitted", REFLECTED: "reflected",
           UNDECIDED: "undecided", LOST: "lost"}
DEFAULT_MAX_SAMPLES = 1_000_000


class VelocityField:
    """Velocity field of a stored evolution.

    ``v_max`` optionally caps |v| where the density nearly vanishes; every
    capped evaluation is counted in ``capped``.  The default is no cap: a cap
    limits the flux a trajectory can carry through a deep interference
    minimum to v_max * rho, which starves the barrier of entering
    trajectories.  Near-node spikes are instead resolved by the adaptive step
    control of the integrator.
    """

    def __init__(self, record: EvolutionRecord, eps_rho: float = 1e-30,
                 v_max: float = math.inf):
        self.record = record
        self.eps_rho = eps_rho
        self.v_max = v_max
        self.capped = 0
        self.steps = 0
        self.forced = 0
        g = record.grid
        self._x_min, self._dx, self._n = g.x_min, g.dx, g.n_points
        self._cache: dict = {}
        self._pair_key: Optional[int] = None
        self._pair_val: Optional[np.ndarray] = None

    @property
    def times(self) -> np.ndarray:
        return self.record.frame_times

    def _frame(self, k: int) -> np.ndarray:
        """Re/Im of psi and dpsi/dx for frame k, shape (n_points, 4)."""
        hit = self._cache.get(k)
        if hit is None:
            psi = self.record.frames[k]
            dpsi = derivative(psi, self._dx)
            hit = np.stack([psi.real, psi.imag, dpsi.real, dpsi.imag], axis=1)
            if len(self._cache) >= 4:
                self._cache.pop(next(iter(self._cache)))
            self._cache[k] = hit
        return hit

    def _pair(self, k: int) -> np.ndarray:
        if self._pair_key != k:
            self._pair_val = np.concatenate([self._frame(k), self._frame(k + 1)], axis=1)
            self._pair_key = k
        return self._pair_val

    def _stencil(self, x: np.ndarray):
        u = (x - self._x_min) / self._dx
        i = np.floor(u).astype(np.int64)
        s = u - i
        w = np.stack([
            -s * (s - 1) * (s - 2) / 6,
            (s + 1) * (s - 1) * (s - 2) / 2,
            -(s + 1) * s * (s - 2) / 2,
            (s + 1) * s * (s - 1) / 6,
        ], axis=-1)
        cols = i[:, None] + np.arange(-1, 3)
        return cols, w

    @staticmethod
    def _jr(c):
        pr, pi, dr, di = c[:, 0], c[:, 1], c[:, 2], c[:, 3]
        return 2.0 * (pr * di - pi * dr), pr * pr + pi * pi

    def current_density(self, k: int, x: np.ndarray):
        """Interpolated (j, rho) of frame ``k`` at positions ``x``."""
        cols, w = self._stencil(x)
        c = np.einsum("ijk,ij->ik", self._frame(k)[cols], w)
        return self._jr(c)

    def _velocity(self, j, rho):
        v = j / np.maximum(rho, self.eps_rho)
        over = np.abs(v) > self.v_max
        if over.any():
            self.capped += int(over.sum())
            v = np.clip(v, -self.v_max, self.v_max)
        return v

    def velocity(self, k: int, s, x: np.ndarray) -> np.ndarray:
        """v at time t_k + s (t_{k+1} - t_k), 0 <= s <= 1 (scalar or per point)."""
        if np.isscalar(s):
            if s == 0.0:
                return self._velocity(*self.current_density(k, x))
            if s == 1.0:
                return self._velocity(*self.current_density(k + 1, x))
        cols, w = self._stencil(x)
        c = np.einsum("ijk,ij->ik", self._pair(k)[cols], w)
        j0, r0 = self._jr(c[:, :4])
        j1, r1 = self._jr(c[:, 4:])
        return self._velocity((1 - s) * j0 + s * j1, (1 - s) * r0 + s * r1)

    @property
    def bounds(self):
        """Interval on which the four-point stencil stays on the grid."""
        return self._x_min + 2 * self._dx, self._x_min + (self._n - 4) * self._dx

    def inside(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds
        return (x >= lo) & (x <= hi)


# -- initial positions -------------------------------------------------------

def initial_cdf(frame: StateFrame):
    """Node positions with cumulative and survival probabilities of |psi|^2."""
    rho = np.abs(frame.psi) ** 2
    x = frame.grid.x
    cells = 0.5 * (rho[1:] + rho[:-1]) * frame.grid.dx
    total = cells.sum()
    cdf = np.concatenate(([0.0], np.cumsum(cells))) / total
    sf = np.concatenate((np.cumsum(cells[::-1])[::-1], [0.0])) / total
    return x, cdf, sf


def _invert(x, cdf, sf, levels):
    levels = np.asarray(levels, dtype=float)
    out = np.empty_like(levels)
    lo = levels <= 0.5
    # strictly monotone pieces only; flat tails carry no mass
    keep = np.concatenate(([True], np.diff(cdf) > 0))
    out[lo] = np.interp(levels[lo], cdf[keep], x[keep])
    keep = np.concatenate((np.diff(sf) < 0, [True]))
    xs, ss = x[keep][::-1], sf[keep][::-1]
    out[~lo] = np.interp(1.0 - levels[~lo], ss, xs)
    return out


def quantile_positions(frame: StateFrame, levels) -> np.ndarray:
    """Positions at which the initial CDF reaches ``levels``."""
    return _invert(*initial_cdf(frame), levels)


def sample_initial_positions(initial: StateFrame, n: int, mode: str = "quantile",
                             seed: Optional[int] = None,
                             max_samples: int = DEFAULT_MAX_SAMPLES) -> np.ndarray:
    """Initial positions distributed as |psi(x, 0)|^2, sorted ascending.

    ``quantile`` places sample i at CDF level (i + 0.5)/n; ``pseudorandom``
    draws i.i.d. levels from ``numpy.random.default_rng(seed)``.
    """
    if n < 100:
        raise ValueError("need at least 100 samples")
    if n > max_samples:
        raise ValueError(f"{n} samples exceed the cap of {max_samples}")
    if mode == "quantile":
        levels = (np.arange(n) + 0.5) / n
    elif mode == "pseudorandom":
        if seed is None:
            raise ValueError("pseudorandom mode needs an explicit seed")
        levels = np.sort(np.random.default_rng(seed).random(n))
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return quantile_positions(initial, levels)


# -- trajectories --------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    x0: float
    t: np.ndarray = field(repr=False)
    x: np.ndarray = field(repr=False)
    crossings: tuple  # (plane, time, direction)
    classification: str

    @property
    def theta_T(self) -> int:
        return int(self.classification == "transmitted")

    @property
    def theta_R(self) -> int:
        return int(self.classification == "reflected")


@dataclass
class TrajectoryEnsemble:
    """Trajectories stored column-wise, sorted by initial position."""

    x0: np.ndarray
    levels: Optional[np.ndarray]  # CDF level of each x0 (None if unknown)
    weights: np.ndarray
    t: np.ndarray
    paths: np.ndarray = field(repr=False)  # (n_times, n)
    status: np.ndarray
    a: float
    b: float
    capped: int = 0
    refined: int = 0  # samples added by refine_transmitted

    def __len__(self) -> int:
        return len(self.x0)

    def crossings(self, plane: float):
        """Crossing tables for ``plane``.

        Returns (rows, cols, times, directions): trajectory ``cols[i]``
        crosses between stored steps ``rows[i]`` and ``rows[i] + 1``.
        """
        p = self.paths
        x0, x1 = p[:-1], p[1:]
        up = (x0 < plane) & (x1 >= plane)
        down = (x0 >= plane) & (x1 < plane)
        rows, cols = np.nonzero(up | down)
        xa, xb = x0[rows, cols], x1[rows, cols]
        ta, tb = self.t[rows], self.t[rows + 1]
        times = ta + (plane - xa) / (xb - xa) * (tb - ta)
        dirs = np.where(up[rows, cols], 1, -1)
        return rows, cols, times, dirs

    def crossing_times(self, plane: float):
        """Per-trajectory crossing summaries at ``plane``.

        ``sum_plus``/``sum_minus`` add all crossing times in one direction (zero
        when there is none); ``first_plus`` and ``last_minus`` are NaN when
        absent.
        """
        n = len(self)
        _, cols, times, dirs = self.crossings(plane)
        up, down = dirs > 0, dirs < 0
        out = {
            "sum_plus": np.bincount(cols[up], times[up], minlength=n),
            "sum_minus": np.bincount(cols[down], times[down], minlength=n),
            "n_plus": np.bincount(cols[up], minlength=n),
            "n_minus": np.bincount(cols[down], minlength=n),
            "first_plus": np.full(n, np.nan),
            "last_minus": np.full(n, np.nan),
        }
        # rows are time-ordered, so reversed assignment keeps the first
        out["first_plus"][cols[up][::-1]] = times[up][::-1]
        out["last_minus"][cols[down]] = times[down]
        return out

    def order_violations(self) -> int:
        """Number of (step, neighbour pair) where the x0 ordering breaks."""
        ok = np.isfinite(self.paths).all(axis=0)
        p = self.paths[:, ok]
        return int(np.count_nonzero(np.diff(p, axis=1) < 0))

    def trajectory(self, i: int) -> Trajectory:
        rec = []
        for plane in (self.a, self.b):
            rows, cols, times, dirs = self.crossings(plane)
            sel = cols == i
            rec.extend(zip([plane] * int(sel.sum()), times[sel].tolist(), dirs[sel].tolist()))
        rec.sort(key=lambda c: c[1])
        return Trajectory(float(self.x0[i]), self.t, self.paths[:, i].copy(), tuple(rec),
                          _LABELS[int(self.status[i])])

    def counts(self, weighted_only: bool = True) -> dict:
        """Trajectories per class; zero-weight probes are skipped by default."""
        st = self.status[self.weights > 0] if weighted_only else self.status
        return {name: int(np.count_nonzero(st == code)) for code, name in _LABELS.items()}


@njit(cache=True)
def _jr_at(g, off, x, x_min, dx):
    u = (x - x_min) / dx
    i = int(math.floor(u))
    s = u - i
    w0 = -s * (s - 1) * (s - 2) / 6
    w1 = (s + 1) * (s - 1) * (s - 2) / 2
    w2 = -(s + 1) * s * (s - 2) / 2
    w3 = (s + 1) * s * (s - 1) / 6
    pr = w0 * g[i - 1, off] + w1 * g[i, off] + w2 * g[i + 1, off] + w3 * g[i + 2, off]
    pi = (w0 * g[i - 1, off + 1] + w1 * g[i, off + 1]
          + w2 * g[i + 1, off + 1] + w3 * g[i + 2, off + 1])
    dr = (w0 * g[i - 1, off + 2] + w1 * g[i, off + 2]
          + w2 * g[i + 1, off + 2] + w3 * g[i + 2, off + 2])
    di = (w0 * g[i - 1, off + 3] + w1 * g[i, off + 3]
          + w2 * g[i + 1, off + 3] + w3 * g[i + 2, off + 3])
    return 2.0 * (pr * di - pi * dr), pr * pr + pi * pi


@njit(cache=True)
def _v_at(g, s, x, x_min, dx, lo, hi, eps_rho, v_max, capped):
    if not (x >= lo and x <= hi):
        return np.nan
    j0, r0 = _jr_at(g, 0, x, x_min, dx)
    j1, r1 = _jr_at(g, 4, x, x_min, dx)
    v = ((1 - s) * j0 + s * j1) / max((1 - s) * r0 + s * r1, eps_rho)
    if abs(v) > v_max:
        capped[0] += 1
        v = v_max if v > 0 else -v_max
    return v


@njit(cache=True)
def _rk4(g, s, ds, h, x, x_min, dx, lo, hi, eps_rho, v_max, capped):
    hs = ds * h
    k1 = _v_at(g, s, x, x_min, dx, lo, hi, eps_rho, v_max, capped)
    k2 = _v_at(g, s + 0.5 * ds, x + 0.5 * hs * k1, x_min, dx, lo, hi, eps_rho, v_max, capped)
    k3 = _v_at(g, s + 0.5 * ds, x + 0.5 * hs * k2, x_min, dx, lo, hi, eps_rho, v_max, capped)
    k4 = _v_at(g, s + ds, x + hs * k3, x_min, dx, lo, hi, eps_rho, v_max, capped)
    return x + hs / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


@njit(cache=True)
def _advance(g, xs, h, tol, min_step, x_min, dx, lo, hi, eps_rho, v_max, stats):
    """Carry every x in ``xs`` across one frame interval, in place.

    Classic RK4 with step doubling: a step is accepted when the single and
    the two half steps differ by at most 15 tol.  NaN marks a lost trajectory.
    """
    for n in range(len(xs)):
        x = xs[n]
        if not np.isfinite(x):
            continue
        s = 0.0
        ds = 1.0
        while s < 1.0 - 1e-12:
            d = min(ds, 1.0 - s)
            full = _rk4(g, s, d, h, x, x_min, dx, lo, hi, eps_rho, v_max, stats)
            mid = _rk4(g, s, 0.5 * d, h, x, x_min, dx, lo, hi, eps_rho, v_max, stats)
            half = _rk4(g, s + 0.5 * d, 0.5 * d, h, mid, x_min, dx, lo, hi, eps_rho, v_max, stats)
            err = abs(half - full) / 15.0
            inside = half >= lo and half <= hi
            if inside and err <= tol:
                x = half
                s += d
            elif d * h <= min_step:
                if inside:
                    x = half
                    s += d
                    stats[2] += 1
                else:
                    x = np.nan
                    break
            stats[1] += 1
            if err > 0 and np.isfinite(err):
                fac = 0.9 * (tol / err) ** 0.2
            elif err == 0:
                fac = 4.0
            else:
                fac = 0.1
            ds = max(d * min(max(fac, 0.1), 4.0), min_step / h)
        xs[n] = x


def _integrate_paths(field_: VelocityField, x0: np.ndarray, tol: float,
                     min_step: float = 1e-12):
    """RK4 from frame to frame with step-doubling error control.

    Each trajectory first tries the whole frame interval and is sub-stepped
    only where the local error estimate exceeds ``tol`` (angstrom).
    Trajectories leaving the grid are marked lost.
    """
    t = field_.times
    nt = len(t)
    x = np.array(x0, dtype=float)
    paths = np.empty((nt, len(x)))
    alive = field_.inside(x)
    x[~alive] = np.nan
    paths[0] = x
    lo, hi = field_.bounds
    stats = np.zeros(3, dtype=np.int64)  # capped, attempted steps, forced steps
    for k in range(nt - 1):
        _advance(field_._pair(k), x, float(t[k + 1] - t[k]), tol, min_step,
                 field_._x_min, field_._dx, lo, hi, field_.eps_rho, field_.v_max, stats)
        paths[k + 1] = x
    lost = alive & ~np.isfinite(x)
    if lost.any():
        log.warning("%d trajectories left the grid", int(lost.sum()))
    field_.capped += int(stats[0])
    field_.steps = int(stats[1])
    field_.forced = int(stats[2])
    return paths, alive & ~lost


def _classify(paths: np.ndarray, alive: np.ndarray, a: float, b: float) -> np.ndarray:
    end = paths[-1]
    status = np.full(len(end), UNDECIDED, dtype=np.int8)
    status[alive & (end > b)] = TRANSMITTED
    status[alive & (end < a)] = REFLECTED
    status[~alive] = LOST
    return status


def integrate_ensemble(field_: VelocityField, x0, a: float, b: float,
                       levels=None, weights=None, tol: float = 1e-8) -> TrajectoryEnsemble:
    """Integrate every initial position in ``x0`` (vectorised RK4)."""
    x0 = np.asarray(x0, dtype=float)
    order = np.argsort(x0, kind="stable")
    x0 = x0[order]
    if levels is not None:
        levels = np.asarray(levels, dtype=float)[order]
    if weights is None:
        weights = np.full(len(x0), 1.0 / len(x0))
    else:
        weights = np.asarray(weights, dtype=float)[order]
    before = field_.capped
    paths, alive = _integrate_paths(field_, x0, tol)
    return TrajectoryEnsemble(
        x0=x0, levels=levels, weights=weights, t=field_.times.copy(), paths=paths,
        status=_classify(paths, alive, a, b), a=a, b=b, capped=field_.capped - before,
    )


def integrate_trajectory(field_: VelocityField, x0: float, a: Optional[float] = None,
                         b: Optional[float] = None) -> Trajectory:
    pot = field_.record.potential
    a = pot.a if a is None else a
    b = pot.b if b is None else b
    ens = integrate_ensemble(field_, [x0], a, b)
    return ens.trajectory(0)


def refine_transmitted(field_: VelocityField, ensemble: TrajectoryEnsemble,
                       initial: StateFrame, m: int = 200, width: int = 24,
                       rounds: int = 5, top_level: float = 1.0 - 1e-13) -> TrajectoryEnsemble:
    """Resolve the transmitted tail of a quantile ensemble.

    Trajectories do not cross, so the transmitted set is {x0 > x*}.  The
    separatrix level u* is bracketed by multisection with extra trajectories;
    the reflected samples keep their cell masses clipped at u*, and the
    transmitted mass 1 - u* is re-sampled by ``m`` quantile points of equal
    weight.  Returns a merged ensemble; the original transmitted samples stay
    in it with zero weight.
    """
    if ensemble.levels is None:
        raise ValueError("refinement needs CDF levels (quantile mode)")
    a, b = ensemble.a, ensemble.b
    st, lv = ensemble.status, ensemble.levels
    n_main = len(ensemble)
    r_idx = np.nonzero(st == REFLECTED)[0]
    t_idx = np.nonzero(st == TRANSMITTED)[0]
    if len(r_idx) == 0 or m == 0:
        return ensemble
    cdf_tab = initial_cdf(initial)
    u_lo = lv[r_idx[-1]]
    above = t_idx[t_idx > r_idx[-1]]
    if len(above):
        u_hi = lv[above[0]]
    else:
        # no transmitted sample: probe the far front of the packet
        u_top = min(top_level, float(np.interp(a - field_.record.grid.dx, cdf_tab[0], cdf_tab[1])))
        probe = integrate_ensemble(field_, _invert(*cdf_tab, [u_top]), a, b)
        if probe.status[0] != TRANSMITTED:
            return ensemble
        u_hi = u_top
    extra_x, extra_st, extra_lv, extra_paths = [], [], [], []
    for _ in range(rounds):
        levels = np.linspace(u_lo, u_hi, width + 2)[1:-1]
        probe = integrate_ensemble(field_, _invert(*cdf_tab, levels), a, b, levels=levels)
        pst = probe.status
        r_hit = np.nonzero(pst == REFLECTED)[0]
        t_hit = np.nonzero(pst == TRANSMITTED)[0]
        if len(r_hit):
            u_lo = max(u_lo, probe.levels[r_hit[-1]])
        t_hit = t_hit[probe.levels[t_hit] > u_lo]
        if len(t_hit):
            u_hi = min(u_hi, probe.levels[t_hit[0]])
        extra_x.append(probe.x0)
        extra_st.append(pst)
        extra_lv.append(probe.levels)
        extra_paths.append(probe.paths)
        if u_hi - u_lo < 1e-15:
            break
    u_star = 0.5 * (u_lo + u_hi)

    # reflected main samples: cell mass clipped at u*
    w = np.zeros(n_main)
    cell_lo = np.floor(lv * n_main) / n_main
    cell_hi = cell_lo + 1.0 / n_main
    mass = np.clip(np.minimum(cell_hi, u_star) - cell_lo, 0.0, None)
    rmask = st == REFLECTED
    w[rmask] = mass[rmask]
    missing = u_star - w[rmask].sum() - mass[(st == UNDECIDED) | (st == LOST)].sum()
    if len(r_idx) and missing > 0:
        w[r_idx[-1]] += missing
    tail_levels = u_star + (np.arange(m) + 0.5) / m * (1.0 - u_star)
    tail = integrate_ensemble(field_, _invert(*cdf_tab, tail_levels), a, b,
                              levels=tail_levels,
                              weights=np.full(m, (1.0 - u_star) / m))

    probe_x = np.concatenate(extra_x)
    x0 = np.concatenate([ensemble.x0, tail.x0, probe_x])
    levels = np.concatenate([lv, tail.levels, np.concatenate(extra_lv)])
    weights = np.concatenate([w, tail.weights, np.zeros(len(probe_x))])
    status = np.concatenate([st, tail.status, np.concatenate(extra_st)])
    paths = np.concatenate([ensemble.paths, tail.paths] + extra_paths, axis=1)
    order = np.argsort(x0, kind="stable")
    return TrajectoryEnsemble(
        x0=x0[order], levels=levels[order], weights=weights[order], t=ensemble.t,
        paths=paths[:, order], status=status[order], a=a, b=b,
        capped=field_.capped, refined=m + len(probe_x),
    )


# -- reports -------------------------------------------------------------------

@dataclass(frozen=True)
class BohmReport:
    a: float
    b: float
    tau_T_B: Optional[float]
    tau_R_B: Optional[float]
    tau_R_B_entered: Optional[float]  # reflected trajectories that reached a only
    tau_d_B: float
    tau_in_T: Optional[float]
    tau_in_R: Optional[float]
    theta_T: float
    theta_R: float
    se_theta_T: float
    se_tau_T_B: Optional[float]
    se_tau_R_B: Optional[float]
    n: int
    n_transmitted: int
    n_reflected: int
    n_undecided: int
    n_lost: int
    n_probes: int  # zero-weight trajectories added while locating the separatrix
    n_reflected_without_entering: int
    order_violations: int
    capped: int

    @property
    def converged(self) -> bool:
        return self.n_undecided + self.n_lost <= 0.01 * self.n


def _wmean(values, weights):
    ok = np.isfinite(values)
    wsum = weights[ok].sum()
    if wsum <= 0:
        return None, None
    m = float(np.sum(weights[ok] * values[ok]) / wsum)
    nn = int(np.count_nonzero(ok & (weights > 0)))
    if nn > 1:
        var = float(np.sum(weights[ok] * (values[ok] - m) ** 2) / wsum)
        se = math.sqrt(var / nn)
    else:
        se = None
    return m, se


def bohm_report(ensemble: TrajectoryEnsemble, record: EvolutionRecord,
                a: Optional[float] = None, b: Optional[float] = None,
                n_main: Optional[int] = None) -> BohmReport:
    """Ensemble-averaged transmission, reflection and dwell times.

    tau_T^B uses the first left-to-right crossing of b minus the first of a
    over transmitted trajectories.  tau_R^B averages the last right-to-left
    crossing of a minus the first left-to-right one over all reflected
    trajectories; those that never reach a contribute zero duration but keep
    their weight, so theta_T tau_T + theta_R tau_R is the dwell time.
    """
    a = ensemble.a if a is None else a
    b = ensemble.b if b is None else b
    st, w = ensemble.status, ensemble.weights
    cls = (st == TRANSMITTED) | (st == REFLECTED)
    wc = np.where(cls, w, 0.0)
    total = wc.sum()
    if total <= 0:
        raise ValueError("no classified trajectories")
    tmask, rmask = st == TRANSMITTED, st == REFLECTED
    theta_t = float(wc[tmask].sum() / total)
    theta_r = 1.0 - theta_t
    ca, cb = ensemble.crossing_times(a), ensemble.crossing_times(b)
    n = n_main if n_main is not None else int(np.count_nonzero(w > 0))

    dur_t = cb["first_plus"] - ca["first_plus"]
    tau_t, se_t = _wmean(dur_t[tmask], w[tmask]) if tmask.any() else (None, None)
    entered = np.isfinite(ca["first_plus"])
    dur_r = np.where(entered, ca["last_minus"] - ca["first_plus"], 0.0)
    tau_r, se_r = _wmean(dur_r[rmask], w[rmask]) if rmask.any() else (None, None)
    re_mask = rmask & entered
    tau_re = _wmean(dur_r[re_mask], w[re_mask])[0] if re_mask.any() else None
    entry = np.where(entered, ca["first_plus"], 0.0)
    tin_t = _wmean(entry[tmask], w[tmask])[0] if tmask.any() else None
    tin_r = _wmean(entry[rmask], w[rmask])[0] if rmask.any() else None
    if tau_t is None and theta_t > 0:
        log.warning("transmitted trajectories lack barrier crossings")
    tau_d = theta_t * (tau_t or 0.0) + theta_r * (tau_r or 0.0)
    counts = ensemble.counts()
    rw = rmask & ~entered & (w > 0)
    return BohmReport(
        a=a, b=b, tau_T_B=tau_t, tau_R_B=tau_r, tau_R_B_entered=tau_re, tau_d_B=tau_d,
        tau_in_T=tin_t, tau_in_R=tin_r, theta_T=theta_t, theta_R=theta_r,
        se_theta_T=math.sqrt(max(theta_t * theta_r, 0.0) / max(n, 1)),
        se_tau_T_B=se_t, se_tau_R_B=se_r, n=int(np.count_nonzero(w > 0)),
        n_transmitted=counts["transmitted"], n_reflected=counts["reflected"],
        n_undecided=counts["undecided"], n_lost=counts["lost"],
        n_probes=int(np.count_nonzero(w <= 0)),
        n_reflected_without_entering=int(np.count_nonzero(rw)),
        order_violations=ensemble.order_violations(), capped=ensemble.capped,
    )


@dataclass(frozen=True)
class IdentityResiduals:
    transmitted_exit: float  # <t+(b) Theta_T> vs (t Theta)_b^+
    reflected_exit: float  # <t-(a) Theta_R> vs (t Theta)_a^-
    entrance: float  # <t+(a)> vs (t Theta)_a^+
    entrance_split: float  # |T|^2 tau_in^T + |R|^2 tau_in^R vs (t Theta)_a^+
    values: dict

    def max(self) -> float:
        return max(abs(self.transmitted_exit), abs(self.reflected_exit),
                   abs(self.entrance), abs(self.entrance_split))


def _rel(x: float, ref: float, floor: float) -> float:
    den = max(abs(ref), floor)
    if den == 0:
        return 0.0 if x == 0 else math.inf
    return (x - ref) / den


def identity_residuals(ensemble: TrajectoryEnsemble, record: EvolutionRecord,
                       a: Optional[float] = None, b: Optional[float] = None) -> IdentityResiduals:
    """Relative residuals between trajectory averages and gated flux moments.

    Crossing times are summed over every crossing in the given direction, the
    literal reading of the delta-function definition.  A moment smaller than
    what one sample can carry, (t Theta)_a^+ / n, is not resolvable by the
    ensemble; denominators are floored at that value.
    """
    a = ensemble.a if a is None else a
    b = ensemble.b if b is None else b
    st, w = ensemble.status, ensemble.weights
    cls = (st == TRANSMITTED) | (st == REFLECTED)
    wc = np.where(cls, w, 0.0) / np.where(cls, w, 0.0).sum()
    tmask, rmask = st == TRANSMITTED, st == REFLECTED
    ca, cb = ensemble.crossing_times(a), ensemble.crossing_times(b)
    tp_b_T = float(np.sum(wc[tmask] * cb["sum_plus"][tmask]))
    tm_a_R = float(np.sum(wc[rmask] * ca["sum_minus"][rmask]))
    tp_a = float(np.sum(wc * ca["sum_plus"]))
    flux_b = gated_flux_moments(record, b, +1)
    flux_am = gated_flux_moments(record, a, -1)
    flux_ap = gated_flux_moments(record, a, +1)
    theta_t = float(wc[tmask].sum())
    tin_t = float(np.sum(wc[tmask] * ca["sum_plus"][tmask])) / theta_t if theta_t > 0 else 0.0
    tin_r = float(np.sum(wc[rmask] * ca["sum_plus"][rmask])) / (1 - theta_t) if theta_t < 1 else 0.0
    t2 = flux_b.probability
    split = t2 * tin_t + (1.0 - t2) * tin_r
    floor = abs(flux_ap.raw) / max(int(np.count_nonzero(w > 0)), 1)
    values = {"t_plus_b_T": tp_b_T, "t_theta_b_plus": flux_b.raw,
              "t_minus_a_R": tm_a_R, "t_theta_a_minus": flux_am.raw,
              "t_plus_a": tp_a, "t_theta_a_plus": flux_ap.raw,
              "entrance_split": split}
    return IdentityResiduals(
        transmitted_exit=_rel(tp_b_T, flux_b.raw, floor),
        reflected_exit=_rel(tm_a_R, flux_am.raw, floor),
        entrance=_rel(tp_a, flux_ap.raw, floor),
        entrance_split=_rel(split, flux_ap.raw, floor),
        values=values,
    )


def write_trajectories_csv(ensemble: TrajectoryEnsemble, path, every: int = 1) -> None:
    """Long-format CSV: trajectory id, t, x (internal time, angstrom)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["id", "t", "x"])
        for i in range(len(ensemble)):
            col = ensemble.paths[::every, i]
            for t, x in zip(ensemble.t[::every], col):
                if math.isfinite(x):
                    wr.writerow([i, repr(float(t)), repr(float(x))])
