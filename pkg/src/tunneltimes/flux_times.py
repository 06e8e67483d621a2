"""Flux-gated characteristic times at measurement planes.

All time integrals start at launch (t = 0) and use the trapezoid rule on the
per-step plane samples.  The step function is taken with Theta(0) = 0.
Conditional times whose probability vanishes are reported as ``None``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.integrate import simpson

from .core import UNITS, UnitSystem
from .propagator import EvolutionRecord

__all__ = [
    "GatedMoments",
    "ORReport",
    "ArrivalDistribution",
    "PeakVsFluxReport",
    "gated_flux_moments",
    "or_report",
    "dwell_time",
    "arrival_distribution",
    "peak_vs_flux_average",
    "report_to_dict",
    "report_to_json",
]


@dataclass(frozen=True)
class GatedMoments:
    plane: float
    sign: int
    probability: float
    raw: float  # (t Theta)_x^sign
    converged: bool

    @property
    def mean_time(self) -> Optional[float]:
        if self.probability > 0:
            return self.raw / self.probability
        return None


@dataclass(frozen=True)
class ORReport:
    a: float
    b: float
    tau_in: Optional[float]
    tau_out_T: Optional[float]
    tau_out_R: Optional[float]
    tau_T_OR: Optional[float]
    tau_R_OR: Optional[float]
    tau_d_OR: float  # weighted form
    tau_d_OR_flux: float  # first moment of j(b) - j(a)
    tau_D: float  # time-integrated presence probability
    T_prob: float
    left_exit_prob: float
    enter_prob: float
    t_theta_in: float  # (t Theta)_a^+
    t_theta_out_T: float  # (t Theta)_b^+
    t_theta_out_R: float  # (t Theta)_a^-
    back_flux_b: float  # (Theta)_b^-
    converged: bool

    @property
    def conservation_residual(self) -> float:
        return self.T_prob + self.left_exit_prob - self.enter_prob


def _gated(record: EvolutionRecord, plane: float, sign: int):
    col = record.plane_column(plane)
    sj = sign * record.j[:, col]
    g = np.where(sj > 0, sj, 0.0)
    return record.t, g


def gated_flux_moments(record: EvolutionRecord, plane: float, sign: int) -> GatedMoments:
    """(Theta)_x^+- and (t Theta)_x^+- from the per-step current series."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    t, g = _gated(record, plane, sign)
    prob = float(np.trapezoid(g, t))
    raw = float(np.trapezoid(t * g, t))
    return GatedMoments(plane, sign, prob, raw, record.converged)


def dwell_time(record: EvolutionRecord, a: float, b: float) -> float:
    """Integral over time of the probability inside [a, b].

    Space by Simpson over the barrier nodes, time by the trapezoid rule over
    the stored frames.
    """
    g = record.grid
    ia, ib = g.index(a), g.index(b)
    if ib <= ia:
        return 0.0
    seg = record.frames[:, ia:ib + 1]
    rho = seg.real**2 + seg.imag**2
    if ib - ia >= 2:
        inside = simpson(rho, dx=g.dx, axis=1)
    else:
        inside = np.trapezoid(rho, dx=g.dx, axis=1)
    return float(np.trapezoid(inside, record.frame_times))


def _ratio(num: float, den: float) -> Optional[float]:
    return num / den if den > 0 else None


def or_report(record: EvolutionRecord, a: float, b: float) -> ORReport:
    enter = gated_flux_moments(record, a, +1)
    out_t = gated_flux_moments(record, b, +1)
    out_r = gated_flux_moments(record, a, -1)
    back_b = gated_flux_moments(record, b, -1)
    tau_in = enter.mean_time
    tau_out_t = out_t.mean_time
    tau_out_r = out_r.mean_time
    tau_t = tau_out_t - tau_in if tau_out_t is not None and tau_in is not None else None
    tau_r = tau_out_r - tau_in if tau_out_r is not None and tau_in is not None else None
    tau_d = (out_t.probability * (tau_t or 0.0)) + (out_r.probability * (tau_r or 0.0))
    ja = record.j[:, record.plane_column(a)]
    jb = record.j[:, record.plane_column(b)]
    tau_d_flux = float(np.trapezoid(record.t * (jb - ja), record.t))
    return ORReport(
        a=a, b=b, tau_in=tau_in, tau_out_T=tau_out_t, tau_out_R=tau_out_r,
        tau_T_OR=tau_t, tau_R_OR=tau_r, tau_d_OR=tau_d, tau_d_OR_flux=tau_d_flux,
        tau_D=dwell_time(record, a, b),
        T_prob=out_t.probability, left_exit_prob=out_r.probability,
        enter_prob=enter.probability, t_theta_in=enter.raw,
        t_theta_out_T=out_t.raw, t_theta_out_R=out_r.raw,
        back_flux_b=back_b.probability, converged=record.converged,
    )


@dataclass(frozen=True)
class ArrivalDistribution:
    plane: float
    times: np.ndarray
    density: np.ndarray
    normalization: float

    @property
    def mean(self) -> float:
        return float(np.trapezoid(self.times * self.density, self.times))


def arrival_distribution(record: EvolutionRecord, plane: float) -> ArrivalDistribution:
    """P(t) = j Theta[j] / (Theta)_plane^+, the forward-crossing time density."""
    t, g = _gated(record, plane, +1)
    norm = float(np.trapezoid(g, t))
    if not norm > 0:
        raise ValueError(f"no forward flux through x = {plane}")
    return ArrivalDistribution(plane, t, g / norm, norm)


@dataclass(frozen=True)
class PeakVsFluxReport:
    plane: float
    sigma: float
    t_peak: float
    tau_flux: float
    tied_maximum: bool

    @property
    def gap(self) -> float:
        return self.tau_flux - self.t_peak


def peak_vs_flux_average(record: EvolutionRecord, plane: float, sigma: float) -> PeakVsFluxReport:
    """Compare the density-peak passage time with the flux-weighted mean time."""
    col = record.plane_column(plane)
    t, rho, j = record.t, record.rho[:, col], record.j[:, col]
    k = int(np.argmax(rho))
    tied = int(np.count_nonzero(rho == rho[k])) > 1
    t_peak = float(t[k])
    if 0 < k < len(t) - 1:
        y0, y1, y2 = rho[k - 1], rho[k], rho[k + 1]
        den = y0 - 2 * y1 + y2
        if den != 0:
            t_peak += 0.5 * (y0 - y2) / den * (t[k + 1] - t[k])
    tau_flux = float(np.trapezoid(t * j, t) / np.trapezoid(j, t))
    return PeakVsFluxReport(plane, sigma, t_peak, tau_flux, tied)


_TIME_FIELDS = {"tau_in", "tau_out_T", "tau_out_R", "tau_T_OR", "tau_R_OR",
                "tau_d_OR", "tau_d_OR_flux", "tau_D", "t_theta_in",
                "t_theta_out_T", "t_theta_out_R"}


def report_to_dict(report: ORReport, units: UnitSystem = UNITS) -> dict:
    """Report with times converted to femtoseconds (``None`` stays ``None``)."""
    out = {}
    for k, v in asdict(report).items():
        if k in _TIME_FIELDS and v is not None:
            v = units.time_to_fs(v)
        if isinstance(v, float) and not math.isfinite(v):
            raise ValueError(f"non-finite value in {k}")
        out[k] = v
    out["time_unit"] = "fs"
    return out


def report_to_json(report: ORReport, units: UnitSystem = UNITS, **kw) -> str:
    return json.dumps(report_to_dict(report, units), **kw)
