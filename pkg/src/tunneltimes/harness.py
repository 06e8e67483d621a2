"""Experiment configuration, sweeps and result persistence.

A :class:`SweepConfig` fully determines a computation.  ``run_point`` takes a
config at one parameter set through grid, packet, evolution, flux times and
trajectories.  The sweeps call it once per point and collect rows into a
:class:`ResultBundle`, which writes an RFC-4180 CSV and a ``manifest.json``.
Times are internal units everywhere except the CSV and JSON outputs, which
carry femtoseconds.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bohmian import (
    BohmReport, IdentityResiduals, VelocityField, bohm_report, identity_residuals,
    integrate_ensemble, refine_transmitted, sample_initial_positions,
)
from .core import UNITS, Potential, WavePacketSpec, gaussian_packet, make_grid
from .flux_times import ORReport, or_report, peak_vs_flux_average
from .propagator import EvolutionRecord, PropagatorConfig, evolve

log = logging.getLogger(__name__)

__all__ = [
    "SCHEMA_VERSION",
    "WIDTHS",
    "ENERGIES",
    "SIGMAS",
    "SweepConfig",
    "PointResult",
    "point_row",
    "ResultBundle",
    "prepare",
    "simulate",
    "run_point",
    "sweep_width",
    "sweep_energy",
    "fig1_demo",
    "feasibility",
    "verify",
]

SCHEMA_VERSION = 1
WIDTHS = tuple(0.5 * i for i in range(1, 17))
ENERGIES = (2.5, 5.0, 7.5, 10.0, 12.5, 15.0, 20.0)
SIGMAS = (6.0, 12.0, 18.0)
AXES = ("none", "width", "energy", "sigma")
PLANE_MODES = ("edges", "far", "both")
FIG1_DISTANCE = 700.0  # plane distance from the packet start, angstrom


@dataclass(frozen=True)
class SweepConfig:
    """Physics, solver and ensemble settings (lengths in A, energies in eV)."""

    V0: float = 10.0
    E0: float = 5.0
    sigma: float = 12.0
    d: float = 3.0
    plane_mode: str = "edges"
    axis: str = "none"
    values: tuple = ()
    sigmas: tuple = SIGMAS  # width sweep and fig1 repeat over these
    dt_scale: float = 1.0
    frame_interval: float = 0.05  # target spacing of stored frames, internal time
    eps_stop: float = 1e-6
    scheme: str = "product_formula_4"
    n_trajectories: int = 4000
    sampling: str = "quantile"
    refine: int = 200  # tail samples for the transmitted set, 0 disables
    rk_tol: float = 1e-8  # trajectory local error tolerance, angstrom
    seed: int = 0
    out: str = "results"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "sigmas", tuple(float(v) for v in self.sigmas))
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"schema version {self.schema_version} is not {SCHEMA_VERSION}")
        for name in ("V0", "E0", "sigma", "dt_scale", "frame_interval"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v}")
        if not (self.d >= 0 and math.isfinite(self.d)):
            raise ValueError(f"d must be nonnegative, got {self.d}")
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}")
        if self.plane_mode not in PLANE_MODES:
            raise ValueError(f"plane_mode must be one of {PLANE_MODES}")
        for name in ("values", "sigmas"):
            seq = getattr(self, name)
            if any(not (v > 0 and math.isfinite(v)) for v in seq):
                raise ValueError(f"{name} must be positive")
            if list(seq) != sorted(seq):
                raise ValueError(f"{name} must be sorted ascending")
        if self.sampling not in ("quantile", "pseudorandom"):
            raise ValueError("sampling must be quantile or pseudorandom")
        if self.n_trajectories < 0 or self.refine < 0:
            raise ValueError("ensemble sizes must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    # -- serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["values"] = list(self.values)
        d["sigmas"] = list(self.sigmas)
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "SweepConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        data = dict(data)
        data.setdefault("schema_version", SCHEMA_VERSION)
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "SweepConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "SweepConfig":
        return cls.from_json(Path(path).read_text())

    def hash(self) -> str:
        """SHA-256 of the canonical JSON, excluding the output directory."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def replace(self, **kw) -> "SweepConfig":
        return dataclasses.replace(self, **kw)

    def at(self, value: float) -> "SweepConfig":
        """Config at one value of the sweep axis."""
        key = {"width": "d", "energy": "E0", "sigma": "sigma"}.get(self.axis)
        if key is None:
            return self
        return dataclasses.replace(self, **{key: float(value)}, axis="none", values=())


# -- single point -----------------------------------------------------------------

@dataclass
class Setup:
    spec: WavePacketSpec
    potential: Potential
    grid: object
    planes: tuple
    far_plane: Optional[float]
    propagator: PropagatorConfig


def prepare(cfg: SweepConfig) -> Setup:
    """Grid, packet, planes and propagator settings for one point.

    The packet starts max(6.5 sigma, 60 A) left of the first plane, so its
    initial overlap with the barrier and the planes is below 1e-10.
    """
    a, b = 0.0, cfg.d
    k0 = UNITS.wavenumber(cfg.E0)
    lead = max(6.5 * cfg.sigma, 60.0)
    far = cfg.plane_mode in ("far", "both")
    far_offset = 5.0 * cfg.sigma if far else 0.0
    xc = a - far_offset - lead
    spec = WavePacketSpec(xc, cfg.sigma, k0)
    pot = Potential(a=a, b=b, V0=cfg.V0) if cfg.d > 0 else Potential.free(a, b)
    v = spec.group_velocity
    # arrival of the centre at a plus the return trip of the reflected part
    t_arrive = (a - xc) / v
    t_max = 1.5 * (t_arrive + (far_offset + 6.0 * cfg.sigma) / v) + 20.0
    grid = make_grid(spec, pot, t_span=t_max, planes=(a - far_offset, b))
    planes = [a, b]
    far_plane = None
    if far:
        far_plane = a - round(far_offset / grid.dx) * grid.dx
        planes.insert(0, far_plane)
    dt = grid.dt * cfg.dt_scale
    stride = max(1, round(cfg.frame_interval / dt))
    prop = PropagatorConfig(dt=dt, t_max=t_max, scheme=cfg.scheme, frame_stride=stride,
                            eps_stop=cfg.eps_stop, t_min=t_arrive, region=(a, b))
    return Setup(spec, pot, grid, tuple(dict.fromkeys(planes)), far_plane, prop)


def simulate(cfg: SweepConfig):
    """Evolve the configured packet; returns (setup, initial frame, record)."""
    s = prepare(cfg)
    f0 = gaussian_packet(s.grid, s.spec)
    return s, f0, evolve(f0, s.potential, s.propagator, s.planes)


def trajectories(cfg: SweepConfig, record: EvolutionRecord, initial, a: float, b: float):
    """Trajectory ensemble of ``cfg`` (refined in quantile mode)."""
    n = cfg.n_trajectories
    fld = VelocityField(record)
    if cfg.sampling == "quantile":
        levels = (np.arange(n) + 0.5) / n
        x0 = sample_initial_positions(initial, n)
    else:
        levels = None
        x0 = sample_initial_positions(initial, n, mode="pseudorandom", seed=cfg.seed)
    ens = integrate_ensemble(fld, x0, a, b, levels=levels, tol=cfg.rk_tol)
    main = ens
    if levels is not None and cfg.refine > 0:
        ens = refine_transmitted(fld, ens, initial, m=cfg.refine)
    return main, ens, fld


@dataclass
class PointResult:
    """Everything computed at one sweep point."""

    config: SweepConfig
    orr: Optional[ORReport] = None
    bohm: Optional[BohmReport] = None
    identities: Optional[IdentityResiduals] = None
    orr_far: Optional[ORReport] = None
    bohm_far: Optional[BohmReport] = None
    meta: dict = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def flags(self) -> list:
        f = []
        if self.error:
            f.append("error")
            return f
        if not self.meta.get("converged", False):
            f.append("unconverged")
        if self.orr is not None and self.orr.tau_T_OR is None:
            f.append("no_transmission")
        if self.bohm is not None:
            if not self.bohm.converged:
                f.append("undecided")
            if self.bohm.order_violations:
                f.append("order_violation")
            if self.bohm.tau_T_B is None:
                f.append("tau_T_B_absent")
        return f


def run_point(cfg: SweepConfig, bohm: bool = True) -> PointResult:
    """Full pipeline at one parameter set.

    Failures are caught and returned as a result with ``error`` set, so a
    sweep never loses a point silently.
    """
    res = PointResult(cfg)
    t0 = time.perf_counter()
    try:
        s, f0, rec = simulate(cfg)
        t1 = time.perf_counter()
        a, b = s.potential.a, s.potential.b
        res.orr = or_report(rec, a, b)
        res.meta = {
            "n_points": s.grid.n_points, "dx": s.grid.dx, "dt": rec.dt,
            "frame_stride": rec.frame_stride, "steps": len(rec.t) - 1,
            "t_end": float(rec.t[-1]), "x_start": s.spec.center,
            "converged": bool(rec.converged),
            "max_norm_deviation": rec.max_norm_deviation,
            "edge_mass_max": rec.edge_mass_max,
            "runtime_evolve_s": t1 - t0,
        }
        if s.far_plane is not None:
            res.orr_far = or_report(rec, s.far_plane, b)
            res.meta["far_plane"] = s.far_plane
        if bohm and cfg.n_trajectories > 0:
            main, ens, fld = trajectories(cfg, rec, f0, a, b)
            res.bohm = bohm_report(ens, rec, n_main=cfg.n_trajectories)
            res.identities = identity_residuals(ens, rec)
            if s.far_plane is not None:
                res.bohm_far = bohm_report(ens, rec, a=s.far_plane, n_main=cfg.n_trajectories)
            res.meta["trajectory_steps"] = fld.steps
            res.meta["trajectory_forced_steps"] = fld.forced
            res.meta["runtime_bohm_s"] = time.perf_counter() - t1
    except Exception as exc:  # recorded, never dropped
        log.exception("point %s failed", cfg.to_json())
        res.error = f"{type(exc).__name__}: {exc}"
    res.meta["runtime_s"] = time.perf_counter() - t0
    return res


# -- bundles ---------------------------------------------------------------------------

def _fs(t: Optional[float]) -> str:
    return "" if t is None else repr(float(UNITS.time_to_fs(t)))


def _num(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def point_row(r: PointResult) -> dict:
    c = r.config
    o, bm = r.orr, r.bohm
    row = {
        "sigma_A": repr(c.sigma), "d_A": repr(c.d), "E0_eV": repr(c.E0), "V0_eV": repr(c.V0),
        "tau_T_OR_fs": _fs(o and o.tau_T_OR), "tau_T_B_fs": _fs(bm and bm.tau_T_B),
        "tau_R_OR_fs": _fs(o and o.tau_R_OR), "tau_R_B_fs": _fs(bm and bm.tau_R_B),
        "tau_D_fs": _fs(o and o.tau_D), "tau_d_OR_fs": _fs(o and o.tau_d_OR),
        "tau_d_B_fs": _fs(bm and bm.tau_d_B),
        "T_prob": _num(o and o.T_prob), "theta_T": _num(bm and bm.theta_T),
    }
    if c.plane_mode in ("far", "both"):
        row["tau_R_OR_far_fs"] = _fs(r.orr_far and r.orr_far.tau_R_OR)
        row["tau_R_B_far_fs"] = _fs(r.bohm_far and r.bohm_far.tau_R_B)
    row["flags"] = ";".join(r.flags) or "ok"
    return row


def _csv_text(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def _versions() -> dict:
    import numba
    import scipy
    return {"tunneltimes": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


@dataclass
class ResultBundle:
    """Rows of one experiment plus what is needed to reproduce them."""

    name: str
    config: SweepConfig
    results: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    runtime_s: float = 0.0

    def __post_init__(self):
        for r in self.results:
            if r.config.schema_version != self.config.schema_version:
                raise ValueError("cannot mix schema versions in one bundle")

    def csv_text(self) -> str:
        return _csv_text(self.rows)

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "schema_version": self.config.schema_version,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "versions": _versions(),
            "runtime_s": self.runtime_s,
            "point_runtimes_s": [r.meta.get("runtime_s") for r in self.results],
            "rows": len(self.rows),
            "files": [f"{self.name}.csv"],
            "time_unit": "fs",
        }

    def write(self, out_dir=None) -> Path:
        out = Path(out_dir if out_dir is not None else self.config.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{self.name}.csv"
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())
        man = out / "manifest.json"
        existing = {}
        if man.exists():
            try:
                existing = json.loads(man.read_text())
            except json.JSONDecodeError:
                existing = {}
        runs = existing.get("runs", {}) if isinstance(existing, dict) else {}
        runs[self.name] = self.manifest()
        man.write_text(json.dumps({"runs": runs}, indent=2, sort_keys=True) + "\n")
        return path


def _map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))  # results come back in input order


def _collect(name: str, cfg: SweepConfig, configs, threads: int, bohm: bool = True) -> ResultBundle:
    t0 = time.perf_counter()
    fn = run_point if bohm else _run_flux_only
    results = _map(fn, configs, threads)
    bundle = ResultBundle(name, cfg, results, [point_row(r) for r in results])
    bundle.runtime_s = time.perf_counter() - t0
    return bundle


def _run_flux_only(cfg: SweepConfig) -> PointResult:
    return run_point(cfg, bohm=False)


def sweep_width(cfg: SweepConfig, threads: int = 1) -> ResultBundle:
    """One point per barrier width at each sigma in ``cfg.sigmas``."""
    widths = cfg.values if cfg.axis == "width" and cfg.values else WIDTHS
    base = cfg.replace(axis="width", values=tuple(widths))
    configs = [base.replace(sigma=s).at(d) for s in base.sigmas for d in widths]
    return _collect("sweep_width", base, configs, threads)


def sweep_energy(cfg: SweepConfig, threads: int = 1) -> ResultBundle:
    """One point per incident energy, default d = 3 A and sigma = 12 A."""
    energies = cfg.values if cfg.axis == "energy" and cfg.values else ENERGIES
    base = cfg.replace(axis="energy", values=tuple(energies))
    return _collect("sweep_energy", base, [base.at(e) for e in energies], threads)


def fig1_demo(cfg: SweepConfig, sigmas: Optional[Sequence[float]] = None,
              distance: float = FIG1_DISTANCE, threads: int = 1) -> ResultBundle:
    """Peak passage time against flux-weighted mean time for free packets.

    The plane sits ``distance`` to the right of the packet start.  Free
    evolution is exact in time under the product formula, so the step is set
    by the sampling of the plane series only: 1/400 of the time the spread
    packet needs to pass the plane.
    """
    sigmas = tuple(sigmas) if sigmas is not None else cfg.sigmas
    base = cfg.replace(sigmas=tuple(sorted(sigmas)))
    t0 = time.perf_counter()
    results = _map(_fig1_point, [(base, s, distance) for s in base.sigmas], threads)
    rows = [{
        "sigma_A": repr(s), "plane_A": repr(r["plane"]), "t_peak_fs": _fs(r["t_peak"]),
        "tau_flux_fs": _fs(r["tau_flux"]), "gap_fs": _fs(r["gap"]),
        "transit_fs": _fs(r["transit"]),
        "flags": ";".join(f for f, on in (("tied_maximum", r["tied"]),
                                          ("unconverged", not r["converged"])) if on) or "ok",
    } for s, r in zip(base.sigmas, results)]
    bundle = ResultBundle("fig1", base, [], rows)
    bundle.runtime_s = time.perf_counter() - t0
    return bundle


def _fig1_point(args) -> dict:
    cfg, sigma, distance = args
    k0 = UNITS.wavenumber(cfg.E0)
    xc = 0.0
    plane = xc + distance
    spec = WavePacketSpec(xc, sigma, k0)
    v = spec.group_velocity
    t_pass = distance / v
    # the back of the packet, moving with the slow tail k0 - 4 sigma_k, must
    # clear the plane before the stop rule can hold
    v_slow = v - 8.0 / sigma
    if v_slow <= 0:
        raise ValueError("packet too narrow for its energy: slow tail does not arrive")
    t_max = 1.1 * (distance + 7.0 * sigma) / v_slow + 20.0
    pot = Potential.free(plane, plane)
    grid = make_grid(spec, pot, t_span=t_max, planes=(plane,))
    dt = float(spec.width_at(t_pass)) / v / 400.0
    prop = PropagatorConfig(dt=dt, t_max=t_max, frame_stride=10**9, eps_stop=cfg.eps_stop,
                            t_min=t_pass, region=(plane, plane))
    rec = evolve(gaussian_packet(grid, spec), pot, prop, (plane,))
    rep = peak_vs_flux_average(rec, plane, sigma)
    return {"plane": plane, "t_peak": rep.t_peak, "tau_flux": rep.tau_flux, "gap": rep.gap,
            "transit": t_pass, "tied": rep.tied_maximum, "converged": rec.converged}


def feasibility(cfg: SweepConfig, bundle: Optional[ResultBundle] = None,
                threads: int = 1) -> ResultBundle:
    """Preparation-time ratio (dx/v0)/tau_T^OR over the energy sweep, dx = sigma.

    Reuses the rows of an energy-sweep ``bundle`` when given, otherwise runs
    the flux part of the sweep.
    """
    if bundle is None:
        energies = cfg.values if cfg.axis == "energy" and cfg.values else ENERGIES
        base = cfg.replace(axis="energy", values=tuple(energies))
        bundle = _collect("sweep_energy", base, [base.at(e) for e in energies],
                          threads, bohm=False)
    rows = []
    for r in bundle.results:
        c = r.config
        v0 = 2.0 * UNITS.wavenumber(c.E0)  # internal velocity, A per internal time
        prep = c.sigma / v0
        tau = r.orr.tau_T_OR if r.orr is not None else None
        rows.append({
            "E0_eV": repr(c.E0), "sigma_A": repr(c.sigma), "d_A": repr(c.d),
            "v0_A_per_fs": repr(v0 / UNITS.time_unit_fs),
            "dx_over_v0_fs": _fs(prep), "tau_T_OR_fs": _fs(tau),
            "ratio": _num(prep / tau if tau else None),
            "v0_tau_T_OR_A": _num(v0 * tau if tau is not None else None),
            "flags": ";".join(r.flags) or "ok",
        })
    out = ResultBundle("feasibility", bundle.config, bundle.results, rows)
    out.runtime_s = bundle.runtime_s
    return out


# -- verification suite -------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    value: float
    limit: float
    passed: bool

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name}: {self.value:.3e} (limit {self.limit:.1e})"


def verify(cfg: SweepConfig) -> list:
    """Identity checks at one point; returns a list of :class:`Check`."""
    r = run_point(cfg)
    if r.error:
        raise RuntimeError(r.error)
    o, bm, ir = r.orr, r.bohm, r.identities

    def rel(x, y):
        return abs(x - y) / abs(y) if y else abs(x - y)

    checks = [
        ("norm deviation", r.meta["max_norm_deviation"], 1e-8),
        ("flux conservation", abs(o.conservation_residual), 1e-6),
        ("dwell weighted vs first moment", rel(o.tau_d_OR, o.tau_d_OR_flux), 1e-6),
        ("dwell flux vs density", rel(o.tau_d_OR_flux, o.tau_D), 1e-3),
        ("trajectory vs flux transmission", abs(bm.theta_T - o.T_prob), 5e-3),
        ("transmitted exit identity", abs(ir.transmitted_exit), 1e-2),
        ("reflected exit identity", abs(ir.reflected_exit), 1e-2),
        ("entrance identity", abs(ir.entrance), 1e-2),
        ("entrance split identity", abs(ir.entrance_split), 1e-2),
        ("trajectory dwell vs density dwell", rel(bm.tau_d_B, o.tau_D), 1e-2),
        ("ordering violations", float(bm.order_violations), 0.5),
    ]
    return [Check(n, float(v), lim, bool(v < lim)) for n, v, lim in checks]
