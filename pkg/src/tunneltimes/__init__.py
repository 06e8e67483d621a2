"""Wave-packet tunneling times: flux-gated averages and Bohmian trajectories."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    UNITS, Grid, GridError, Potential, StateFrame, UnitSystem, WavePacketSpec,
    current, density, gaussian_packet, make_grid,
)
from .propagator import EvolutionRecord, PropagatorConfig, evolve, reference_step, step  # noqa: E402
from .flux_times import (  # noqa: E402
    ORReport, arrival_distribution, dwell_time, gated_flux_moments, or_report,
    peak_vs_flux_average,
)
from .bohmian import (  # noqa: E402
    BohmReport, TrajectoryEnsemble, VelocityField, bohm_report, identity_residuals,
    integrate_ensemble, integrate_trajectory, refine_transmitted, sample_initial_positions,
)
