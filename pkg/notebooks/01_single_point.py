# %% [markdown]
# # One barrier, two clocks
#
# A Gaussian packet (E0 = 5 eV, sigma = 12 A) meets a 10 eV square barrier
# 3 A wide.  We evolve it once, read the gated flux times at the barrier
# edges, then push 4000 trajectories through the stored velocity field and
# compare the trajectory times with the flux times.

# %%
from tunneltimes import UNITS, bohm_report, identity_residuals, or_report
from tunneltimes.harness import SweepConfig, simulate, trajectories

cfg = SweepConfig(dt_scale=8.0)  # 8x the default step: same times to ~1e-6, 8x faster
setup, f0, rec = simulate(cfg)
print(f"grid: {setup.grid.n_points} nodes, dx = {setup.grid.dx:.4f} A, "
      f"{len(rec.t) - 1} steps, converged = {rec.converged}")

# %% [markdown]
# ## Flux times
# Transmission probability is the forward flux through b; the dwell time
# computed from the flux first moments matches the time-integrated presence
# probability inside the barrier.

# %%
fs = UNITS.time_to_fs
orr = or_report(rec, 0.0, 3.0)
print(f"|T|^2          = {orr.T_prob:.6e}")
print(f"tau_T^OR       = {fs(orr.tau_T_OR):.5f} fs")
print(f"tau_R^OR       = {fs(orr.tau_R_OR):.5f} fs")
print(f"tau_d (flux)   = {fs(orr.tau_d_OR_flux):.5f} fs")
print(f"tau_D (dwell)  = {fs(orr.tau_D):.5f} fs")

# %% [markdown]
# ## Trajectory times
# Quantile-sampled initial positions never cross, so the transmitted set is
# the top block of the ensemble.  The refinement step resolves that block
# with 200 extra samples.

# %%
main, ens, field = trajectories(cfg, rec, f0, 0.0, 3.0)
bm = bohm_report(ens, rec, n_main=cfg.n_trajectories)
ir = identity_residuals(ens, rec)
print(f"<Theta_T>      = {bm.theta_T:.6e}  (flux {orr.T_prob:.6e})")
print(f"tau_T^B        = {fs(bm.tau_T_B):.5f} fs  vs tau_T^OR {fs(orr.tau_T_OR):.5f} fs")
print(f"tau_d^B        = {fs(bm.tau_d_B):.5f} fs  vs tau_D {fs(orr.tau_D):.5f} fs")
print(f"max identity residual {ir.max():.1e}, ordering violations {bm.order_violations}")
