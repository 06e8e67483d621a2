# %% [markdown]
# # Where the two clocks agree
#
# For thin barriers and fast packets the trajectory transmission time and
# the flux transmission time coincide.  For thick barriers the flux time
# stays short while trajectories linger.  This script runs a reduced width
# sweep and a reduced energy sweep (a few minutes on one CPU); the CLI
# commands `sweep-width` and `sweep-energy` run the full grids.

# %%
from tunneltimes import UNITS
from tunneltimes.harness import SweepConfig, sweep_energy, sweep_width

fs = UNITS.time_to_fs
base = SweepConfig(dt_scale=8.0)

# %%
widths = sweep_width(base.replace(axis="width", values=(0.5, 1.0, 3.0, 6.0), sigmas=(12.0,)))
print(" d/A   tau_T^OR/fs  tau_T^B/fs  rel gap")
for r in widths.results:
    to, tb = r.orr.tau_T_OR, r.bohm.tau_T_B
    print(f"{r.config.d:4.1f}  {fs(to):10.5f}  {fs(tb):10.5f}  {abs(tb - to) / tb:7.3f}")

# %%
energies = sweep_energy(base.replace(axis="energy", values=(5.0, 10.0, 20.0)))
print("E0/eV  tau_T^OR/fs  tau_T^B/fs  v0 tau_T^OR/A")
for r in energies.results:
    v0 = 2 * UNITS.wavenumber(r.config.E0)
    to, tb = r.orr.tau_T_OR, r.bohm.tau_T_B
    print(f"{r.config.E0:5.1f}  {fs(to):10.5f}  {fs(tb):10.5f}  {v0 * to:10.4f}")
