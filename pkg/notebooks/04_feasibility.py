# %% [markdown]
# # Can the packet be prepared faster than it tunnels?
#
# A packet of width sigma moving at v0 needs about sigma/v0 just to be
# located.  Comparing that with the flux transmission time over the energy
# sweep shows how much the preparation uncertainty dominates.

# %%
from tunneltimes.harness import SweepConfig, feasibility

bundle = feasibility(SweepConfig(dt_scale=8.0))
for row in bundle.rows:
    print(f"E0 = {row['E0_eV']:>5} eV  ratio = {float(row['ratio']):8.2f}  "
          f"v0 tau_T^OR = {float(row['v0_tau_T_OR_A']):.3f} A")
