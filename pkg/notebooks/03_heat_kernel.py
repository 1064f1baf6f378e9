# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Heat kernels and Green functions
#
# Uniformization gives the kernel on a box to a set tolerance. On the
# homogeneous lattice it reproduces the product of modified Bessel terms.

# %%
import numpy as np
from scipy.special import ive

from rcmlab.env import LatticeRegion, homogeneous_field, make_tail_law, ConductanceField
from rcmlab.solver import green_extrapolated, heat_kernel

d, t = 2, 1.0
hf = homogeneous_field(d, 1.0, LatticeRegion(d, 20))
kf = heat_kernel(hf, np.zeros(d, dtype=np.int64), [t])
print(kf.value(np.zeros(d, dtype=np.int64)), ive(0, 2 * t) ** d)

# %%
gx = green_extrapolated(homogeneous_field(3, 1.0), half_sides=(8, 16))
print("g(0,0) by box:", gx.values, "extrapolated:", gx.extrapolated)

# %%
# a random environment: the kernel spreads unevenly around traps
rf = ConductanceField(make_tail_law(2), seed=3).restrict(LatticeRegion(2, 10), "eager")
kr = heat_kernel(rf, np.zeros(2, dtype=np.int64), [4.0])
grid = kr.grid()
print("mass", kr.mass()[0], "peak", grid.max(), "at", np.unravel_index(grid.argmax(), grid.shape))
