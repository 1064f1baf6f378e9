# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Conductance environments
#
# Sample the heavy-tailed law, compare with its CDF, and look at the largest
# conductances in a box. Lazy and tabulated fields agree edge by edge.

# %%
import numpy as np

from rcmlab.env import ConductanceField, LatticeRegion, iid_conductances, make_tail_law
from rcmlab.experiments import ks_band, law_ks

law = make_tail_law(3)
x = iid_conductances(law, seed=7, count=200_000)
print("atom fraction", np.mean(x == 1.0), "expected", 1 - law.tail_c)
print("KS", law_ks(law, x), "99% band", ks_band(len(x)))

# %%
# empirical survival against tail_c / u
for u in (2, 10, 100, 1000):
    print(u, np.mean(x > u), law.tail_c / u)

# %%
f = ConductanceField(law, seed=7)
box = LatticeRegion(3, 6)
table = f.box_edges(box)
print("largest edges in the box:", np.sort(table.ravel())[-5:])
cached = f.cached(6)
print("cache agrees with lazy draws:", np.array_equal(cached.box_edges(box), table))
