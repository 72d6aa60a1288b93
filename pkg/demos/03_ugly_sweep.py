"""How the error floor grows as fewer directions carry instrument signal.

Run with ``python demos/03_ugly_sweep.py``.
"""

# %% Imports
from snpiv.harness import UglyConfig, run_ugly_sweep

# %% Sweep k = number of signal-carrying directions out of 10
rows = run_ugly_sweep(11, 1.0, range(11), UglyConfig(n_labeled=10_000))
print(" k   floor   population   finite (n = 1e4)")
for r in rows:
    print(f"{r.k:2d}  {r.floor:.4f}   {r.population_residual:.4f}       {r.finite_residual:.4f}")
# The population residual sits exactly on the floor sqrt(1 - k/10): the part of
# h0 outside the identified directions is invisible to the instrument. The
# finite-sample residual adds estimation variance, which grows with k because
# the nonnegativity rescale keeps every signal-carrying sigma near 0.1.
