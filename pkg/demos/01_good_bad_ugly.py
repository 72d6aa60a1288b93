"""Three regimes of sieve 2SLS with oracle spectral features.

Run with ``python demos/01_good_bad_ugly.py``. Each ``# %%`` block is a cell.
"""

# %% Imports
import numpy as np

from snpiv import (
    Scenario,
    TwoStageConfig,
    build_scenario,
    diagnose,
    fit,
    generate,
    l2_error,
    oracle_factorization,
)
from snpiv.diagnostics import classify_regime, projection_residual
from snpiv.features import X_SIDE, OracleFeatures
from snpiv.synthetic import StructuralFunction

# %% Scenarios
# c_sigma sets how fast singular values decay (1.0 = flat, 0.1 = tenfold drop).
# c_alpha sets how fast h0's coefficients decay (0.1 = concentrated on the lead directions).
scenarios = {
    "good": Scenario(c_sigma=1.0, c_alpha=0.1),
    "bad": Scenario(c_sigma=0.1, c_alpha=0.1),
}
for name, s in scenarios.items():
    op, h0 = build_scenario(s)
    print(f"{name:5s} sigma = {np.round(op.sigma, 4)} (scale {op.scale:.3f})")
    print(f"      alpha = {np.round(h0.alpha, 3)}")

# %% Fit with all r oracle directions
# A flat spectrum ties at every interior cut, so the diagnostics use k = r.
cfg = TwoStageConfig(1e-8, 1e-8, relative=True)
for name, s in scenarios.items():
    op, h0 = build_scenario(s)
    data = generate(s, 5000)
    phi, psi = oracle_factorization(op, op.r)
    est = fit(phi, psi, data, cfg)
    rep = diagnose(phi, psi, op, h0, op.r, thresholds=(0.3, 0.1))
    print(f"{name:5s} L2 error {l2_error(est, h0):.3f}  tau {rep.tau:.1f}  "
          f"tail {rep.tail_norm:.3f}  regime {rep.regime.value}")

# %% The ugly regime: h0 lives where the instrument carries no signal
op, _ = build_scenario(Scenario(c_sigma=1.0))
h_ugly = StructuralFunction(np.eye(op.r)[-1], op)  # only the last direction
k = 5
phi = OracleFeatures(op, X_SIDE, k)
print(f"ugly  tail {projection_residual(phi, h_ugly):.3f}  "
      f"regime {classify_regime(projection_residual(phi, h_ugly), op.sigma[k - 1]).value}")
# No amount of data fixes this: the first k features cannot represent h0.
