"""Learning spectral features by contrastive training, then running 2SLS on them.

Run with ``python demos/02_learned_features.py`` (about a minute on one core).
"""

# %% Imports
import numpy as np

from snpiv import ContrastiveConfig, Scenario, build_scenario, generate, train
from snpiv.contrastive import population_loss_quadrature
from snpiv.diagnostics import epsilon_hat, projection_residual, sandwich_check, tau_sieve
from snpiv.operator import hs_norm
from snpiv.twostage import TwoStageConfig, fit, l2_error

# %% A well-conditioned scenario and unlabeled pairs (z, x)
s = Scenario(c_sigma=1.0, c_alpha=0.5)
op, h0 = build_scenario(s)
unlabeled = generate(s, 20_000, rng=np.random.default_rng(1), labeled=False)
print(f"||T||_HS^2 = {hs_norm(op) ** 2:.4f}, tail beyond the constant = {np.sum(op.sigma ** 2):.4f}")

# %% Train a small feature pair
cfg = ContrastiveConfig(feature_dim=10, hidden=(32, 32), epochs=30, batch_size=256)
phi, psi, history = train(cfg, unlabeled)
for h in history[::10]:
    print(f"epoch {h.epoch:3d}  loss {h.empirical_loss:+.4f}  regularizer {h.regularizer:.3f}")
print(f"population loss {population_loss_quadrature(phi, psi, op):.4f} "
      f"(best possible with 10 + 1 features: 0)")
# Thirty epochs leave a visible gap to the optimum. The harness trains for 200
# epochs at this batch size and shrinks stage 2 to tame the leftover error.

# %% How close is the learned operator to T?
k = op.r
eps = epsilon_hat(phi, psi, op, k)
tau = tau_sieve(phi, op)
print(f"eps_hat {eps:.4f}  tau {tau:.2f}  1/sigma_min {1 / op.sigma[-1]:.2f}  "
      f"sandwich {sandwich_check(tau, op.sigma[-1], eps)}")
print(f"projection residual of h0 on the learned span: {projection_residual(phi, h0):.4f}")

# %% 2SLS on the learned features
data = generate(s, 5000, rng=np.random.default_rng(2))
est = fit(phi, psi, data, TwoStageConfig(1e-8, 1e-2, relative=True))
print(f"L2 error with learned features: {l2_error(est, h0):.3f}")
