"""Sieve two-stage least squares.

Stage 1 regresses X-features on Z-features,
``A = E_n[phi psi^T] E_n[psi psi^T]^+``; stage 2 regresses ``Y`` on the
predicted features ``F = A psi(Z)``. Both stages accept a ridge penalty; at
zero penalty the minimum-norm (pseudo-inverse) solution is used. All
moments are plain ``1/n`` averages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import DEFAULT_PINV_TOL, ridge_solve
from .operator import Grid, SpectralOperator


@dataclass(frozen=True)
class TwoStageConfig:
    """Ridge penalties for the two stages.

    With ``relative=True`` each penalty is multiplied by the mean eigenvalue
    (trace / dimension) of the Gram matrix it regularizes.
    """

    eta: float = 0.0
    lam: float = 0.0
    pinv_tol: float = DEFAULT_PINV_TOL
    relative: bool = False

    def __post_init__(self):
        if self.eta < 0 or self.lam < 0 or self.pinv_tol < 0:
            raise ValueError("eta, lam and pinv_tol must be nonnegative")


@dataclass(frozen=True, eq=False)
class TwoStageFit:
    A: np.ndarray
    theta: np.ndarray
    phi: object = None
    psi: object = None

    def __call__(self, x) -> np.ndarray:
        return predict(self, x)


def _check_rows(*mats):
    n = {np.shape(m)[0] for m in mats}
    if len(n) != 1:
        raise ValueError(f"row counts differ: {sorted(n)}")


def _trace_scale(gram):
    return float(np.trace(gram)) / gram.shape[0]


def stage1_from_moments(cross, gram_psi, eta=0.0, tol=DEFAULT_PINV_TOL) -> np.ndarray:
    """``A = cross (gram_psi + eta I)^{-1}`` with ``cross = E[phi psi^T]``."""
    cross = np.atleast_2d(np.asarray(cross, dtype=float))
    gram_psi = np.atleast_2d(np.asarray(gram_psi, dtype=float))
    if cross.shape[1] != gram_psi.shape[0]:
        raise ValueError("cross-moment and Gram dimensions differ")
    # A^T solves (G + eta I) A^T = cross^T since G is symmetric
    return ridge_solve(gram_psi, cross.T, eta, tol).T


def stage2_from_moments(A, gram_psi, psi_y, lam=0.0, tol=DEFAULT_PINV_TOL) -> np.ndarray:
    """``theta`` from ``E[F F^T] = A G A^T`` and ``E[F Y] = A E[psi Y]``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    psi_y = np.asarray(psi_y, dtype=float).ravel()
    if A.shape[1] != psi_y.size or A.shape[1] != np.shape(gram_psi)[0]:
        raise ValueError("stage-1 matrix does not match psi dimensions")
    gram_f = A @ gram_psi @ A.T
    return ridge_solve(0.5 * (gram_f + gram_f.T), A @ psi_y, lam, tol)


def stage1(phi_x, psi_z, eta: float = 0.0, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Stage-1 coefficient matrix from feature matrices (rows are samples)."""
    phi_x, psi_z = np.atleast_2d(phi_x), np.atleast_2d(psi_z)
    _check_rows(phi_x, psi_z)
    n = phi_x.shape[0]
    if n < 1:
        raise ValueError("need at least one sample")
    return stage1_from_moments(phi_x.T @ psi_z / n, psi_z.T @ psi_z / n, eta, tol)


def stage2(A, psi_z, y, lam: float = 0.0, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Stage-2 coefficients: least squares of ``y`` on ``F = psi_z A^T``."""
    psi_z = np.atleast_2d(psi_z)
    y = np.asarray(y, dtype=float).ravel()
    _check_rows(psi_z, y)
    A = np.atleast_2d(A)
    if A.shape[1] != psi_z.shape[1]:
        raise ValueError("stage-1 matrix does not match psi dimensions")
    f = psi_z @ A.T
    n = y.size
    gram_f = f.T @ f / n
    return ridge_solve(0.5 * (gram_f + gram_f.T), f.T @ y / n, lam, tol)


def saddle_solve(phi_x, psi_z, y, lam_saddle: float, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Closed form of the min-max IV estimator.

    Solving the inner maximization over the Z-side test function gives
    ``(B^T G^+ B + 2 lam I) theta = B^T G^+ b`` with ``G = E[psi psi^T]``,
    ``B = E[psi phi^T]``, ``b = E[psi Y]``. It coincides with
    ``stage2(stage1(., ., 0), ., y, 2 * lam_saddle)``.
    """
    if lam_saddle <= 0:
        raise ValueError("lam_saddle must be positive")
    phi_x, psi_z = np.atleast_2d(phi_x), np.atleast_2d(psi_z)
    y = np.asarray(y, dtype=float).ravel()
    _check_rows(phi_x, psi_z, y)
    n = y.size
    g = psi_z.T @ psi_z / n
    b_mat = psi_z.T @ phi_x / n
    b = psi_z.T @ y / n
    g_b = ridge_solve(g, np.column_stack([b_mat, b]), 0.0, tol)
    lhs = b_mat.T @ g_b[:, :-1]
    return ridge_solve(0.5 * (lhs + lhs.T), b_mat.T @ g_b[:, -1], 2.0 * lam_saddle, tol)


def fit(phi, psi, samples, config: TwoStageConfig = TwoStageConfig()) -> TwoStageFit:
    """Two-stage fit of ``samples`` (needs ``x``, ``z``, ``y``) with feature maps ``phi``, ``psi``."""
    phi_x, psi_z = phi(samples.x), psi(samples.z)
    y = np.asarray(samples.y, dtype=float)
    n = y.size
    return _fit_moments(phi_x.T @ psi_z / n, psi_z.T @ psi_z / n, psi_z.T @ y / n,
                        config, phi, psi)


def _fit_moments(cross, gram_psi, psi_y, config, phi, psi):
    eta, lam = config.eta, config.lam
    if config.relative:
        eta *= _trace_scale(gram_psi)
    A = stage1_from_moments(cross, gram_psi, eta, config.pinv_tol)
    if config.relative:
        lam *= _trace_scale(A @ gram_psi @ A.T)
    theta = stage2_from_moments(A, gram_psi, psi_y, lam, config.pinv_tol)
    return TwoStageFit(A, theta, phi, psi)


def population_moments(phi, psi, op: SpectralOperator, h0, grid: Grid):
    """Exact-in-quadrature moments ``E[phi psi^T]``, ``E[psi psi^T]``, ``E[psi Y]``.

    ``E[psi(Z) Y] = E[psi(Z) h0(X)]`` because the outcome noise is
    mean-independent of Z.
    """
    t = grid.nodes
    f, g = phi(t), psi(t)
    # E[f(X) g(Z)^T] = sum_jk w^2 p(x_j, z_k) f_j g_k^T; p is separable
    v, u = op.eval_right(t), op.eval_left(t)
    n = grid.n_points
    cross = np.outer(f.mean(axis=0), g.mean(axis=0)) + (f.T @ v / n) @ np.diag(op.sigma) @ (u.T @ g / n)
    gram_psi = g.T @ g / n
    hx = h0(t)
    psi_y = np.mean(g, axis=0) * np.mean(hx) + (u.T @ g / n).T @ (op.sigma * (v.T @ hx / n))
    return cross, gram_psi, psi_y


def population_fit(phi, psi, op: SpectralOperator, h0, grid: Grid,
                   config: TwoStageConfig = TwoStageConfig()) -> TwoStageFit:
    """Two-stage fit with empirical moments replaced by their population values."""
    return _fit_moments(*population_moments(phi, psi, op, h0, grid), config, phi, psi)


def predict(fit: TwoStageFit, x) -> np.ndarray:
    return fit.phi(x) @ fit.theta


MIN_ERROR_RESOLUTION = 1024


def l2_error(fit, h0, grid: Grid | None = None) -> float:
    """``||h_hat - h0||`` in ``L2(uniform[0, 2pi])`` by quadrature; ``fit`` may be any callable."""
    grid = Grid(4096) if grid is None else grid
    if grid.n_points < MIN_ERROR_RESOLUTION:
        raise ValueError(f"grid resolution must be >= {MIN_ERROR_RESOLUTION}")
    t = grid.nodes
    return float(np.sqrt(np.mean((fit(t) - h0(t)) ** 2)))
