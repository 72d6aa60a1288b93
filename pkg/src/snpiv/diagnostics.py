"""Quantities that govern the 2SLS error: ill-posedness, alignment, feature quality.

All functions need the true operator and are evaluated by quadrature; none
of them can be computed from data alone.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .linalg import eig_sym
from .operator import (
    Grid,
    SpectralOperator,
    grid_operator_matrix,
    operator_matrix,
    reference_basis,
    truncate,
)

GRAM_FLOOR = 1e-10
DEFAULT_THRESHOLDS = (0.3, 0.2)


class Regime(str, enum.Enum):
    GOOD = "good"
    BAD = "bad"
    UGLY = "ugly"


def _gram(values, n):
    g = values.T @ values / n
    return 0.5 * (g + g.T)


def tau_sieve(span, op: SpectralOperator, grid: Grid | None = None) -> float:
    """Sieve measure of ill-posedness of ``span`` (a feature map on X).

    The inverse square root of the smallest eigenvalue of
    ``K_ij = <T e_i, T e_j>`` for a quadrature-orthonormal basis ``e`` of the span.
    """
    grid = Grid(4096) if grid is None else grid
    t = grid.nodes
    values = span(t)
    w, vecs = eig_sym(_gram(values, grid.n_points))
    if w[-1] <= GRAM_FLOOR:
        raise ValueError(f"span is rank deficient: smallest Gram eigenvalue {w[-1]:.3e}")
    ortho = values @ (vecs / np.sqrt(w))
    image = op.conditional_expectation(ortho, grid, t)
    k = eig_sym(_gram(image, grid.n_points))[0]
    return 1.0 / math.sqrt(max(k[-1], 0.0)) if k[-1] > 0 else math.inf


def tail_norm(alpha, k: int) -> float:
    """Norm of the coefficients of ``h0`` beyond the first ``k`` singular directions."""
    alpha = np.asarray(alpha, dtype=float).ravel()
    if not 0 <= k <= alpha.size:
        raise ValueError(f"k must lie in [0, {alpha.size}]")
    return float(np.linalg.norm(alpha[k:]))


def projection_residual(span, h0, grid: Grid | None = None) -> float:
    """``||h0 - Pi h0||`` for the L2 projection onto the span of a feature map."""
    grid = Grid(4096) if grid is None else grid
    t = grid.nodes
    values, target = span(t), h0(t)
    coef, *_ = np.linalg.lstsq(values, target, rcond=None)
    return float(np.sqrt(np.mean((target - values @ coef) ** 2)))


def epsilon_hat(phi, psi, op: SpectralOperator, k: int, grid: Grid | None = None) -> float:
    """Operator-norm distance between ``sum psi_i (x) phi_i`` and the truncation of ``op`` at ``k``.

    Both operators are represented in a shared basis (singular functions,
    sine tail, plus whatever the feature maps need).
    """
    grid = Grid(1024) if grid is None else grid
    target = truncate(op, k)
    basis = reference_basis(op, grid, extra_x=[phi], extra_z=[psi])
    diff = grid_operator_matrix(phi, psi, op, grid, basis) - operator_matrix(target, basis)
    return float(np.linalg.norm(diff, 2))


def _whitened_sup(values, n):
    w, vecs = eig_sym(_gram(values, n))
    if w[-1] <= GRAM_FLOOR:
        raise ValueError(f"feature Gram matrix is singular: smallest eigenvalue {w[-1]:.3e}")
    white = values @ (vecs / np.sqrt(w))
    return float(np.sqrt(np.max(np.sum(white**2, axis=1))))


def zeta(phi, psi, grid: Grid | None = None) -> float:
    """Largest grid value of the whitened feature norm, over both sides."""
    grid = Grid(4096) if grid is None else grid
    t = grid.nodes
    return max(_whitened_sup(phi(t), grid.n_points), _whitened_sup(psi(t), grid.n_points))


def sandwich_check(tau_value: float, sigma_k: float, eps: float) -> bool | None:
    """Check ``1/sigma_k <= tau <= 1/(sigma_k - 2 eps)`` with relative slack 1e-6.

    Returns ``None`` (indeterminate) when ``eps >= (1 - 1/sqrt 2) sigma_k``,
    where the bracket is not guaranteed.
    """
    if eps >= (1.0 - 1.0 / math.sqrt(2.0)) * sigma_k:
        return None
    lower = (1.0 - 1e-6) / sigma_k
    upper = (1.0 + 1e-6) / (sigma_k - 2.0 * eps)
    return bool(lower <= tau_value <= upper)


def classify_regime(tail: float, sigma_cut: float, thresholds=DEFAULT_THRESHOLDS) -> Regime:
    """Ugly if the alignment tail exceeds ``t_align``, else bad if ``sigma_cut < t_decay``, else good."""
    t_align, t_decay = thresholds
    if not (0 < t_align < 1 and 0 < t_decay < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    if tail > t_align:
        return Regime.UGLY
    if sigma_cut < t_decay:
        return Regime.BAD
    return Regime.GOOD


@dataclass(frozen=True)
class DiagnosticsReport:
    tau: float
    tail_norm: float
    epsilon_hat: float
    zeta: float
    zeta_grid_error: float
    sigma_cut: float
    regime: Regime
    thresholds: tuple = DEFAULT_THRESHOLDS

    FIELDS = ("tau", "tail_norm", "epsilon_hat", "zeta", "zeta_grid_error", "sigma_cut",
              "regime", "t_align", "t_decay")

    def as_row(self) -> dict:
        return {
            "tau": self.tau, "tail_norm": self.tail_norm, "epsilon_hat": self.epsilon_hat,
            "zeta": self.zeta, "zeta_grid_error": self.zeta_grid_error,
            "sigma_cut": self.sigma_cut, "regime": self.regime.value,
            "t_align": self.thresholds[0], "t_decay": self.thresholds[1],
        }


def diagnose(phi, psi, op: SpectralOperator, h0, k: int, grid: Grid | None = None,
             thresholds=DEFAULT_THRESHOLDS) -> DiagnosticsReport:
    """Full report for a feature pair against the truncation of ``op`` at ``k``.

    ``k`` counts nonconstant directions, so ``sigma_cut = op.sigma[k - 1]``.
    The tail is the residual of projecting ``h0`` on the span of ``phi``.
    """
    grid = Grid(4096) if grid is None else grid
    if not 1 <= k <= op.r:
        raise ValueError(f"k must lie in [1, {op.r}]")
    z = zeta(phi, psi, grid)
    z_fine = zeta(phi, psi, Grid(2 * grid.n_points))
    tail = projection_residual(phi, h0, grid)
    sigma_cut = float(op.sigma[k - 1])
    return DiagnosticsReport(
        tau=tau_sieve(phi, op, grid),
        tail_norm=tail,
        epsilon_hat=epsilon_hat(phi, psi, op, k, Grid(max(1024, grid.n_points // 4))),
        zeta=z,
        zeta_grid_error=abs(z_fine - z),
        sigma_cut=sigma_cut,
        regime=classify_regime(tail, sigma_cut, thresholds),
        thresholds=tuple(thresholds),
    )
