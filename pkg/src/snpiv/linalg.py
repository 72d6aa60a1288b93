"""Dense real linear algebra used throughout the package.

Matrices are plain ``numpy.ndarray`` objects. The functions here add the
input validation and tolerance conventions the estimators rely on; the heavy
lifting is delegated to LAPACK through numpy.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

DEFAULT_PINV_TOL = 1e-10


class SvdResult(NamedTuple):
    left: np.ndarray
    singular: np.ndarray
    right_t: np.ndarray


def _as_finite_matrix(m, name="m"):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def svd(m) -> SvdResult:
    """Thin SVD with singular values sorted nonincreasing.

    Singular values below ``eps * max(shape) * s_max`` are set to exactly
    zero so rank-deficient inputs report a clean rank.
    """
    m = _as_finite_matrix(m)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    if s.size:
        cut = np.finfo(float).eps * max(m.shape) * s[0]
        s = np.where(s > cut, s, 0.0)
    return SvdResult(u, s, vt)


def pinv(m, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse.

    Singular values at or below ``tol * s_max`` are treated as zero.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    u, s, vt = svd(m)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((vt.shape[1], u.shape[0]))
    keep = s > tol * s[0]
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (vt.T * inv) @ u.T


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal ``n x n`` matrix.

    QR of a standard Gaussian matrix, with columns sign-corrected so that
    ``R`` has a positive diagonal.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def eig_sym(m, sym_tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix, eigenvalues nonincreasing."""
    m = _as_finite_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix must be square, got {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if np.max(np.abs(m - m.T), initial=0.0) > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return w[::-1], v[:, ::-1]


def ridge_solve(g, b, lam: float = 0.0, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Solve ``(g + lam I) x = b`` for symmetric PSD ``g``.

    With ``lam == 0`` the minimum-norm solution ``pinv(g) @ b`` is returned.
    ``b`` may be a vector or a matrix of right-hand sides.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    w, _ = eig_sym(g)
    if w.size and w[-1] < -1e-8:
        raise ValueError(f"g is not positive semidefinite (eigenvalue {w[-1]:.3e})")
    g = np.asarray(g, dtype=float)
    b = np.asarray(b, dtype=float)
    if lam == 0.0:
        return pinv(g, tol) @ b
    return np.linalg.solve(g + lam * np.eye(g.shape[0]), b)
