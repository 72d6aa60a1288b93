"""Conditional expectation operators with an exactly known SVD.

The operator acts between ``L2(uniform[0, 2pi])`` spaces on X and Z and is

    T = 1_Z (x) 1_X + sum_i sigma_i u_i (x) v_i,

with ``v(x) = rot_x @ sqrt(2) sin(k x)`` and ``u(z) = rot_z @ sqrt(2) sin(k z)``
for ``k = 1..r``. The joint density with respect to the product of the
uniform marginals is ``p(x, z) = 1 + sum_i sigma_i u_i(z) v_i(x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from .linalg import random_orthogonal

TWO_PI = 2.0 * math.pi
SQRT2 = math.sqrt(2.0)

# grid used for density scans (nonnegativity and sampler envelope)
SCAN_RESOLUTION = 512


class TieError(ValueError):
    """Raised when a truncation index falls inside a block of equal singular values."""


@dataclass(frozen=True)
class Grid:
    """Uniform probability quadrature on ``[0, 2pi)``.

    Nodes are ``2 pi j / n`` for ``j = 0..n-1``; the rule is exact for
    trigonometric polynomials of degree below ``n``.
    """

    n_points: int

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")

    @property
    def nodes(self) -> np.ndarray:
        return TWO_PI * np.arange(self.n_points) / self.n_points

    @property
    def weight(self) -> float:
        return 1.0 / self.n_points

    def integrate(self, values, axis=0):
        """Quadrature mean of ``values`` along ``axis``."""
        return np.mean(values, axis=axis)


@dataclass(frozen=True)
class CoeffVector:
    """Coefficients on ``{1, basis_1, ..., basis_r}`` (v-basis on X or u-basis on Z)."""

    constant: float
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float).ravel()
        if not (math.isfinite(self.constant) and np.all(np.isfinite(coeffs))):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "coeffs", coeffs)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def sines(t, r: int) -> np.ndarray:
    """``sqrt(2) sin(k t)`` for ``k = 1..r``, shape ``t.shape + (r,)``."""
    t = np.asarray(t, dtype=float)
    return SQRT2 * np.sin(t[..., None] * np.arange(1, r + 1))


def _check_domain(t):
    t = np.asarray(t, dtype=float)
    if not np.all((t >= 0.0) & (t <= TWO_PI)):
        raise ValueError("points must lie in [0, 2pi]")
    return t


@dataclass(frozen=True, eq=False)
class SpectralOperator:
    """Conditional expectation operator given by its singular system.

    ``sigma`` holds the ``r`` nonconstant singular values (the constant
    triplet with singular value 1 is implicit). ``scale`` records the factor
    applied to the requested singular values to keep the density
    nonnegative; ``seed`` is the seed the rotations were drawn from, if any.
    ``check_density=False`` admits kernels that are not densities, as
    produced by :func:`truncate`.
    Use :func:`build_operator` or :func:`random_operator` to construct one
    with the nonnegativity rescale applied.
    """

    sigma: np.ndarray
    rot_x: np.ndarray
    rot_z: np.ndarray
    scale: float = 1.0
    seed: int | None = None
    check_density: bool = field(default=True, repr=False)
    _extrema: tuple = field(default=None, repr=False)

    def __post_init__(self):
        sigma = _frozen(self.sigma).ravel()
        r = sigma.size
        rot_x, rot_z = _frozen(self.rot_x), _frozen(self.rot_z)
        if r < 1:
            raise ValueError("need at least one nonconstant singular triplet")
        if np.any(sigma < 0) or np.any(sigma > 1) or np.any(np.diff(sigma) > 0):
            raise ValueError("sigma must be nonincreasing in [0, 1]")
        for name, rot in (("rot_x", rot_x), ("rot_z", rot_z)):
            if rot.shape != (r, r):
                raise ValueError(f"{name} must be {r}x{r}, got {rot.shape}")
            if np.max(np.abs(rot.T @ rot - np.eye(r))) > 1e-12:
                raise ValueError(f"{name} is not orthogonal")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "rot_x", rot_x)
        object.__setattr__(self, "rot_z", rot_z)
        gmin, gmax = _scan_kernel(sigma, rot_x, rot_z)
        if self.check_density and 1.0 + gmin < -1e-9:
            raise ValueError(f"density is negative on the scan grid (min {1 + gmin:.3e})")
        object.__setattr__(self, "_extrema", (1.0 + gmin, 1.0 + gmax))

    @property
    def r(self) -> int:
        return self.sigma.size

    @property
    def density_min(self) -> float:
        """Minimum of the density on the 512 x 512 scan grid."""
        return self._extrema[0]

    @property
    def density_max(self) -> float:
        """Maximum of the density on the 512 x 512 scan grid."""
        return self._extrema[1]

    def eval_right(self, x) -> np.ndarray:
        """Right singular functions ``v_1..v_r`` at ``x``; shape ``x.shape + (r,)``."""
        return sines(_check_domain(x), self.r) @ self.rot_x.T

    def eval_left(self, z) -> np.ndarray:
        """Left singular functions ``u_1..u_r`` at ``z``; shape ``z.shape + (r,)``."""
        return sines(_check_domain(z), self.r) @ self.rot_z.T

    def density(self, x, z) -> np.ndarray:
        """Joint density w.r.t. the product of uniform marginals, broadcast over x and z."""
        v = self.eval_right(x)
        u = self.eval_left(z)
        return 1.0 + np.sum(v * self.sigma * u, axis=-1)

    def density_matrix(self, x, z) -> np.ndarray:
        """``p(x_j, z_k)`` for all pairs: rows index ``x``, columns index ``z``."""
        v = self.eval_right(np.ravel(x))
        u = self.eval_left(np.ravel(z))
        return 1.0 + (v * self.sigma) @ u.T

    def conditional_expectation(self, values, grid: Grid, z) -> np.ndarray:
        """``E[h(X) | Z = z]`` for ``h`` tabulated on ``grid`` (values shape ``(N,)`` or ``(N, d)``).

        Quadrature of ``h(x) p(x, z)`` over x, using the separable form of p.
        """
        values = np.asarray(values, dtype=float)
        v = self.eval_right(grid.nodes)
        flat = values.reshape(len(v), -1)
        mean = grid.integrate(flat)
        proj = v.T @ flat / grid.n_points  # (r, d)
        u = self.eval_left(np.ravel(z))
        out = mean.reshape(1, -1) + (u * self.sigma) @ proj
        return out if values.ndim > 1 else out[:, 0]

    def with_sigma(self, sigma, check_density: bool = True) -> "SpectralOperator":
        return SpectralOperator(sigma, self.rot_x, self.rot_z, self.scale, self.seed, check_density)


def _kernel_factors(sigma, rot_x, rot_z, n):
    nodes = TWO_PI * np.arange(n) / n
    s = sines(nodes, sigma.size)
    return (s @ rot_x.T) * sigma, s @ rot_z.T


def _scan_kernel(sigma, rot_x, rot_z, n=SCAN_RESOLUTION):
    vs, u = _kernel_factors(sigma, rot_x, rot_z, n)
    g = vs @ u.T
    return float(g.min()), float(g.max())


def _polished_kernel_min(sigma, rot_x, rot_z, n=SCAN_RESOLUTION, n_starts=8):
    """Minimum of ``sum sigma_i u_i(z) v_i(x)``: grid scan refined by L-BFGS-B."""
    vs, u = _kernel_factors(sigma, rot_x, rot_z, n)
    g = vs @ u.T
    best = float(g.min())
    if not np.any(sigma):
        return best
    k = np.arange(1, sigma.size + 1)
    a = rot_x.T @ (sigma[:, None] * rot_z)  # kernel = s(x)^T a s(z)

    def fun(p):
        sx, sz = SQRT2 * np.sin(k * p[0]), SQRT2 * np.sin(k * p[1])
        dx, dz = SQRT2 * k * np.cos(k * p[0]), SQRT2 * k * np.cos(k * p[1])
        return sx @ a @ sz, np.array([dx @ a @ sz, sx @ a @ dz])

    flat = np.argsort(g, axis=None)[:n_starts]
    nodes = TWO_PI * np.arange(n) / n
    for idx in flat:
        i, j = np.unravel_index(idx, g.shape)
        res = optimize.minimize(
            fun, [nodes[i], nodes[j]], jac=True, method="L-BFGS-B",
            bounds=[(0.0, TWO_PI), (0.0, TWO_PI)],
        )
        best = min(best, float(res.fun))
    return best


def build_operator(sigma, rot_x, rot_z, floor: float = 0.0, seed: int | None = None) -> SpectralOperator:
    """Construct an operator, shrinking ``sigma`` if needed to keep ``p >= floor``.

    The density minimum is located by a 512 x 512 scan polished with a local
    optimizer. If ``1 + min`` falls below ``floor`` the whole ``sigma`` vector
    is multiplied by the largest factor that restores ``min p = floor``; the
    factor is stored as ``op.scale``.
    """
    if not 0.0 <= floor < 1.0:
        raise ValueError("floor must lie in [0, 1)")
    sigma = np.asarray(sigma, dtype=float).ravel()
    rot_x = np.asarray(rot_x, dtype=float)
    rot_z = np.asarray(rot_z, dtype=float)
    gmin = _polished_kernel_min(sigma, rot_x, rot_z)
    scale = 1.0
    if 1.0 + gmin < floor:
        scale = (1.0 - floor) / (-gmin)
    return SpectralOperator(sigma * scale, rot_x, rot_z, scale=scale, seed=seed)


def random_operator(sigma, seed: int, floor: float = 0.0) -> SpectralOperator:
    """Operator with Haar-random rotations drawn from ``default_rng(seed)`` (X first, then Z)."""
    sigma = np.asarray(sigma, dtype=float).ravel()
    rng = np.random.default_rng(seed)
    rot_x = random_orthogonal(sigma.size, rng)
    rot_z = random_orthogonal(sigma.size, rng)
    return build_operator(sigma, rot_x, rot_z, floor=floor, seed=seed)


def apply(op: SpectralOperator, h: CoeffVector) -> CoeffVector:
    """Image of ``h`` (v-basis coefficients) under T, as u-basis coefficients."""
    if h.coeffs.size != op.r:
        raise ValueError(f"expected {op.r} coefficients, got {h.coeffs.size}")
    return CoeffVector(h.constant, op.sigma * h.coeffs)


def hs_norm(op: SpectralOperator) -> float:
    return math.sqrt(1.0 + float(np.sum(op.sigma**2)))


def truncate(op: SpectralOperator, k: int) -> SpectralOperator:
    """Keep the constant triplet and the first ``k`` nonconstant ones.

    The cut must fall at a strict gap, ``sigma_k > sigma_{k+1}`` (with the
    constant's singular value 1 in front), otherwise :class:`TieError`.
    The truncated kernel need not be a density, so it is not checked for
    nonnegativity.
    """
    if not 0 <= k <= op.r:
        raise ValueError(f"k must lie in [0, {op.r}]")
    if k < op.r:
        above = 1.0 if k == 0 else op.sigma[k - 1]
        if not above > op.sigma[k]:
            raise TieError(f"singular values tie at the cut k={k} ({above} == {op.sigma[k]})")
    sigma = op.sigma.copy()
    sigma[k:] = 0.0
    return op.with_sigma(sigma, check_density=False)


def save_operator(op: SpectralOperator, path) -> None:
    """Write ``op`` as a ``key=value`` text file; floats use round-trip ``repr``."""
    def join(a):
        return ",".join(repr(float(v)) for v in np.ravel(a))

    lines = [
        f"r={op.r}",
        f"sigma={join(op.sigma)}",
        f"rot_x={join(op.rot_x)}",
        f"rot_z={join(op.rot_z)}",
        f"scale={float(op.scale)!r}",
        f"seed={'none' if op.seed is None else int(op.seed)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_operator(path) -> SpectralOperator:
    fields = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        fields[key.strip()] = value.strip()
    try:
        r = int(fields["r"])
        sigma = np.array([float(v) for v in fields["sigma"].split(",")])
        rot_x = np.array([float(v) for v in fields["rot_x"].split(",")]).reshape(r, r)
        rot_z = np.array([float(v) for v in fields["rot_z"].split(",")]).reshape(r, r)
        scale = float(fields["scale"])
        seed = None if fields["seed"] == "none" else int(fields["seed"])
    except KeyError as exc:
        raise ValueError(f"{path}: missing field {exc}") from None
    return SpectralOperator(sigma, rot_x, rot_z, scale=scale, seed=seed)


# --- finite-basis operator matrices -----------------------------------------


@dataclass(frozen=True, eq=False)
class ReferenceBasis:
    """Quadrature-orthonormal bases on X and Z tabulated on ``grid``.

    Columns ``0..r`` of ``x`` are ``1, v_1..v_r`` and of ``z`` are
    ``1, u_1..u_r``; sine tail functions and any directions needed to
    represent extra feature maps follow.
    """

    grid: Grid
    x: np.ndarray
    z: np.ndarray

    def coords_x(self, values) -> np.ndarray:
        return self.x.T @ np.asarray(values, dtype=float) / self.grid.n_points

    def coords_z(self, values) -> np.ndarray:
        return self.z.T @ np.asarray(values, dtype=float) / self.grid.n_points


def _extend(basis, values, rel_tol=1e-10):
    n = basis.shape[0]
    values = np.asarray(values, dtype=float).reshape(n, -1)
    for _ in range(2):  # second pass re-orthogonalizes
        resid = values - basis @ (basis.T @ values / n)
        scale = np.sqrt(np.sum(values**2) / n) or 1.0
        u, s, _ = np.linalg.svd(resid / math.sqrt(n), full_matrices=False)
        keep = s > rel_tol * scale
        if not np.any(keep):
            break
        basis = np.hstack([basis, u[:, keep] * math.sqrt(n)])
    return basis


MIN_OPERATOR_RESOLUTION = 512


def reference_basis(op: SpectralOperator, grid: Grid, n_tail: int = 20,
                    extra_x=(), extra_z=()) -> ReferenceBasis:
    """Singular basis of ``op`` plus ``n_tail`` sine tail functions per side.

    Feature maps in ``extra_x``/``extra_z`` are tabulated on the grid and the
    basis is extended with their components orthogonal to it, so that any of
    them is represented exactly in the resulting coordinates.
    """
    if grid.n_points < MIN_OPERATOR_RESOLUTION:
        raise ValueError(f"grid resolution must be >= {MIN_OPERATOR_RESOLUTION}")
    t = grid.nodes
    tail = SQRT2 * np.sin(t[:, None] * np.arange(op.r + 1, op.r + n_tail + 1))
    ones = np.ones((t.size, 1))
    bx = np.hstack([ones, op.eval_right(t), tail])
    bz = np.hstack([ones, op.eval_left(t), tail])
    for fmap in extra_x:
        bx = _extend(bx, fmap(t))
    for fmap in extra_z:
        bz = _extend(bz, fmap(t))
    return ReferenceBasis(grid, bx, bz)


def grid_operator_matrix(phi, psi, op: SpectralOperator, grid: Grid,
                         basis: ReferenceBasis | None = None) -> np.ndarray:
    """Matrix of ``sum_i psi_i (x) phi_i`` in a reference basis (rows: Z, columns: X).

    Without an explicit ``basis`` one is built from ``op`` and the two maps.
    """
    if basis is None:
        basis = reference_basis(op, grid, extra_x=[phi], extra_z=[psi])
    elif basis.grid.n_points < MIN_OPERATOR_RESOLUTION:
        raise ValueError(f"grid resolution must be >= {MIN_OPERATOR_RESOLUTION}")
    t = basis.grid.nodes
    c_phi = basis.coords_x(phi(t))
    c_psi = basis.coords_z(psi(t))
    return c_psi @ c_phi.T


def operator_matrix(op: SpectralOperator, basis: ReferenceBasis) -> np.ndarray:
    """Matrix of ``op`` itself in ``basis``: ``diag(1, sigma)`` padded with zeros.

    ``basis`` must come from :func:`reference_basis` for an operator sharing
    the rotations of ``op`` (e.g. ``op`` or a truncation of it).
    """
    m = np.zeros((basis.z.shape[1], basis.x.shape[1]))
    m[0, 0] = 1.0
    idx = np.arange(1, op.r + 1)
    m[idx, idx] = op.sigma
    return m
