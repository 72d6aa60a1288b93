"""Spectral contrastive learning of feature pairs.

The population objective is the squared Hilbert-Schmidt distance between the
rank-d operator ``sum_i psi_i (x) phi_i`` and T, which expands to

    E_X E_Z[(phi(X)^T psi(Z))^2] - 2 E_XZ[phi(X)^T psi(Z)] + ||T||_HS^2.

Its sample version drops the constant and replaces the product-measure term
by the U-statistic over all ordered pairs ``i != j``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .features import X_SIDE, Z_SIDE, AdamState, MlpFeatures, adam_step, center_features, init_mlp
from .features import _backward, _forward
from .operator import Grid, SpectralOperator, hs_norm
from .synthetic import Samples

POPULATION_RESOLUTION = 512


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class ContrastiveConfig:
    feature_dim: int = 50
    batch_size: int = 1024
    epochs: int = 50
    reg_weight: float = 0.01
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: tuple = (50, 50)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be nonnegative")

    @property
    def widths(self) -> tuple:
        return (1, *self.hidden, self.feature_dim)


@dataclass(frozen=True)
class LossReport:
    epoch: int
    empirical_loss: float
    regularizer: float


def contrastive_loss(f: np.ndarray, g: np.ndarray) -> float:
    """Sample contrastive loss for feature matrices ``f = phi(x_i)``, ``g = psi(z_i)`` (rows)."""
    m = f.shape[0]
    if m < 2:
        raise ValueError("need at least two samples")
    diag = np.einsum("ij,ij->i", f, g)
    # sum over i != j of (f_i . g_j)^2 = ||f^T f g^T g||_trace - sum_i (f_i . g_i)^2
    pairs = np.sum((f.T @ f) * (g.T @ g)) - np.sum(diag**2)
    return pairs / (m * (m - 1)) - 2.0 * diag.mean()


def contrastive_loss_grad(f: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = f.shape[0]
    diag = np.einsum("ij,ij->i", f, g)
    scale = 2.0 / (m * (m - 1))
    df = scale * (f @ (g.T @ g) - diag[:, None] * g) - (2.0 / m) * g
    dg = scale * (g @ (f.T @ f) - diag[:, None] * f) - (2.0 / m) * f
    return df, dg


def empirical_loss(phi, psi, batch: Samples) -> float:
    """Contrastive loss of the maps ``phi``, ``psi`` on a batch of ``(z, x)`` pairs."""
    if len(batch) < 2:
        raise ValueError("batch must contain at least two samples")
    return contrastive_loss(phi(batch.x), psi(batch.z))


def _outer_penalty(f):
    # ||f f^T - I||_F^2 per row, for d = f.shape[1]
    sq = np.sum(f**2, axis=1)
    return sq**2 - 2.0 * sq + f.shape[1]


def regularizer_values(f: np.ndarray, g: np.ndarray) -> float:
    if f.shape[0] == 0:
        raise ValueError("batch is empty")
    return float(np.mean(_outer_penalty(f)) + np.mean(_outer_penalty(g))
                 + 2.0 * np.mean(np.sum(f**2, axis=1)) + 2.0 * np.mean(np.sum(g**2, axis=1)))


def regularizer_grad(f: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # the -2||f||^2 inside the outer penalty cancels the +2||f||^2 term
    m = f.shape[0]
    return (4.0 / m) * np.sum(f**2, axis=1)[:, None] * f, (4.0 / m) * np.sum(g**2, axis=1)[:, None] * g


def regularizer(phi, psi, batch: Samples) -> float:
    """Collinearity and norm penalty on the trainable (non-constant) outputs.

    Maps exposing ``trainable`` (such as :class:`MlpFeatures`) are evaluated
    without their constant column; other maps are used as given.
    """
    f = getattr(phi, "trainable", phi)(batch.x)
    g = getattr(psi, "trainable", psi)(batch.z)
    return regularizer_values(f, g)


def population_loss_quadrature(phi, psi, op: SpectralOperator, grid: Grid | None = None) -> float:
    """Population contrastive loss by 2-d quadrature, including ``||T||_HS^2``."""
    grid = Grid(POPULATION_RESOLUTION) if grid is None else grid
    if grid.n_points < POPULATION_RESOLUTION:
        raise ValueError(f"grid resolution must be >= {POPULATION_RESOLUTION}")
    t = grid.nodes
    f, g = phi(t), psi(t)
    k = f @ g.T  # rows x, columns z
    product = np.mean(k**2)
    joint = np.mean(op.density_matrix(t, t) * k)
    return float(product - 2.0 * joint + hs_norm(op) ** 2)


def _batch_centered(a):
    return a - a.mean(axis=0)


def _params(phi: MlpFeatures, psi: MlpFeatures):
    return list(phi.params) + list(psi.params)


def _split(params, n_phi):
    return params[:n_phi], params[n_phi:]


def train(config: ContrastiveConfig, unlabeled: Samples) -> tuple[MlpFeatures, MlpFeatures, list]:
    """Fit a feature pair by Adam on minibatch contrastive loss plus ``reg_weight`` times the regularizer.

    Features are centered within each batch before the loss (the mean-zero
    restriction), and the stored centering is recomputed on the whole
    dataset after every epoch. Returned nets carry a prepended constant.
    """
    m = len(unlabeled)
    if m < config.batch_size:
        raise ValueError(f"dataset size {m} is smaller than batch_size {config.batch_size}")
    rng = np.random.default_rng(config.seed)
    phi = init_mlp(rng, config.widths, side=X_SIDE)
    psi = init_mlp(rng, config.widths, side=Z_SIDE)
    phi = center_features(phi, unlabeled)
    psi = center_features(psi, unlabeled)
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    n_phi = len(phi.params)
    history = []
    n_batches = m // config.batch_size
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(m)
        losses, regs = [], []
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            xb, zb = unlabeled.x[idx], unlabeled.z[idx]
            f, cache_f = _forward(phi.params, phi.widths, xb)
            g, cache_g = _forward(psi.params, psi.widths, zb)
            f, g = _batch_centered(f), _batch_centered(g)
            loss = contrastive_loss(f, g)
            reg = regularizer_values(f, g)
            if not (np.isfinite(loss) and np.isfinite(reg)):
                raise TrainingDiverged(epoch)
            df, dg = contrastive_loss_grad(f, g)
            if config.reg_weight:
                rf, rg = regularizer_grad(f, g)
                df, dg = df + config.reg_weight * rf, dg + config.reg_weight * rg
            # backprop through the batch centering
            df, dg = _batch_centered(df), _batch_centered(dg)
            grads = _backward(phi.params, cache_f, df) + _backward(psi.params, cache_g, dg)
            params, state = adam_step(state, _params(phi, psi), grads)
            p_phi, p_psi = _split(params, n_phi)
            phi = MlpFeatures(phi.widths, p_phi, side=X_SIDE, centering=phi.centering)
            psi = MlpFeatures(psi.widths, p_psi, side=Z_SIDE, centering=psi.centering)
            losses.append(loss)
            regs.append(reg)
        phi = center_features(phi, unlabeled)
        psi = center_features(psi, unlabeled)
        history.append(LossReport(epoch, float(np.mean(losses)), float(np.mean(regs))))
    return phi.with_constant(), psi.with_constant(), history


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "empirical_loss", "regularizer"])
        for rep in history:
            w.writerow([rep.epoch, f"{rep.empirical_loss:.17g}", f"{rep.regularizer:.17g}"])
