"""Feature maps on X or Z: oracle singular functions and a small learnable MLP.

A feature map is any object with ``dim``, ``side`` and ``__call__(t)``
returning an ``(n, dim)`` array for ``n`` points.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import erf

from .operator import SpectralOperator

X_SIDE = "x"
Z_SIDE = "z"


def _check_side(side):
    if side not in (X_SIDE, Z_SIDE):
        raise ValueError(f"side must be 'x' or 'z', got {side!r}")
    return side


def _points(t) -> np.ndarray:
    return np.atleast_1d(np.asarray(t, dtype=float)).ravel()


@dataclass(frozen=True, eq=False)
class OracleFeatures:
    """``{1, v_1..v_k}`` (X side) or ``{1, u_1..u_k}`` (Z side) of a known operator.

    ``weights`` optionally rescales the nonconstant components, e.g.
    ``weights=op.sigma[:k]`` gives the ``sigma_i u_i`` half of the SVD
    factorization of the rank-``k`` truncation.
    """

    op: SpectralOperator
    side: str
    k: int
    weights: np.ndarray | None = None

    def __post_init__(self):
        _check_side(self.side)
        if not 0 <= self.k <= self.op.r:
            raise ValueError(f"k must lie in [0, {self.op.r}]")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).ravel()
            if w.size != self.k:
                raise ValueError("weights must have length k")
            object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.k + 1

    def __call__(self, t) -> np.ndarray:
        t = _points(t)
        f = self.op.eval_right(t) if self.side == X_SIDE else self.op.eval_left(t)
        f = f[:, : self.k]
        if self.weights is not None:
            f = f * self.weights
        return np.hstack([np.ones((t.size, 1)), f])


def oracle_factorization(op: SpectralOperator, k: int) -> tuple[OracleFeatures, OracleFeatures]:
    """Features ``(1, v_1..v_k)`` and ``(1, sigma_1 u_1..sigma_k u_k)``.

    Their rank-one sum reproduces the truncation of ``op`` to the constant
    triplet plus ``k`` nonconstant ones.
    """
    return (OracleFeatures(op, X_SIDE, k),
            OracleFeatures(op, Z_SIDE, k, weights=op.sigma[:k]))


@dataclass(frozen=True, eq=False)
class CallableFeatures:
    """Wrap a vectorized function ``t -> (n, dim)`` as a feature map."""

    fn: Callable[[np.ndarray], np.ndarray]
    dim: int
    side: str = X_SIDE

    def __call__(self, t) -> np.ndarray:
        out = np.asarray(self.fn(_points(t)), dtype=float)
        return out.reshape(-1, self.dim)


# --- MLP ---------------------------------------------------------------------

DEFAULT_WIDTHS = (1, 50, 50, 50)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def periodic_act(t):
    return t + np.sin(t) ** 2


def periodic_act_grad(t):
    return 1.0 + np.sin(2.0 * t)


def gelu(t):
    return 0.5 * t * (1.0 + erf(t * _INV_SQRT2))


def gelu_grad(t):
    return 0.5 * (1.0 + erf(t * _INV_SQRT2)) + t * _INV_SQRT2PI * np.exp(-0.5 * t * t)


def _activation(layer, n_layers):
    # first affine map feeds the periodic activation, the last one is linear
    if layer == 0:
        return periodic_act, periodic_act_grad
    if layer == n_layers - 1:
        return None, None
    return gelu, gelu_grad


@dataclass(frozen=True, eq=False)
class MlpFeatures:
    """Fully connected net ``R -> R^m`` with mean-centering and optional constant.

    ``params`` is a list ``[W0, b0, W1, b1, ...]`` with ``W`` of shape
    ``(fan_in, fan_out)``. The first affine map is followed by
    ``t + sin(t)^2``, intermediate ones by exact GELU, the last one is linear
    (with the default widths ``(1, 50, 50, 50)``: periodic, GELU, linear).
    ``centering`` is subtracted from the raw outputs. When ``constant`` is
    set, a leading constant 1 is prepended outside the trainable network.
    """

    widths: tuple
    params: list
    side: str = X_SIDE
    centering: np.ndarray | None = None
    constant: bool = False

    def __post_init__(self):
        _check_side(self.side)
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or widths[0] != 1:
            raise ValueError("widths must start with input width 1 and have >= 2 entries")
        if len(self.params) != 2 * (len(widths) - 1):
            raise ValueError("params length does not match widths")
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            if self.params[2 * i].shape != (a, b) or self.params[2 * i + 1].shape != (b,):
                raise ValueError(f"layer {i} parameter shapes do not match widths")
        centering = (np.zeros(widths[-1]) if self.centering is None
                     else np.asarray(self.centering, dtype=float).ravel())
        if centering.size != widths[-1]:
            raise ValueError("centering must match the output width")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "centering", centering)

    @property
    def n_outputs(self) -> int:
        return self.widths[-1]

    @property
    def dim(self) -> int:
        return self.n_outputs + int(self.constant)

    def raw(self, t) -> np.ndarray:
        """Network outputs before centering, shape ``(n, n_outputs)``."""
        return _forward(self.params, self.widths, _points(t))[0]

    def trainable(self, t) -> np.ndarray:
        """Centered network outputs without the constant column."""
        return self.raw(t) - self.centering

    def __call__(self, t) -> np.ndarray:
        out = self.trainable(t)
        if self.constant:
            out = np.hstack([np.ones((out.shape[0], 1)), out])
        return out

    def with_constant(self, constant: bool = True) -> "MlpFeatures":
        return replace(self, constant=constant)


def init_mlp(rng: np.random.Generator, widths=DEFAULT_WIDTHS, side=X_SIDE,
             constant=False) -> MlpFeatures:
    """Random net: first layer weights and biases uniform in [-2, 2], later layers He-normal."""
    params = []
    n_layers = len(widths) - 1
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        if i == 0:
            w = rng.uniform(-2.0, 2.0, size=(a, b))
            bias = rng.uniform(-2.0, 2.0, size=b)
        else:
            gain = 2.0 if i < n_layers - 1 else 1.0
            w = rng.standard_normal((a, b)) * math.sqrt(gain / a)
            bias = np.zeros(b)
        params += [w, bias]
    return MlpFeatures(tuple(widths), params, side=side, constant=constant)


def _forward(params, widths, t):
    n_layers = len(widths) - 1
    h = t.reshape(-1, 1)
    cache = []
    for i in range(n_layers):
        pre = h @ params[2 * i] + params[2 * i + 1]
        act, _ = _activation(i, n_layers)
        cache.append((h, pre))
        h = pre if act is None else act(pre)
    return h, cache


def mlp_forward(net: MlpFeatures, t) -> np.ndarray:
    """Feature vectors at ``t`` (centered, constant prepended if flagged)."""
    return net(t)


def mlp_backward(net: MlpFeatures, t, upstream) -> list:
    """Gradients of ``sum(upstream * raw(t))`` with respect to ``net.params``.

    ``upstream`` has the shape of the trainable outputs, ``(n, n_outputs)``.
    Centering does not depend on the parameters and drops out.
    """
    t = _points(t)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (t.size, net.n_outputs):
        raise ValueError(f"upstream must have shape {(t.size, net.n_outputs)}, got {upstream.shape}")
    _, cache = _forward(net.params, net.widths, t)
    return _backward(net.params, cache, upstream)


def _backward(params, cache, upstream):
    n_layers = len(cache)
    grads = [None] * len(params)
    delta = upstream
    for i in reversed(range(n_layers)):
        h, pre = cache[i]
        _, dact = _activation(i, n_layers)
        if dact is not None:
            delta = delta * dact(pre)
        grads[2 * i] = h.T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i:
            delta = delta @ params[2 * i].T
    return grads


def center_features(net: MlpFeatures, calibration) -> MlpFeatures:
    """Set ``centering`` to the mean raw output over a calibration sample.

    ``calibration`` has ``x`` and ``z`` columns; the one matching
    ``net.side`` is used.
    """
    pts = _points(calibration.x if net.side == X_SIDE else calibration.z)
    if pts.size == 0:
        raise ValueError("calibration set is empty")
    return replace(net, centering=net.raw(pts).mean(axis=0))


# --- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: list, grads: list) -> tuple[list, AdamState]:
    """One bias-corrected Adam update; returns new parameters and a new state."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("params and grads shapes differ")
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    if any(a.shape != p.shape for a, p in zip(m, params)):
        raise ValueError("optimizer state does not match params")
    step = state.step + 1
    c1 = 1.0 - state.beta1**step
    c2 = 1.0 - state.beta2**step
    new_params, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = state.beta1 * mi + (1.0 - state.beta1) * g
        vi = state.beta2 * vi + (1.0 - state.beta2) * g * g
        new_params.append(p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps))
        new_m.append(mi)
        new_v.append(vi)
    return new_params, replace(state, step=step, m=new_m, v=new_v)


# --- checkpoints -------------------------------------------------------------

MAGIC = b"SNPIV1"


def save_mlp(net: MlpFeatures, path) -> None:
    """Binary checkpoint: magic, widths, side/constant flags, float64 params, centering."""
    header = MAGIC + struct.pack("<I", len(net.widths))
    header += struct.pack(f"<{len(net.widths)}I", *net.widths)
    header += struct.pack("<BB", net.side == Z_SIDE, net.constant)
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params)
    body += np.ascontiguousarray(net.centering, dtype="<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_mlp(path) -> MlpFeatures:
    data = Path(path).read_bytes()
    if data[:6] != MAGIC:
        raise ValueError(f"{path}: not an SNPIV1 checkpoint")
    pos = 6
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    widths = struct.unpack_from(f"<{n}I", data, pos)
    pos += 4 * n
    is_z, constant = struct.unpack_from("<BB", data, pos)
    pos += 2
    params = []
    for a, b in zip(widths[:-1], widths[1:]):
        for shape in ((a, b), (b,)):
            size = int(np.prod(shape))
            params.append(np.frombuffer(data, "<f8", size, pos).reshape(shape).astype(float))
            pos += 8 * size
    centering = np.frombuffer(data, "<f8", widths[-1], pos).astype(float)
    pos += 8 * widths[-1]
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return MlpFeatures(widths, params, side=Z_SIDE if is_z else X_SIDE,
                       centering=centering, constant=bool(constant))
