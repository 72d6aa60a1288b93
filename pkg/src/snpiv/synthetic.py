"""Synthetic NPIV scenarios with a known conditional expectation operator.

Pairs ``(Z, X)`` are drawn from the joint density of a
:class:`~snpiv.operator.SpectralOperator` by rejection sampling, then
``Y = (T h0)(Z) + V`` with ``V ~ N(0, noise_var)``. Since
``E[h0(X) | Z] = (T h0)(Z)``, the implied structural error
``U = Y - h0(X)`` is mean-independent of ``Z``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .operator import TWO_PI, CoeffVector, SpectralOperator, apply, random_operator

ENVELOPE_FACTOR = 1.05
MIN_ACCEPTANCE = 0.01


class SamplerError(RuntimeError):
    """Raised when rejection sampling cannot proceed (low acceptance, bad envelope)."""


@dataclass(frozen=True)
class Scenario:
    d: int = 11
    c_sigma: float = 1.0
    c_alpha: float = 1.0
    sigma_head: float = 1.0
    noise_var: float = 0.1
    seed_op: int = 0
    seed_data: int = 0

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if not (0.0 <= self.c_sigma <= 1.0 and 0.0 <= self.c_alpha <= 1.0):
            raise ValueError("c_sigma and c_alpha must lie in [0, 1]")
        if not 0.0 < self.sigma_head <= 1.0:
            raise ValueError("sigma_head must lie in (0, 1]")
        if self.noise_var < 0:
            raise ValueError("noise_var must be nonnegative")

    @property
    def r(self) -> int:
        return self.d - 1


@dataclass(frozen=True, eq=False)
class StructuralFunction:
    """``h0 = sum_i alpha_i v_i`` for the right singular functions of ``op``."""

    alpha: np.ndarray
    op: SpectralOperator

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        if alpha.size != self.op.r:
            raise ValueError(f"alpha must have length {self.op.r}")
        object.__setattr__(self, "alpha", alpha)

    def __call__(self, x) -> np.ndarray:
        return self.op.eval_right(np.asarray(x, dtype=float)) @ self.alpha

    def image(self, z) -> np.ndarray:
        """``(T h0)(z)``."""
        th = apply(self.op, CoeffVector(0.0, self.alpha))
        return self.op.eval_left(np.asarray(z, dtype=float)) @ th.coeffs


def unit_structural_function(alpha, op: SpectralOperator) -> StructuralFunction:
    alpha = np.asarray(alpha, dtype=float)
    norm = np.linalg.norm(alpha)
    if norm == 0:
        raise ValueError("alpha must be nonzero")
    return StructuralFunction(alpha / norm, op)


@dataclass(frozen=True)
class Samples:
    """Columns of a dataset; ``y`` is ``None`` for unlabeled data."""

    z: np.ndarray
    x: np.ndarray
    y: np.ndarray | None = None

    def __len__(self):
        return self.z.size

    def subset(self, idx) -> "Samples":
        return Samples(self.z[idx], self.x[idx], None if self.y is None else self.y[idx])


def make_decay(head: float, c: float, r: int) -> np.ndarray:
    """Linear decay from ``head`` to ``c * head`` over ``r`` entries, endpoints included."""
    if r < 1:
        raise ValueError("r must be >= 1")
    if head <= 0 or not 0.0 <= c <= 1.0:
        raise ValueError("need head > 0 and c in [0, 1]")
    if r == 1:
        return np.array([float(head)])
    return head * (1.0 - (1.0 - c) * np.arange(r) / (r - 1))


def build_scenario(s: Scenario) -> tuple[SpectralOperator, StructuralFunction]:
    """Operator with rotations from ``seed_op`` and a unit-norm structural function."""
    op = random_operator(make_decay(s.sigma_head, s.c_sigma, s.r), seed=s.seed_op)
    return op, unit_structural_function(make_decay(1.0, s.c_alpha, s.r), op)


def rejection_sample(op: SpectralOperator, m: int, rng: np.random.Generator,
                     chunk: int = 65536) -> Samples:
    """Draw ``m`` exact samples ``(z, x)`` from the joint density of ``op``.

    Proposals are uniform on ``[0, 2pi)^2``; the envelope is 1.05 times the
    density maximum on the scan grid. A proposal whose density exceeds the
    envelope raises :class:`SamplerError` rather than being clamped.
    """
    envelope = ENVELOPE_FACTOR * op.density_max
    zs, xs = [], []
    have = proposed = 0
    while have < m:
        k = max(chunk, int(1.2 * (m - have) * envelope))
        x = rng.uniform(0.0, TWO_PI, k)
        z = rng.uniform(0.0, TWO_PI, k)
        u = rng.uniform(0.0, envelope, k)
        p = op.density(x, z)
        if np.any(p > envelope):
            raise SamplerError(f"density {p.max():.6g} exceeds envelope {envelope:.6g}")
        keep = u < p
        proposed += k
        have += int(keep.sum())
        zs.append(z[keep])
        xs.append(x[keep])
        if have / proposed < MIN_ACCEPTANCE:
            raise SamplerError(f"acceptance rate {have / proposed:.4f} below {MIN_ACCEPTANCE}")
    return Samples(np.concatenate(zs)[:m], np.concatenate(xs)[:m])


def sample_outcomes(h0: StructuralFunction, pairs: Samples, noise_var: float,
                    rng: np.random.Generator) -> Samples:
    """Attach ``y = (T h0)(z) + N(0, noise_var)`` to ``pairs``."""
    if noise_var < 0:
        raise ValueError("noise_var must be nonnegative")
    noise = rng.standard_normal(len(pairs)) * math.sqrt(noise_var)
    return Samples(pairs.z, pairs.x, h0.image(pairs.z) + noise)


def generate(s: Scenario, n: int, rng: np.random.Generator | None = None,
             labeled: bool = True) -> Samples:
    """Dataset of size ``n`` for scenario ``s`` (rng defaults to ``seed_data``)."""
    op, h0 = build_scenario(s)
    rng = np.random.default_rng(s.seed_data) if rng is None else rng
    pairs = rejection_sample(op, n, rng)
    return sample_outcomes(h0, pairs, s.noise_var, rng) if labeled else pairs


# --- files -------------------------------------------------------------------


def write_samples(samples: Samples, path) -> None:
    cols = ["z", "x"] + ([] if samples.y is None else ["y"])
    data = [samples.z, samples.x] + ([] if samples.y is None else [samples.y])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for row in zip(*data):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_samples(path) -> Samples:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header not in (["z", "x"], ["z", "x", "y"]):
            raise ValueError(f"{path}:1: header must be 'z,x' or 'z,x,y'")
        rows = []
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields")
            rows.append([float(v) for v in row])
    cols = np.array(rows, dtype=float).reshape(-1, len(header)).T
    return Samples(cols[0], cols[1], cols[2] if len(header) == 3 else None)


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text("".join(f"{k}={v!r}\n" for k, v in asdict(s).items()))


def load_scenario(path) -> Scenario:
    """Read a ``key=value`` scenario file; unknown keys are rejected, missing ones default."""
    types = {"d": int, "seed_op": int, "seed_data": int}
    known = set(Scenario.__dataclass_fields__)
    kwargs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or key not in known:
            raise ValueError(f"{path}:{lineno}: unrecognised line {line!r}")
        kwargs[key] = types.get(key, float)(value)
    return Scenario(**kwargs)
