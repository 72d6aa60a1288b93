"""Experiment orchestration: MSE grids, the ugly-regime sweep, single fits, heatmaps.

Everything written here is a pure function of the configuration except the
``wall_time_s`` column. Seeds are derived with :class:`numpy.random.SeedSequence`
from ``(master_seed, c_alpha, c_sigma, rep)``, so adding reps or cells never
changes existing rows.
"""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .contrastive import ContrastiveConfig, TrainingDiverged, train
from .diagnostics import epsilon_hat, projection_residual, tail_norm, tau_sieve
from .features import X_SIDE, Z_SIDE, OracleFeatures
from .operator import Grid, random_operator
from .synthetic import (
    Scenario,
    StructuralFunction,
    build_scenario,
    rejection_sample,
    sample_outcomes,
    unit_structural_function,
)
from .twostage import TwoStageConfig, fit, l2_error, population_fit

ORACLE = "oracle"
LEARNED = "learned"
MODES = (ORACLE, LEARNED)
CSV_HEADER = ("c_alpha", "c_sigma", "rep", "mode", "mse", "tau", "tail_norm",
              "epsilon_hat", "sigma_scale", "wall_time_s")
UGLY_HEADER = ("k", "floor", "population_residual", "finite_residual", "sigma_scale", "n_labeled")
FIT_HEADER = ("x", "h0", "h_hat")
THREADS_ENV = "SNPIV_THREADS"
PAPER_SCALE = {"reps": 500, "n_labeled": 10_000, "m_unlabeled": 100_000}
_TRAIN_STREAM = 1
_DATA_STREAM = 0
_MICRO = 1_000_000


# learned spans have directions the operator barely moves, so stage 2 needs
# real shrinkage there; oracle spans only need numerical conditioning
DEFAULT_TWO_STAGE = {
    ORACLE: TwoStageConfig(eta=1e-8, lam=1e-8, relative=True),
    LEARNED: TwoStageConfig(eta=1e-8, lam=1e-2, relative=True),
}
# smaller batches and longer training than the module defaults reach a
# visibly better contrastive optimum at m = 2e4
HARNESS_CONTRASTIVE = ContrastiveConfig(batch_size=256, epochs=200)


@dataclass(frozen=True)
class GridConfig:
    """Configuration of an MSE grid over ``(c_alpha, c_sigma)``.

    ``two_stage`` defaults to ``DEFAULT_TWO_STAGE[mode]`` (penalties
    relative to the Gram traces). ``contrastive`` supplies the training
    hyperparameters in learned mode; its ``feature_dim`` and ``seed`` are
    overridden per cell.
    """

    c_alpha: tuple = (0.1, 0.5, 1.0)
    c_sigma: tuple = (0.1, 0.5, 1.0)
    reps: int = 50
    n_labeled: int = 2000
    m_unlabeled: int = 20_000
    mode: str = ORACLE
    feature_dim: int = 50
    master_seed: int = 0
    out: str | None = None
    d: int = 11
    noise_var: float = 0.1
    features_per_rep: bool = False
    two_stage: TwoStageConfig | None = None
    contrastive: ContrastiveConfig = HARNESS_CONTRASTIVE

    def __post_init__(self):
        object.__setattr__(self, "c_alpha", tuple(float(c) for c in self.c_alpha))
        object.__setattr__(self, "c_sigma", tuple(float(c) for c in self.c_sigma))
        if not self.c_alpha or not self.c_sigma:
            raise ValueError("c_alpha and c_sigma lists must be nonempty")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.n_labeled < 2 or self.m_unlabeled < 2 or self.feature_dim < 1:
            raise ValueError("sample sizes must be >= 2 and feature_dim >= 1")
        if self.two_stage is None:
            object.__setattr__(self, "two_stage", DEFAULT_TWO_STAGE[self.mode])

    def paper_scale(self) -> "GridConfig":
        return replace(self, **PAPER_SCALE)

    def scenario(self, c_alpha: float, c_sigma: float) -> Scenario:
        return Scenario(d=self.d, c_sigma=c_sigma, c_alpha=c_alpha, noise_var=self.noise_var,
                        seed_op=self.master_seed, seed_data=self.master_seed)


@dataclass(frozen=True)
class RunRecord:
    c_alpha: float
    c_sigma: float
    rep: int
    mode: str
    mse: float
    tau: float
    tail_norm: float
    epsilon_hat: float | None
    sigma_scale: float
    wall_time_s: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if self.mse < 0:
            raise ValueError("mse must be nonnegative")

    @property
    def flagged(self) -> bool:
        """True for reps whose training diverged (recorded with NaN metrics)."""
        return math.isnan(self.mse)

    def as_row(self) -> list:
        eps = "" if self.epsilon_hat is None else _fmt(self.epsilon_hat)
        return [_fmt(self.c_alpha), _fmt(self.c_sigma), str(self.rep), self.mode, _fmt(self.mse),
                _fmt(self.tau), _fmt(self.tail_norm), eps, _fmt(self.sigma_scale),
                f"{self.wall_time_s:.6f}"]


def _fmt(v) -> str:
    return repr(float(v))


def _micro(c: float) -> int:
    return int(round(c * _MICRO))


def rep_seed(master_seed: int, c_alpha: float, c_sigma: float, rep: int) -> np.random.SeedSequence:
    """Seed of the labeled data for one replicate."""
    return np.random.SeedSequence([master_seed, _micro(c_alpha), _micro(c_sigma), _DATA_STREAM, rep])


def train_seed(master_seed: int, c_alpha: float, c_sigma: float, rep: int | None = None):
    """Seed of the unlabeled data and network initialization (per cell, or per rep)."""
    key = [master_seed, _micro(c_alpha), _micro(c_sigma), _TRAIN_STREAM]
    return np.random.SeedSequence(key if rep is None else key + [rep])


def _oracle_features(op):
    return OracleFeatures(op, X_SIDE, op.r), OracleFeatures(op, Z_SIDE, op.r)


def _learn_features(op, m, config: GridConfig, seed: np.random.SeedSequence):
    data_seed, init_seed = seed.spawn(2)
    unlabeled = rejection_sample(op, m, np.random.default_rng(data_seed))
    cfg = replace(config.contrastive, feature_dim=config.feature_dim,
                  seed=int(init_seed.generate_state(1)[0]),
                  batch_size=min(config.contrastive.batch_size, m))
    phi, psi, _ = train(cfg, unlabeled)
    return phi, psi


def _feature_diagnostics(phi, psi, op, h0, mode):
    if mode == ORACLE:
        return tau_sieve(phi, op), tail_norm(h0.alpha, op.r), None
    try:
        tau = tau_sieve(phi, op)
    except ValueError:  # rank-deficient learned span
        tau = math.inf
    return tau, projection_residual(phi, h0), epsilon_hat(phi, psi, op, op.r)


def run_cell(scenario: Scenario, mode: str, reps: int, config: GridConfig,
             alpha=None) -> list[RunRecord]:
    """``reps`` independent replicates of one ``(c_alpha, c_sigma)`` cell.

    Each rep draws a fresh labeled sample of ``config.n_labeled`` points. In
    learned mode a feature pair is trained on ``config.m_unlabeled`` unlabeled
    points once per cell, or once per rep with ``config.features_per_rep``.
    A diverged training run yields rows with NaN metrics instead of raising.
    ``alpha`` replaces the scenario's coefficients of h0 (used as given, not
    normalized).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    op, h0 = build_scenario(scenario)
    if alpha is not None:
        h0 = StructuralFunction(alpha, op)
    ca, cs, master = scenario.c_alpha, scenario.c_sigma, config.master_seed
    per_rep = mode == LEARNED and config.features_per_rep

    def features(rep):
        if mode == ORACLE:
            return _oracle_features(op)
        seed = train_seed(master, ca, cs, rep if per_rep else None)
        try:
            return _learn_features(op, config.m_unlabeled, config, seed)
        except TrainingDiverged:
            return None

    records = []
    pair = diag = None
    for rep in range(reps):
        start = time.perf_counter()
        if per_rep or rep == 0:
            pair = features(rep)
            diag = None if pair is None else _feature_diagnostics(*pair, op, h0, mode)
        if pair is None:
            records.append(RunRecord(ca, cs, rep, mode, math.nan, math.nan, math.nan, math.nan,
                                     op.scale, time.perf_counter() - start))
            continue
        rng = np.random.default_rng(rep_seed(master, ca, cs, rep))
        data = sample_outcomes(h0, rejection_sample(op, config.n_labeled, rng), scenario.noise_var, rng)
        mse = l2_error(fit(*pair, data, config.two_stage), h0) ** 2
        records.append(RunRecord(ca, cs, rep, mode, mse, *diag, op.scale,
                                 time.perf_counter() - start))
    return records


def _sort_key(rec: RunRecord):
    return rec.c_alpha, rec.c_sigma, rec.rep


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rec in sorted(records, key=_sort_key):
            w.writerow(rec.as_row())


def read_records(path) -> list[RunRecord]:
    """Parse a grid CSV; malformed lines raise ``ValueError`` naming the line."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}:1: header must be {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            try:
                if len(row) != len(CSV_HEADER):
                    raise ValueError(f"expected {len(CSV_HEADER)} fields, got {len(row)}")
                if row[3] not in MODES:
                    raise ValueError(f"unknown mode {row[3]!r}")
                records.append(RunRecord(
                    float(row[0]), float(row[1]), int(row[2]), row[3], float(row[4]),
                    float(row[5]), float(row[6]), float(row[7]) if row[7] else None,
                    float(row[8]), float(row[9])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return records


def write_metadata(config: GridConfig, path) -> None:
    """Sidecar ``key=value`` file recording every setting of a grid run."""
    flat = {k: v for k, v in asdict(config).items() if k not in ("two_stage", "contrastive")}
    flat.update({f"two_stage.{k}": v for k, v in asdict(config.two_stage).items()})
    flat.update({f"contrastive.{k}": v for k, v in asdict(config.contrastive).items()
                 if k not in ("feature_dim", "seed")})
    flat["training"] = "per_rep" if config.features_per_rep else "per_cell"
    Path(path).write_text("".join(f"{k}={v!r}\n" for k, v in flat.items()))


def worker_count(n_tasks: int) -> int:
    """Pool size: CPU count, capped by ``SNPIV_THREADS`` and the number of tasks."""
    n = os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, min(n, n_tasks))


def _cell_task(args):
    scenario, config = args
    return run_cell(scenario, config.mode, config.reps, config)


def run_grid(config: GridConfig) -> list[RunRecord]:
    """Run every cell of the grid; rows are written to ``config.out`` in canonical order.

    The CSV is rewritten after each finished cell, so an interrupted run
    leaves the completed cells on disk.
    """
    tasks = [(config.scenario(ca, cs), config)
             for ca in sorted(set(config.c_alpha)) for cs in sorted(set(config.c_sigma))]
    records: list[RunRecord] = []

    def collect(cell):
        records.extend(cell)
        if config.out:
            write_records(records, config.out)

    if config.out:
        write_metadata(config, str(config.out) + ".meta")
    workers = worker_count(len(tasks))
    try:
        if workers == 1:
            for task in tasks:
                collect(_cell_task(task))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_cell_task, t) for t in tasks]
                for fut in as_completed(futures):
                    collect(fut.result())
    except KeyboardInterrupt:
        if config.out:
            write_records(records, config.out)
        raise
    return sorted(records, key=_sort_key)


# --- ugly regime ---------------------------------------------------------------


@dataclass(frozen=True)
class UglyConfig:
    n_labeled: int = 10_000
    noise_var: float = 0.1
    seed: int = 0
    grid_points: int = 4096
    two_stage: TwoStageConfig = field(default_factory=TwoStageConfig)


@dataclass(frozen=True)
class UglyRow:
    k: int
    floor: float
    population_residual: float
    finite_residual: float
    sigma_scale: float
    n_labeled: int

    def as_row(self) -> list:
        return [str(self.k), _fmt(self.floor), _fmt(self.population_residual),
                _fmt(self.finite_residual), _fmt(self.sigma_scale), str(self.n_labeled)]


def ugly_operator(d: int, c: float, k: int, seed: int):
    """``sigma_{1:k} = c``, the rest zero, with rotations fixed by ``seed`` (rescaled if needed)."""
    r = d - 1
    if not 0 <= k <= r:
        raise ValueError(f"k must lie in [0, {r}]")
    return random_operator(np.where(np.arange(r) < k, c, 0.0), seed=seed)


def run_ugly_sweep(d: int, c: float, k_values, config: UglyConfig = UglyConfig(),
                   out=None) -> list[UglyRow]:
    """Fits with ``h0`` spread uniformly over all ``d - 1`` directions while only ``k`` carry signal.

    The population fit uses all ``d - 1`` oracle directions; the finite
    sample fit uses the ``k`` identified ones. Both residuals are compared
    against the floor ``sqrt(1 - k / (d - 1))``.
    """
    r = d - 1
    grid = Grid(config.grid_points)
    rows = []
    for k in k_values:
        op = ugly_operator(d, c, int(k), config.seed)
        h0 = unit_structural_function(np.ones(r), op)
        pop = population_fit(*_oracle_features(op), op, h0, grid, config.two_stage)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, int(k)]))
        data = sample_outcomes(h0, rejection_sample(op, config.n_labeled, rng), config.noise_var, rng)
        finite = fit(OracleFeatures(op, X_SIDE, int(k)), OracleFeatures(op, Z_SIDE, int(k)),
                     data, config.two_stage)
        rows.append(UglyRow(int(k), math.sqrt(1.0 - k / r), l2_error(pop, h0, grid),
                            l2_error(finite, h0, grid), op.scale, config.n_labeled))
    if out:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(UGLY_HEADER)
            w.writerows(row.as_row() for row in rows)
    return rows


# --- single fits ---------------------------------------------------------------


def run_fit(scenario: Scenario, mode: str, out=None, n_labeled: int = 2000,
            m_unlabeled: int = 20_000, feature_dim: int = 50,
            two_stage: TwoStageConfig | None = None,
            contrastive: ContrastiveConfig = HARNESS_CONTRASTIVE, grid_points: int = 1024):
    """One fit on one scenario; writes ``x,h0,h_hat`` on a uniform grid.

    Returns ``(x, h0(x), h_hat(x))``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    op, h0 = build_scenario(scenario)
    config = GridConfig(c_alpha=[scenario.c_alpha], c_sigma=[scenario.c_sigma], reps=1,
                        n_labeled=n_labeled, m_unlabeled=m_unlabeled, mode=mode,
                        feature_dim=feature_dim, master_seed=scenario.seed_data,
                        contrastive=contrastive,
                        two_stage=two_stage)
    if mode == ORACLE:
        phi, psi = _oracle_features(op)
    else:
        phi, psi = _learn_features(op, m_unlabeled, config,
                                   train_seed(scenario.seed_data, scenario.c_alpha, scenario.c_sigma))
    rng = np.random.default_rng(rep_seed(scenario.seed_data, scenario.c_alpha, scenario.c_sigma, 0))
    data = sample_outcomes(h0, rejection_sample(op, n_labeled, rng), scenario.noise_var, rng)
    estimate = fit(phi, psi, data, config.two_stage)
    x = Grid(grid_points).nodes
    curves = (x, h0(x), estimate(x))
    if out:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FIT_HEADER)
            w.writerows([_fmt(a), _fmt(b), _fmt(c)] for a, b, c in zip(*curves))
    return curves


# --- heatmap -------------------------------------------------------------------

STATISTICS = ("mean", "median")
_LOW_RGB = (247, 251, 255)
_HIGH_RGB = (8, 48, 107)
_CELL = 80
_MARGIN = 70


def cell_statistics(records, stat: str = "median") -> dict:
    """``{(c_alpha, c_sigma): value}`` of the MSE statistic, ignoring flagged rows."""
    if stat not in STATISTICS:
        raise ValueError(f"stat must be one of {STATISTICS}")
    groups: dict = {}
    for rec in records:
        groups.setdefault((rec.c_alpha, rec.c_sigma), []).append(rec.mse)
    out = {}
    for key, values in groups.items():
        v = np.asarray(values)
        v = v[~np.isnan(v)]
        out[key] = math.nan if v.size == 0 else float(np.mean(v) if stat == "mean" else np.median(v))
    return out


def fill_color(value: float, lo: float, hi: float) -> str:
    """Linear ramp from light to dark blue; larger values are darker."""
    if math.isnan(value):
        return "#bdbdbd"
    t = 0.0 if hi <= lo else (value - lo) / (hi - lo)
    rgb = (round(a + t * (b - a)) for a, b in zip(_LOW_RGB, _HIGH_RGB))
    return "#" + "".join(f"{c:02x}" for c in rgb)


def render_heatmap(stats: dict, stat: str = "median") -> str:
    """SVG text: columns are ``c_alpha`` (ascending), rows ``c_sigma`` (ascending downward)."""
    alphas = sorted({a for a, _ in stats})
    sigmas = sorted({s for _, s in stats})
    finite = [v for v in stats.values() if not math.isnan(v)]
    lo, hi = (min(finite), max(finite)) if finite else (math.nan, math.nan)
    width = 2 * _MARGIN + _CELL * len(alphas)
    height = 2 * _MARGIN + _CELL * len(sigmas) + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="12">']
    out.append(f'<text x="{width // 2}" y="20" text-anchor="middle">{stat} MSE</text>')
    for i, a in enumerate(alphas):
        out.append(f'<text x="{_MARGIN + i * _CELL + _CELL // 2}" y="{_MARGIN - 8}" '
                   f'text-anchor="middle">{a:g}</text>')
    out.append(f'<text x="{_MARGIN + _CELL * len(alphas) // 2}" y="{_MARGIN - 28}" '
               f'text-anchor="middle">c_alpha</text>')
    out.append(f'<text x="14" y="{_MARGIN + _CELL * len(sigmas) // 2}" '
               f'text-anchor="middle" transform="rotate(-90 14 {_MARGIN + _CELL * len(sigmas) // 2})">'
               f'c_sigma</text>')
    for j, s in enumerate(sigmas):
        y = _MARGIN + j * _CELL
        out.append(f'<text x="{_MARGIN - 8}" y="{y + _CELL // 2 + 4}" text-anchor="end">{s:g}</text>')
        for i, a in enumerate(alphas):
            value = stats.get((a, s), math.nan)
            x = _MARGIN + i * _CELL
            color = fill_color(value, lo, hi)
            out.append(f'<rect class="cell" data-c-alpha="{a!r}" data-c-sigma="{s!r}" '
                       f'x="{x}" y="{y}" width="{_CELL}" height="{_CELL}" fill="{color}" '
                       f'stroke="#ffffff"/>')
            ink = "#ffffff" if not math.isnan(value) and hi > lo and (value - lo) / (hi - lo) > 0.5 else "#000000"
            out.append(f'<text x="{x + _CELL // 2}" y="{y + _CELL // 2 + 4}" text-anchor="middle" '
                       f'fill="{ink}">{value:.3g}</text>')
    y = _MARGIN + _CELL * len(sigmas) + 20
    out.append(f'<rect class="legend" x="{_MARGIN}" y="{y}" width="16" height="16" '
               f'fill="{fill_color(lo, lo, hi)}" stroke="#000000"/>')
    out.append(f'<text class="legend-min" x="{_MARGIN + 22}" y="{y + 12}">min {lo:.6g}</text>')
    x2 = _MARGIN + 120
    out.append(f'<rect class="legend" x="{x2}" y="{y}" width="16" height="16" '
               f'fill="{fill_color(hi, lo, hi)}" stroke="#000000"/>')
    out.append(f'<text class="legend-max" x="{x2 + 22}" y="{y + 12}">max {hi:.6g}</text>')
    out.append("</svg>\n")
    return "\n".join(out)


def emit_heatmap(csv_path, stat: str = "median", out_path=None) -> str:
    """Render a grid CSV as an SVG heatmap; returns the SVG text."""
    svg = render_heatmap(cell_statistics(read_records(csv_path), stat), stat)
    if out_path:
        Path(out_path).write_text(svg)
    return svg
