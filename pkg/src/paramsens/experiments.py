"""Experiment specifications, result tables and the verification/validation runners.

An experiment is described by one JSON document (:class:`ExperimentSpec`);
every runner returns a :class:`ResultTable` whose rows carry the seed and the
density-evaluation count, so each number can be re-derived.  Defaults for
each experiment kind come from :func:`default_spec`.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .density import (
    CountingDensity,
    get_density,
    gaussian1d_jacobian_oracle,
    gaussian2d_diag_jacobian_oracle,
    gaussian2d_jacobian_oracle,
    pdf_param_gradient_of,
    truncated_gaussian1d_jacobian_oracle,
)
from .energy import (
    composite_gauss_legendre,
    continuous_energy_param_gradient,
    energy_score_and_gradients,
    gauss_legendre,
    naive_fd_param_gradient,
)
from .errors import ConfigError, NonPositiveData
from .grid import RectilinearGrid
from .inference import FitConfig, bootstrap_fit, fit, l1_pdf_error
from .sampling import RngSeed, build_proposal, make_sampler, sample
from .sensitivity import ALGORITHMS, SensitivityConfig, canonical_algorithm, compute_sensitivity

__all__ = [
    "SCHEMA_VERSION",
    "ExperimentSpec",
    "ResultTable",
    "fit_loglog_slope",
    "default_spec",
    "run_verify_gaussian_1d",
    "run_verify_gaussian_2d",
    "run_validate_beta",
    "run_validate_proxy",
    "RUNNERS",
]

SCHEMA_VERSION = 1
EXPERIMENTS = ("verify-gaussian-1d", "verify-gaussian-2d", "validate-beta", "validate-proxy",
               "sensitivity", "fit", "bootstrap")
POINT_KINDS = ("explicit", "foreground", "sampled", "none")
FORMATS = ("csv", "json")


# spec -----------------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    """One experiment.

    ``grid`` lists per-axis ``{"bounds": [lo, hi], "count": K, "spacing":
    "uniform" | "log"}``.  ``points`` is ``{"kind": "explicit", "points":
    [[...], ...]}``, ``{"kind": "foreground", "bounds": [[lo, hi], ...],
    "counts": [...]}``, ``{"kind": "sampled", "count": M}`` or ``{"kind":
    "none"}``.  ``options`` holds the experiment-specific knobs (see
    :func:`default_spec`).
    """

    experiment: str
    density: str
    params: list
    grid: list
    algorithms: list = field(default_factory=lambda: list(ALGORITHMS))
    points: dict = field(default_factory=lambda: {"kind": "none"})
    seeds: list = field(default_factory=lambda: [0])
    output: dict = field(default_factory=lambda: {"path": None, "format": "csv"})
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; known: {list(EXPERIMENTS)}")
        f = get_density(self.density)
        self.params = [float(p) for p in self.params]
        f.check_params(self.params)
        if len(self.grid) != f.ndim:
            raise ConfigError(f"{self.density} needs {f.ndim} grid axes, got {len(self.grid)}")
        for ax in self.grid:
            if not isinstance(ax, dict) or not {"bounds", "count"} <= set(ax):
                raise ConfigError(f"grid axis must have bounds and count, got {ax!r}")
        self.build_grid()
        names = []
        for a in self.algorithms:
            names.append(a if a in ("continuous", "naive-FD") else canonical_algorithm(a))
        self.algorithms = names
        kind = self.points.get("kind") if isinstance(self.points, dict) else None
        if kind not in POINT_KINDS:
            raise ConfigError(f"points kind must be one of {POINT_KINDS}, got {kind!r}")
        if not self.seeds or any(int(s) != s or s < 0 for s in self.seeds):
            raise ConfigError(f"seeds must be nonnegative integers, got {self.seeds!r}")
        if self.output.get("format", "csv") not in FORMATS:
            raise ConfigError(f"output format must be one of {FORMATS}")

    @property
    def seed(self):
        return int(self.seeds[0])

    def build_grid(self, counts=None) -> RectilinearGrid:
        """Background grid; ``counts`` overrides the per-axis vertex counts."""
        counts = counts or [ax["count"] for ax in self.grid]
        return RectilinearGrid.from_bounds([ax["bounds"] for ax in self.grid], counts,
                                           [ax.get("spacing", "uniform") for ax in self.grid])

    def evaluation_points(self, grid=None):
        p = self.points
        if p["kind"] == "explicit":
            return np.atleast_2d(np.asarray(p["points"], dtype=float))
        if p["kind"] == "foreground":
            g = RectilinearGrid.from_bounds(p["bounds"], p["counts"])
            return g.vertex_points().reshape(-1, g.ndim)
        if p["kind"] == "sampled":
            f = get_density(self.density)
            grid = grid or self.build_grid()
            prop = build_proposal(f, grid, self.params, self.options.get("safety", 1.05))
            return sample(f, prop, self.params, p["count"], RngSeed(self.seed, (0,))).points
        raise ConfigError("this experiment has no evaluation points")

    def to_dict(self):
        return {"schema": SCHEMA_VERSION, **asdict(self)}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        schema = d.pop("schema", SCHEMA_VERSION)
        if schema != SCHEMA_VERSION:
            raise ConfigError(f"unsupported spec schema {schema}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"malformed experiment spec: {exc}") from None

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"spec is not valid JSON: {exc}") from None

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def default_spec(experiment) -> ExperimentSpec:
    """Published parameters at desk scale; every knob can be changed in ``options``."""
    if experiment == "verify-gaussian-1d":
        mu, s = 2.175, 1.371
        return ExperimentSpec(experiment, "gaussian1d", [mu, s],
                              [{"bounds": [mu - 5 * s, mu + 5 * s], "count": 64}],
                              options={"resolutions": [2**k for k in range(6, 12)], "foreground": 2**14,
                                       "interest_sigmas": 4.0, "epsilon": 1e-5})
    if experiment == "verify-gaussian-2d":
        p = [0.7, -1.1, 2.6, 1.3, 0.678]
        b = [[p[0] - 5 * p[2], p[0] + 5 * p[2]], [p[1] - 5 * p[3], p[1] + 5 * p[3]]]
        return ExperimentSpec(experiment, "gaussian2d", p,
                              [{"bounds": b[0], "count": 64}, {"bounds": b[1], "count": 64}],
                              algorithms=list(ALGORITHMS[1:]),
                              points={"kind": "foreground", "bounds": b, "counts": [2**9, 2**9]},
                              options={"resolutions": [2**k for k in range(6, 10)],
                                       "mahalanobis_sq": 19.313, "epsilon": 1e-5})
    if experiment == "validate-beta":
        return ExperimentSpec(experiment, "beta1d", [3.0, 1.4],
                              [{"bounds": [2e-5, 1 - 2e-5], "count": 1025}],
                              algorithms=list(ALGORITHMS),
                              options={"truth": [2.31, 1.627], "M_o": 10000, "M_x": [100, 1000, 10000],
                                       "repeats": 20, "fd_deltas": [1e-3, 1e-5], "quad_points": 16,
                                       "gradient_study": True, "fit": True,
                                       "fit_algorithms": ["1D Alg", "naive-FD"], "fit_fd_delta": 1e-3,
                                       "param_box": [[0.5, 10.0], [0.5, 10.0]], "epochs": 3000,
                                       "learning_rate": 0.01, "fit_M_x": 10000, "loss_estimate": "expected",
                                       "loss_quad_cells": 400, "loss_quad_points": 16})
    if experiment == "validate-proxy":
        lo, hi = 2e-5, 1 - 2e-5
        return ExperimentSpec(experiment, "proxy2d", [0.25, 3.375, 0.65, 3.75, 0.1],
                              [{"bounds": [lo, hi], "count": 64, "spacing": "log"}] * 2,
                              algorithms=["Interp Full"],
                              options={"truth": [0.5, 3.0, 0.3, 4.0, 0.75],
                                       "param_box": [[-0.5, 1.0], [2.75, 4.0], [0.0, 1.3], [3.0, 4.5], [0.0, 1.5]],
                                       "observation_grid": {"bounds": [1e-8, 1 - 1e-8], "count": 1025},
                                       "safety": 1.05,
                                       "gradient_study": False, "gradient_grid": 1024, "gradient_M_x": [100, 1000],
                                       "gradient_repeats": 100, "quad_cells": 50, "quad_points": 9,
                                       "inference": True, "M_o": [10000, 50000], "n_bootstrap": 20, "restarts": 3,
                                       "optimizer": "adam", "learning_rate": 0.02, "epochs": 150,
                                       "fit_M_x": 500, "eval_M_x": 4000,
                                       "l1_quad_cells": 50, "l1_quad_points": 9})
    raise ConfigError(f"no default spec for {experiment!r}")


# results --------------------------------------------------------------------------

COLUMNS = ("experiment", "algorithm", "resolution", "metric", "value", "wall_time", "density_evals", "seed")


class ResultTable:
    """Append-only rows of ``COLUMNS``."""

    def __init__(self, rows=()):
        self._rows = []
        for r in rows:
            self.append(*r)

    def append(self, experiment, algorithm, resolution, metric, value, wall_time=0.0, density_evals=0, seed=0):
        self._rows.append((str(experiment), str(algorithm), resolution, str(metric), float(value),
                           float(wall_time), int(density_evals), int(seed)))

    @property
    def rows(self):
        return list(self._rows)

    def __len__(self):
        return len(self._rows)

    def sorted(self):
        key = lambda r: (r[0], r[1], str(type(r[2])), r[2] if isinstance(r[2], (int, float)) else str(r[2]), r[3])
        return ResultTable(sorted(self._rows, key=key))

    def select(self, **where):
        idx = {c: i for i, c in enumerate(COLUMNS)}
        return [r for r in self._rows if all(r[idx[k]] == v for k, v in where.items())]

    def value(self, **where):
        rows = self.select(**where)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {where}")
        return rows[0][4]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema: {SCHEMA_VERSION}\n")
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for r in self.sorted()._rows:
                w.writerow([*r[:4], repr(r[4]), repr(r[5]), r[6], r[7]])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        rows = list(csv.reader(lines))[1:]
        out = cls()
        for e, a, res, m, v, t, n, s in rows:
            res = int(res) if res.lstrip("-").isdigit() else res
            out.append(e, a, res, m, float(v), float(t), int(n), int(s))
        return out

    def to_json(self, path=None):
        d = {"schema": SCHEMA_VERSION, "columns": list(COLUMNS), "rows": [list(r) for r in self.sorted()._rows]}
        text = json.dumps(d, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def deterministic_view(self):
        """Rows without the wall-time column."""
        return [r[:5] + r[6:] for r in self.sorted()._rows]


def fit_loglog_slope(xs, ys):
    """Least-squares line through ``(log x, log y)``; returns ``(slope, intercept, r2)``.

    Raises
    ------
    NonPositiveData
        Fewer than three pairs, or any value not strictly positive and finite.
    """
    x = np.asarray(xs, dtype=float).reshape(-1)
    y = np.asarray(ys, dtype=float).reshape(-1)
    if x.size != y.size or x.size < 3:
        raise NonPositiveData(f"need >= 3 (x, y) pairs, got {x.size} and {y.size}")
    if not (np.all(np.isfinite(x) & np.isfinite(y)) and np.all(x > 0) and np.all(y > 0)):
        raise NonPositiveData("log-log fit needs finite positive data")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    ss = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 if ss == 0 else 1.0 - np.sum((ly - (slope * lx + intercept)) ** 2) / ss
    return float(slope), float(intercept), float(r2)


def _slope_rows(table, experiment, metric, by_alg, seed):
    for alg, pts in by_alg.items():
        xs, ys = zip(*sorted(pts))
        slope, _, r2 = fit_loglog_slope(xs, ys)
        table.append(experiment, alg, "fit", f"slope({metric})", slope, 0.0, 0, seed)
        table.append(experiment, alg, "fit", f"r2({metric})", r2, 0.0, 0, seed)


# verification ---------------------------------------------------------------------

def _trapezoid(y, x, axis=-1):
    return np.trapezoid(y, x, axis=axis) if hasattr(np, "trapezoid") else np.trapz(y, x, axis=axis)


def run_verify_gaussian_1d(spec: ExperimentSpec, threads=1) -> ResultTable:
    """L1 error of each algorithm against the closed-form Jacobian over a resolution sweep.

    The error integrand ``sum_p |c_p(x) - a_p(x)| f(x)`` is integrated with the
    trapezoid rule on a uniform foreground grid over the domain of interest
    ``mu +- interest_sigmas * sigma``; per-parameter errors are also emitted.
    ``l1_error_truncated`` measures against the Gaussian truncated to the
    computational domain, which removes the domain-truncation floor.
    """
    o = spec.options
    mu, sigma = spec.params
    f = get_density(spec.density)
    k = o.get("interest_sigmas", 4.0)
    xs = np.linspace(mu - k * sigma, mu + k * sigma, int(o.get("foreground", 2**14)))
    pdf = f(xs[:, None], spec.params)
    exact = gaussian1d_jacobian_oracle(xs, spec.params)
    lo, hi = spec.grid[0]["bounds"]
    trunc = truncated_gaussian1d_jacobian_oracle(xs, spec.params, lo, hi)
    cfg = SensitivityConfig(epsilon=o.get("epsilon", 1e-5), threads=threads)
    table, slopes, slopes_t = ResultTable(), {}, {}
    name = spec.experiment
    for alg in spec.algorithms:
        for K in o.get("resolutions", [spec.grid[0]["count"]]):
            grid = spec.build_grid([K])
            counter = CountingDensity(f)
            t0 = time.monotonic()
            jac = compute_sensitivity(alg, counter, grid, spec.params, xs[:, None], cfg).jac[:, 0, :]
            wall = time.monotonic() - t0
            per = _trapezoid(np.abs(jac - exact) * pdf[:, None], xs, axis=0)
            table.append(name, alg, K, "l1_error", per.sum(), wall, counter.count, spec.seed)
            for p, label in enumerate(("mu", "sigma")):
                table.append(name, alg, K, f"l1_error[{label}]", per[p], wall, counter.count, spec.seed)
            slopes.setdefault(alg, []).append((K, per.sum()))
            e_t = _trapezoid(np.abs(jac - trunc).sum(axis=1) * pdf, xs)
            table.append(name, alg, K, "l1_error_truncated", e_t, wall, counter.count, spec.seed)
            slopes_t.setdefault(alg, []).append((K, e_t))
    _slope_rows(table, name, "l1_error", slopes, spec.seed)
    _slope_rows(table, name, "l1_error_truncated", slopes_t, spec.seed)
    return table


def run_verify_gaussian_2d(spec: ExperimentSpec, threads=1) -> ResultTable:
    """2-D analogue: Full Inv / Interp Full against the full Jacobian, the
    diagonal variants against the diagonal-approximation Jacobian.

    Only foreground points inside the Mahalanobis ellipse (squared distance
    ``<= mahalanobis_sq``) are evaluated; outside it the integrand is zero.
    """
    o = spec.options
    f = get_density(spec.density)
    fg = spec.points
    axes = [np.linspace(lo, hi, int(n)) for (lo, hi), n in zip(fg["bounds"], fg["counts"])]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    inside = f.mahalanobis_sq(mesh, spec.params) <= o.get("mahalanobis_sq", 19.313)
    pts = mesh[inside]
    pdf = f(pts, spec.params)
    oracles = {"Full Inv": gaussian2d_jacobian_oracle, "Interp Full": gaussian2d_jacobian_oracle,
               "Diag Approx": gaussian2d_diag_jacobian_oracle, "Interp Diag": gaussian2d_diag_jacobian_oracle}
    cfg = SensitivityConfig(epsilon=o.get("epsilon", 1e-5), threads=threads)
    table, slopes = ResultTable(), {}
    name = spec.experiment
    for alg in spec.algorithms:
        if alg not in oracles:
            raise ConfigError(f"{alg} is not a two-dimensional algorithm")
        exact = oracles[alg](pts, spec.params)
        for K in o.get("resolutions", [spec.grid[0]["count"]]):
            grid = spec.build_grid([K] * 2)
            counter = CountingDensity(f)
            t0 = time.monotonic()
            jac = compute_sensitivity(alg, counter, grid, spec.params, pts, cfg).jac
            wall = time.monotonic() - t0
            err = np.zeros(mesh.shape[:2] + jac.shape[1:])
            err[inside] = np.abs(jac - exact) * pdf[:, None, None]
            per = _trapezoid(_trapezoid(err, axes[1], axis=1), axes[0], axis=0)
            table.append(name, alg, K, "l1_error", per.sum(), wall, counter.count, spec.seed)
            for i in range(2):
                for p in range(5):
                    table.append(name, alg, K, f"l1_error[{i},{p}]", per[i, p], wall, counter.count, spec.seed)
            slopes.setdefault(alg, []).append((K, per.sum()))
    table.append(name, "-", "-", "foreground_points", int(inside.sum()), 0.0, 0, spec.seed)
    _slope_rows(table, name, "l1_error", slopes, spec.seed)
    return table


# validation -----------------------------------------------------------------------

def _quantile_rows(table, name, alg, res, metric, values, wall, evals, seed):
    q = np.quantile(np.asarray(values), [0.25, 0.5, 0.75], axis=0)
    for label, v in zip(("q25", "median", "q75"), q):
        table.append(name, alg, res, f"{label}({metric})", v, wall, evals, seed)
    return q[1]


def _gradient_study(table, spec, f, grid, theta, O, quad, ref, algorithms, M_list, repeats, deltas, cfg,
                    safety, tag=""):
    """Median/IQR of relative gradient errors over ``repeats`` fresh sample sets per ``M_x``.

    All algorithms share one sample set per (M_x, repeat); naive FD draws
    its own independent sets.
    """
    name = spec.experiment
    P = len(theta)
    sampler = make_sampler(f, grid, safety)
    errors = {}
    evals = {}
    walls = {}
    for M in M_list:
        for r in range(repeats):
            X = sampler(theta, M, RngSeed(spec.seed, (1, M, r)))
            _, G = energy_score_and_gradients(X, O)
            for alg in algorithms:
                counter = CountingDensity(f)
                t0 = time.monotonic()
                jac = compute_sensitivity(alg, counter, grid, theta, X, cfg).jac
                g = np.einsum("kip,ki->p", jac, G)
                walls[alg, M] = walls.get((alg, M), 0.0) + time.monotonic() - t0
                evals[alg, M] = evals.get((alg, M), 0) + counter.count
                errors.setdefault((alg, M), []).append(np.abs(g - ref) / np.abs(ref))
            for j, d in enumerate(deltas):
                alg = f"naive-FD({d:g})"
                t0 = time.monotonic()
                g = naive_fd_param_gradient(f, theta, O, sampler, M, d, RngSeed(spec.seed, (2, M, r, j)).sequence())
                walls[alg, M] = walls.get((alg, M), 0.0) + time.monotonic() - t0
                errors.setdefault((alg, M), []).append(np.abs(g - ref) / np.abs(ref))
    slopes = {}
    for (alg, M), errs in errors.items():
        for p in range(P):
            med = _quantile_rows(table, name, alg, M, f"rel_error{tag}[theta{p + 1}]", [e[p] for e in errs],
                                 walls[alg, M], evals.get((alg, M), 0), spec.seed)
            slopes.setdefault(p, {}).setdefault(alg, []).append((M, med))
    for p, by_alg in slopes.items():
        if all(len(v) >= 3 for v in by_alg.values()):
            _slope_rows(table, name, f"median(rel_error{tag}[theta{p + 1}])", by_alg, spec.seed)


def _fit_rows(table, name, label, res, truth, r, seed):
    for p, (th, tr) in enumerate(zip(r.theta_opt, truth)):
        table.append(name, label, res, f"theta_hat[theta{p + 1}]", th, r.diagnostics["wall_time"],
                     r.diagnostics["density_evals"], seed)
        table.append(name, label, res, f"ratio[theta{p + 1}]", th / tr, r.diagnostics["wall_time"],
                     r.diagnostics["density_evals"], seed)
    table.append(name, label, res, "final_loss", r.final_loss, r.diagnostics["wall_time"],
                 r.diagnostics["density_evals"], seed)


def run_validate_beta(spec: ExperimentSpec, threads=1) -> ResultTable:
    """Gradient-error sweep over ``M_x`` against the continuous score, then ADAM fits.

    Observations are ``M_o`` draws at ``truth``; the reference gradient is
    the normalized continuous score on a ``quad_points`` Gauss-Legendre rule
    over (0, 1).  Fits report their final loss as the expected score
    (``loss_estimate``) on ``loss_quad_cells`` log-distributed cells with
    ``loss_quad_points`` points each, unless ``loss_estimate`` is "sampled".
    """
    o = spec.options
    f = get_density(spec.density)
    grid = spec.build_grid()
    safety = o.get("safety", 1.05)
    theta, truth = np.array(spec.params), np.array(o["truth"])
    O = make_sampler(f, grid, safety)(truth, int(o["M_o"]), RngSeed(spec.seed, (0,)))
    quad = gauss_legendre([(0.0, 1.0)], int(o.get("quad_points", 16)))
    cfg = SensitivityConfig(epsilon=o.get("epsilon", 1e-5), threads=threads)
    table = ResultTable()
    name = spec.experiment
    if o.get("gradient_study", True):
        ref = continuous_energy_param_gradient(f, pdf_param_gradient_of(f), theta, O, quad)
        for p, v in enumerate(ref):
            table.append(name, "continuous", "-", f"reference_gradient[theta{p + 1}]", v, 0.0, 0, spec.seed)
        algs = [a for a in spec.algorithms if a in ALGORITHMS]
        _gradient_study(table, spec, f, grid, theta, O, quad, ref, algs, [int(m) for m in o["M_x"]],
                        int(o.get("repeats", 20)), o.get("fd_deltas", [1e-3, 1e-5]), cfg, safety)
    if o.get("fit", True):
        loss_quad = composite_gauss_legendre([unit_interval_edges(int(o.get("loss_quad_cells", 400)), 1e-10)],
                                             int(o.get("loss_quad_points", 16)))
        for alg in o.get("fit_algorithms", ["1D Alg", "naive-FD"]):
            fc = FitConfig(alg, grid, o["param_box"], optimizer="adam", learning_rate=o.get("learning_rate", 0.01),
                           epochs=int(o.get("epochs", 3000)), M_x=int(o.get("fit_M_x", 10000)), seed=spec.seed,
                           init=tuple(theta), safety=safety, fd_delta=o.get("fit_fd_delta", 1e-3), quad=quad,
                           sensitivity=cfg, loss_estimate=o.get("loss_estimate", "expected"), loss_quad=loss_quad)
            _fit_rows(table, name, alg, "fit", truth, fit(f, O, fc), spec.seed)
    return table


def unit_interval_edges(cells, lo=1e-8):
    """``cells`` cells on [0, 1], geometric towards both ends down to width ``lo``."""
    return np.concatenate([[0.0], np.geomspace(lo, 0.5, cells // 2),
                           1.0 - np.geomspace(0.5, lo, cells - cells // 2)[1:], [1.0]])


def proxy_quadrature(cells=50, points=9, lo=1e-8):
    """Log-distributed cells on (0, 1)^2 with Gauss-Legendre points per cell."""
    edges = unit_interval_edges(cells, lo)
    return composite_gauss_legendre([edges, edges], points)


def run_validate_proxy(spec: ExperimentSpec, threads=1) -> ResultTable:
    """Optional gradient sweep, then bootstrap inference at each ``M_o``.

    Observations come from a fine log-spaced observation grid at ``truth``;
    each bootstrap keeps the best of ``restarts`` fits by final loss.  Emits
    the bootstrap quantiles of ``theta_hat / truth`` and of the L1 error of
    the fitted normalized density.
    """
    o = spec.options
    f = get_density(spec.density)
    truth = np.array(o["truth"])
    safety = o.get("safety", 1.05)
    cfg = SensitivityConfig(epsilon=o.get("epsilon", 1e-5), threads=threads)
    og = o["observation_grid"]
    obs_grid = RectilinearGrid.from_bounds([og["bounds"]] * 2, [og["count"]] * 2, "log")
    quad = proxy_quadrature(int(o.get("quad_cells", 50)), int(o.get("quad_points", 9)))
    table = ResultTable()
    name = spec.experiment
    M_os = [int(m) for m in np.atleast_1d(o["M_o"])]
    if o.get("gradient_study", False):
        M_o = M_os[0]
        O = make_sampler(f, obs_grid, safety)(truth, M_o, RngSeed(spec.seed, (0, M_o)))
        theta = np.array(spec.params)
        ax = spec.grid[0]
        ggrid = RectilinearGrid.from_bounds([ax["bounds"]] * 2, [int(o.get("gradient_grid", 1024))] * 2, "log")
        ref = continuous_energy_param_gradient(f, pdf_param_gradient_of(f), theta, O, quad)
        _gradient_study(table, spec, f, ggrid, theta, O, quad, ref, spec.algorithms,
                        [int(m) for m in o["gradient_M_x"]], int(o.get("gradient_repeats", 100)),
                        o.get("fd_deltas", []), cfg, safety)
    if o.get("inference", True):
        grid = spec.build_grid()
        l1_quad = proxy_quadrature(int(o.get("l1_quad_cells", 50)), int(o.get("l1_quad_points", 9)))
        for alg in spec.algorithms:
            for M_o in M_os:
                O = make_sampler(f, obs_grid, safety)(truth, M_o, RngSeed(spec.seed, (0, M_o)))
                fc = FitConfig(alg, grid, o["param_box"], optimizer=o.get("optimizer", "adam"),
                               learning_rate=o.get("learning_rate", 0.02), epochs=int(o.get("epochs", 150)),
                               M_x=int(o.get("fit_M_x", 500)), seed=spec.seed, safety=safety, quad=quad,
                               sensitivity=cfg, eval_M_x=o.get("eval_M_x"))
                t0 = time.monotonic()
                run = bootstrap_fit(f, O, fc, int(o.get("n_bootstrap", 20)), int(o.get("restarts", 3)))
                wall = time.monotonic() - t0
                evals = sum(r.diagnostics["density_evals"] for r in run.fits)
                ratios = run.theta_hats / truth
                for p in range(len(truth)):
                    _quantile_rows(table, name, alg, M_o, f"ratio[theta{p + 1}]", ratios[:, p], wall, evals,
                                   spec.seed)
                l1 = [l1_pdf_error(f, th, truth, l1_quad) for th in run.theta_hats]
                _quantile_rows(table, name, alg, M_o, "l1_pdf_error", l1, wall, evals, spec.seed)
                failures = sum(len(r.diagnostics["failures"]) for r in run.fits)
                table.append(name, alg, M_o, "failed_restarts", failures, wall, evals, spec.seed)
    return table


RUNNERS = {
    "verify-gaussian-1d": run_verify_gaussian_1d,
    "verify-gaussian-2d": run_verify_gaussian_2d,
    "validate-beta": run_validate_beta,
    "validate-proxy": run_validate_proxy,
}
