"""Space-parameter sensitivities dx/dtheta from 1-D conditional CDFs.

Five algorithms are provided:

``1D Alg``       -(1/f) dF/dtheta for a 1-D density, one point at a time
``Full Inv``     per point, J = -(grad_x F)^-1 grad_theta F from conditional lines
``Interp Full``  the same system solved at grid vertices, then interpolated
``Diag Approx``  per point, each row from the 1-D formula on a conditional line
``Interp Diag``  the diagonal formula evaluated at vertices, then interpolated

All derivatives of F are central differences with step ``epsilon`` (used for
both parameter and spatial perturbations).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cdf import conditionals_nd, normalized_cdf_lines
from .errors import (
    ConfigError,
    DensityTooSmall,
    ShapeMismatch,
    SingularSystem,
    UnknownAlgorithm,
    ZeroMass,
)
from .grid import GridLine, RectilinearGrid, _check_inside, fd_derivative_along, interp_1d, interpolate_many

__all__ = [
    "ALGORITHMS",
    "canonical_algorithm",
    "SensitivityConfig",
    "JacobianBatch",
    "sensitivity_1d",
    "sensitivity_1d_batch",
    "sensitivity_nd_full",
    "sensitivity_nd_full_batch",
    "full_system",
    "sensitivity_nd_grid",
    "sensitivity_nd_diag",
    "sensitivity_nd_diag_batch",
    "sensitivity_nd_grid_diag",
    "compute_sensitivity",
    "predict_call_count",
]

ALGORITHMS = ("1D Alg", "Full Inv", "Interp Full", "Diag Approx", "Interp Diag")
_KEYS = {a.lower().replace(" ", ""): a for a in ALGORITHMS}
_KEYS.update({"1d": "1D Alg", "fullinverse": "Full Inv", "diag": "Diag Approx"})


def canonical_algorithm(name):
    """Map ``"interp_diag"``, ``"Interp Diag"``, ``"interp-diag"`` ... to the canonical label."""
    key = str(name).lower().replace(" ", "").replace("_", "").replace("-", "")
    try:
        return _KEYS[key]
    except KeyError:
        raise UnknownAlgorithm(f"unknown sensitivity algorithm {name!r}; known: {list(ALGORITHMS)}") from None


@dataclass(frozen=True)
class SensitivityConfig:
    """Numerical settings shared by all algorithms.

    ``density_floor`` is relative: a conditional density below
    ``density_floor * max(conditional density on the line)`` is an error.
    """

    grid: Optional[RectilinearGrid] = None
    epsilon: float = 1e-5
    condition_limit: float = 1e12
    density_floor: float = 1e-12
    threads: int = 1
    # upper bound on array elements materialized per chunk of points
    chunk_elements: int = 2_000_000

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not self.condition_limit > 1:
            raise ConfigError(f"condition_limit must exceed 1, got {self.condition_limit}")
        if not self.density_floor >= 0:
            raise ConfigError(f"density_floor must be nonnegative, got {self.density_floor}")
        if int(self.threads) < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")


@dataclass
class JacobianBatch:
    """Sensitivities ``jac[m, i, j] = d x_i / d theta_j`` at ``points[m]``."""

    points: np.ndarray
    jac: np.ndarray
    algorithm: str = ""
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.jac = np.asarray(self.jac, dtype=float)
        if self.points.ndim != 2 or self.jac.ndim != 3 or self.jac.shape[:2] != self.points.shape:
            raise ShapeMismatch(f"points {self.points.shape} and jac {self.jac.shape} are inconsistent")

    @property
    def shape(self):
        return self.jac.shape

    def __len__(self):
        return self.points.shape[0]

    def header(self):
        M, N, P = self.jac.shape
        cols = [f"x{i + 1}" for i in range(N)]
        cols += [f"J_{i + 1}_{j + 1}" for i in range(N) for j in range(P)]
        return cols

    def to_csv(self, path):
        M, N, P = self.jac.shape
        table = np.concatenate([self.points, self.jac.reshape(M, N * P)], axis=1)
        np.savetxt(path, table, delimiter=",", header=",".join(self.header()), comments="", fmt="%.17g")

    def to_json(self, path=None):
        doc = {
            "algorithm": self.algorithm,
            "shape": list(self.jac.shape),
            "layout": "jac[m][i][j] = d x_i / d theta_j",
            "points": self.points.tolist(),
            "jac": self.jac.tolist(),
            "diagnostics": _jsonable(self.diagnostics),
        }
        text = json.dumps(doc)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path):
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text).read_text()
        doc = json.loads(text)
        M, N, P = doc["shape"]
        pts = np.array(doc["points"], dtype=float).reshape(M, N)
        jac = np.array(doc["jac"], dtype=float).reshape(M, N, P)
        return cls(pts, jac, doc.get("algorithm", ""), doc.get("diagnostics", {}))

    @classmethod
    def from_csv(cls, path, ndim, algorithm=""):
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        N = int(ndim)
        P = (table.shape[1] - N) // N
        return cls(table[:, :N], table[:, N:].reshape(-1, N, P), algorithm)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# failure bookkeeping --------------------------------------------------------

_SEVERITY = (SingularSystem, DensityTooSmall, ZeroMass)


class _Failures:
    def __init__(self):
        self.items = []

    def add(self, kind, indices, message):
        for k in np.atleast_1d(indices):
            self.items.append((int(k), kind, message))

    def raise_if_any(self, batch):
        if not self.items:
            return
        self.items.sort(key=lambda t: t[0])
        kinds = {t[1] for t in self.items}
        kind = next(k for k in _SEVERITY if k in kinds)
        pts = sorted({t[0] for t in self.items})
        err = kind(
            f"{len(pts)} of {len(batch)} point(s) failed ({', '.join(sorted(k.__name__ for k in kinds))}); "
            f"first: point {self.items[0][0]}: {self.items[0][2]}",
            [(t[0], f"{t[1].__name__}: {t[2]}") for t in self.items],
        )
        err.partial = batch
        raise err


def _map_chunks(fn, M, chunk, threads, safe):
    """Apply ``fn(lo, hi)`` over fixed chunks; results come back in chunk order."""
    bounds = [(lo, min(M, lo + chunk)) for lo in range(0, M, chunk)]
    if threads > 1 and safe and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(lambda b: fn(*b), bounds))
    return [fn(*b) for b in bounds]


def _as_points(points, N):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1 and N == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[1] != N:
        raise ShapeMismatch(f"expected points of shape (M, {N}), got {pts.shape}")
    return pts


def _param_shift(params, j, eps):
    p = np.array(params, dtype=float)
    p[j] += eps
    return p


def _line_points(X, axis, vertices, shifts=None):
    """Points on the axis-aligned lines through each row of ``X``.

    Returns shape ``(m, L, K, N)`` where line ``l`` is moved by ``shifts[l]``
    (an N-vector) before its ``axis`` coordinate is replaced by
    ``vertices + shifts[l, axis]``.
    """
    m, N = X.shape
    if shifts is None:
        shifts = np.zeros((1, N))
    L, K = shifts.shape[0], vertices.size
    pts = np.empty((m, L, K, N))
    pts[...] = (X[:, None, :] + shifts[None, :, :])[:, :, None, :]
    pts[..., axis] = vertices[None, None, :] + shifts[None, :, axis, None]
    return pts


def _params_of(f, params):
    p = np.asarray(params, dtype=float).reshape(-1)
    check = getattr(f, "check_params", None)
    return check(p) if check is not None else p


# 1-D and diagonal (per point) ---------------------------------------------

def _diag_rows(f, grid, params, X, cfg, fails, offset):
    """Rows of the diagonal formula, each computed on its own conditional line.

    Uses ``N + (2P + 1) sum K_i`` density evaluations per point.
    """
    m, N = X.shape
    P = params.size
    eps = cfg.epsilon
    J = np.empty((m, N, P))
    for i, axis in enumerate(grid.axes):
        v = axis.vertices
        fx = np.asarray(f(X, params), dtype=float).reshape(m)
        base = _line_points(X, i, v)[:, 0]
        vals = np.asarray(f(base, params), dtype=float)
        _, c = normalized_cdf_lines(vals, v)
        with np.errstate(divide="ignore", invalid="ignore"):
            f_norm = fx / c
            fmax = np.max(vals, axis=-1) / c
        xi = X[:, i]
        delta = np.empty((m, P))
        bad_mass = ~(np.isfinite(c) & (c > 0))
        for j in range(P):
            phi_p, cp = normalized_cdf_lines(f(base, _param_shift(params, j, eps)), v)
            phi_m, cm = normalized_cdf_lines(f(base, _param_shift(params, j, -eps)), v)
            bad_mass |= ~(np.isfinite(cp) & (cp > 0) & np.isfinite(cm) & (cm > 0))
            delta[:, j] = interp_1d(xi, v, (phi_p - phi_m) / (2.0 * eps))
        with np.errstate(divide="ignore", invalid="ignore"):
            J[:, i, :] = -delta / f_norm[:, None]
        small = ~bad_mass & ~(f_norm >= cfg.density_floor * fmax)
        if np.any(bad_mass):
            fails.add(ZeroMass, offset + np.flatnonzero(bad_mass), f"conditional line along axis {i} has no mass")
        if np.any(small):
            k = np.flatnonzero(small)
            fails.add(
                DensityTooSmall,
                offset + k,
                f"conditional density along axis {i} below floor "
                f"{cfg.density_floor:g} x line max (value {f_norm[k[0]]:.3g} at x={X[k[0]].tolist()})",
            )
        J[:, i, :][bad_mass | small] = np.nan
    return J


def _run_per_point(kernel, f, grid, params, points, cfg, algorithm, per_point_elems):
    cfg = cfg or SensitivityConfig()
    params = _params_of(f, params)
    X = _as_points(points, grid.ndim)
    M, N = X.shape
    P = params.size
    if M == 0:
        return JacobianBatch(X, np.zeros((0, N, P)), algorithm)
    _check_inside(X, grid)
    chunk = max(1, int(cfg.chunk_elements // max(1, per_point_elems)))

    def work(lo, hi):
        fails = _Failures()
        out = kernel(f, grid, params, X[lo:hi], cfg, fails, lo)
        return out, fails

    parts = _map_chunks(work, M, chunk, int(cfg.threads), getattr(f, "concurrency_safe", False))
    jac = np.concatenate([p[0][0] for p in parts])
    fails = _Failures()
    extra = {}
    for (_, info), fl in parts:
        fails.items.extend(fl.items)
        for k, v in info.items():
            extra.setdefault(k, []).append(v)
    diag = {"boundary_points": _boundary_points(X, grid)}
    if "cond" in extra:
        cond = np.concatenate(extra["cond"])
        diag["max_condition"] = float(np.max(cond)) if cond.size else float("nan")
    batch = JacobianBatch(X, jac, algorithm, diag)
    fails.raise_if_any(batch)
    return batch


def _boundary_points(X, grid):
    on = np.any((X == grid.lower) | (X == grid.upper), axis=1)
    return np.flatnonzero(on).tolist()


def _diag_kernel(f, grid, params, X, cfg, fails, offset):
    return _diag_rows(f, grid, params, X, cfg, fails, offset), {}


def sensitivity_nd_diag_batch(f, grid: RectilinearGrid, params, points, cfg=None) -> JacobianBatch:
    """``Diag Approx`` at many points; each point is processed independently."""
    P = np.size(params)
    K = max(len(a) for a in grid.axes)
    return _run_per_point(_diag_kernel, f, grid, params, points, cfg, "Diag Approx", 4 * K * grid.ndim + P)


def sensitivity_nd_diag(f, grid: RectilinearGrid, params, x, cfg=None):
    """``Diag Approx`` at one point: row ``i`` is the 1-D formula on the axis-``i`` line through ``x``.

    Returns an ``N x P`` array.
    """
    x = np.asarray(x, dtype=float).reshape(1, grid.ndim)
    return sensitivity_nd_diag_batch(f, grid, params, x, cfg).jac[0]


def sensitivity_1d(f, line, params, x, cfg=None):
    """1-D sensitivity ``-(1/f) dF/dtheta`` at a single point.

    ``f`` takes points of shape ``(..., 1)``.  Consumes ``(2P + 1) K + 1``
    evaluations (the extra one is ``f(x)``).

    Returns
    -------
    ndarray of shape (P,)
    """
    line = line if isinstance(line, GridLine) else GridLine(line)
    grid = RectilinearGrid((line,))
    return sensitivity_nd_diag(f, grid, params, np.reshape(x, (1,)), cfg)[0]


def sensitivity_1d_batch(f, line, params, xs, cfg=None) -> JacobianBatch:
    """1-D sensitivities at many points sharing the same CDF lines.

    Numerically identical to calling :func:`sensitivity_1d` per point but the
    ``2P + 1`` lines are evaluated once: ``(2P + 1) K + M`` evaluations.
    """
    cfg = cfg or SensitivityConfig()
    line = line if isinstance(line, GridLine) else GridLine(line)
    grid = RectilinearGrid((line,))
    params = _params_of(f, params)
    X = _as_points(np.asarray(xs, dtype=float).reshape(-1, 1), 1)
    M, P = X.shape[0], params.size
    if M == 0:
        return JacobianBatch(X, np.zeros((0, 1, P)), "1D Alg")
    _check_inside(X, grid)
    v = line.vertices
    eps = cfg.epsilon
    vals = np.asarray(f(v[:, None], params), dtype=float)
    _, c = normalized_cdf_lines(vals, v)
    c = float(c)
    if not (np.isfinite(c) and c > 0):
        raise ZeroMass(f"density mass on [{v[0]}, {v[-1]}] is {c}")
    deltas = np.empty((P, v.size))
    for j in range(P):
        phi_p, cp = normalized_cdf_lines(f(v[:, None], _param_shift(params, j, eps)), v)
        phi_m, cm = normalized_cdf_lines(f(v[:, None], _param_shift(params, j, -eps)), v)
        if not (cp > 0 and cm > 0 and np.isfinite(cp) and np.isfinite(cm)):
            raise ZeroMass(f"perturbed density along parameter {j} has no mass on the line")
        deltas[j] = (phi_p - phi_m) / (2.0 * eps)
    fx = np.asarray(f(X, params), dtype=float).reshape(M)
    f_norm = fx / c
    fmax = float(np.max(vals)) / c
    xi = X[:, 0]
    J = np.empty((M, 1, P))
    for j in range(P):
        with np.errstate(divide="ignore", invalid="ignore"):
            J[:, 0, j] = -interp_1d(xi, v, deltas[j]) / f_norm
    fails = _Failures()
    small = ~(f_norm >= cfg.density_floor * fmax)
    if np.any(small):
        k = np.flatnonzero(small)
        fails.add(DensityTooSmall, k, f"density below floor (value {f_norm[k[0]]:.3g} at x={xi[k[0]]})")
        J[small] = np.nan
    batch = JacobianBatch(X, J, "1D Alg", {"boundary_points": _boundary_points(X, grid)})
    fails.raise_if_any(batch)
    return batch


# full system (per point) ---------------------------------------------------

def _solve_systems(H, G, cfg):
    """Solve ``H J = G`` for a stack of small systems with condition screening.

    Returns ``(J, cond)``; unusable systems give NaN rows in ``J`` and
    ``inf`` in ``cond``.
    """
    n = H.shape[-1]
    finite = np.all(np.isfinite(H), axis=(-2, -1)) & np.all(np.isfinite(G), axis=(-2, -1))
    Hs = np.where(finite[:, None, None], H, np.eye(n))
    Gs = np.where(finite[:, None, None], G, 0.0)
    # row equilibration: the condition estimate ignores per-row scale
    scale = np.max(np.abs(Hs), axis=-1, keepdims=True)
    ok_scale = np.all(scale > 0, axis=(-2, -1))
    scale = np.where(scale > 0, scale, 1.0)
    He, Ge = Hs / scale, Gs / scale
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(He, 1)
    cond = np.where(np.isfinite(cond) & finite & ok_scale, cond, np.inf)
    good = cond <= cfg.condition_limit
    He = np.where(good[:, None, None], He, np.eye(n))
    J = np.linalg.solve(He, Ge)
    J[~good] = np.nan
    return J, cond


def _trapezoid_consistent(values, vertices):
    """Line values plus the trapezoid rule's leading error ``h^2 f''/12``.

    Differencing a trapezoid CDF in a parameter integrates d f/d theta with
    that same error, so a diagonal built from these values matches the
    off-diagonal and parameter columns to higher order (a location parameter
    then gives a sensitivity of exactly 1).
    """
    h = np.diff(vertices)
    hl, hr = h[:-1], h[1:]
    d2 = 2.0 * ((values[..., 2:] - values[..., 1:-1]) / hr - (values[..., 1:-1] - values[..., :-2]) / hl) / (hl + hr)
    hc = 0.5 * (hl + hr)
    out = values.copy()
    out[..., 1:-1] += hc * hc * d2 / 12.0
    # end vertices reuse the neighbouring curvature
    out[..., 0] += h[0] ** 2 * d2[..., 0] / 12.0
    out[..., -1] += h[-1] ** 2 * d2[..., -1] / 12.0
    return out


def _full_systems(f, grid, params, X, cfg):
    """``H = -grad_x F`` and ``G = grad_theta F`` at each row of ``X``.

    Returns ``(H, G, no_mass, too_small)``.
    """
    m, N = X.shape
    P = params.size
    eps = cfg.epsilon
    H = np.empty((m, N, N))
    G = np.empty((m, N, P))
    shifts = np.zeros((2 * N, N))
    for j in range(N):
        shifts[2 * j, j] = eps
        shifts[2 * j + 1, j] = -eps
    bad = np.zeros(m, dtype=bool)
    small = np.zeros(m, dtype=bool)
    for i, axis in enumerate(grid.axes):
        v = axis.vertices
        xi = X[:, i:i + 1]
        # spatial perturbations, including along the conditional's own axis
        vals = np.asarray(f(_line_points(X, i, v, shifts), params), dtype=float)
        phi, c = normalized_cdf_lines(vals, v)
        bad |= ~np.all(np.isfinite(c) & (c > 0), axis=1)
        at = interp_1d(xi, v, phi)
        H[:, i, :] = -(at[:, 0::2] - at[:, 1::2]) / (2.0 * eps)
        # Along axis i the +-eps lines are the same line slid by +-eps, and
        # differencing their CDFs also moves both integration limits, which
        # breaks down where f is steep at the box edge.  The two samples
        # average to the unshifted line (error O(eps^2)); dF_i/dx_i is then
        # f(x)/c with f(x) interpolated from the trapezoid-consistent values.
        up, dn = 2 * i, 2 * i + 1
        mid = 0.5 * (vals[:, up] + vals[:, dn])
        _, cmid = normalized_cdf_lines(mid, v)
        with np.errstate(divide="ignore", invalid="ignore"):
            H[:, i, i] = -interp_1d(xi[:, 0], v, _trapezoid_consistent(mid, v)) / cmid
            fmax = np.max(mid, axis=-1) / cmid
        small |= ~(np.abs(H[:, i, i]) >= cfg.density_floor * fmax)
        # parameter perturbations on the line through x
        base = _line_points(X, i, v)[:, 0]
        for j in range(P):
            phi_p, cp = normalized_cdf_lines(f(base, _param_shift(params, j, eps)), v)
            phi_m, cm = normalized_cdf_lines(f(base, _param_shift(params, j, -eps)), v)
            bad |= ~(np.isfinite(cp) & (cp > 0) & np.isfinite(cm) & (cm > 0))
            G[:, i, j] = interp_1d(xi[:, 0], v, (phi_p - phi_m) / (2.0 * eps))
    return H, G, bad, small & ~bad


def full_system(f, grid: RectilinearGrid, params, x, cfg=None):
    """The ``Full Inv`` linear system at one point: ``(H, G)`` with ``H = -grad_x F``."""
    cfg = cfg or SensitivityConfig()
    X = np.asarray(x, dtype=float).reshape(1, grid.ndim)
    _check_inside(X, grid)
    H, G, _, _ = _full_systems(f, grid, _params_of(f, params), X, cfg)
    return H[0], G[0]


def _full_kernel(f, grid, params, X, cfg, fails, offset):
    H, G, bad, small = _full_systems(f, grid, params, X, cfg)
    J, cond = _solve_systems(H, G, cfg)
    singular = ~np.isfinite(J).all(axis=(1, 2)) & ~bad & ~small
    if np.any(bad):
        fails.add(ZeroMass, offset + np.flatnonzero(bad), "a conditional line has no mass")
    if np.any(small):
        fails.add(DensityTooSmall, offset + np.flatnonzero(small), f"conditional density below floor {cfg.density_floor:g} x line max")
    if np.any(singular):
        k = np.flatnonzero(singular)
        fails.add(
            SingularSystem,
            offset + k,
            f"grad_x F is singular or ill-conditioned (estimate {cond[k[0]]:.3g} > {cfg.condition_limit:g})",
        )
    J[bad | small] = np.nan
    return J, {"cond": cond}


def sensitivity_nd_full_batch(f, grid: RectilinearGrid, params, points, cfg=None) -> JacobianBatch:
    """``Full Inv`` at many points, ``2 (N + P) sum K_i`` evaluations per point.

    The spatial derivative along the conditional's own axis is a central
    difference of the line shifted by ``+-epsilon``, so the density is
    evaluated up to ``epsilon`` beyond the grid box.
    """
    N = grid.ndim
    P = np.size(params)
    K = max(len(a) for a in grid.axes)
    return _run_per_point(_full_kernel, f, grid, params, points, cfg, "Full Inv", 4 * N * N * K + 4 * K * P)


def sensitivity_nd_full(f, grid: RectilinearGrid, params, x, cfg=None):
    """``Full Inv`` at one point; returns an ``N x P`` array."""
    x = np.asarray(x, dtype=float).reshape(1, grid.ndim)
    return sensitivity_nd_full_batch(f, grid, params, x, cfg).jac[0]


# vertex fields + interpolation --------------------------------------------

def _interp_chunks(points, grid, values, cfg, safe=True):
    M = points.shape[0]
    width = int(np.prod(values.shape[grid.ndim:], dtype=int)) * (2 ** grid.ndim + 2)
    chunk = max(1, int(cfg.chunk_elements // max(1, width)))
    parts = _map_chunks(lambda lo, hi: interpolate_many(points[lo:hi], grid, values), M, chunk, int(cfg.threads), safe)
    return np.concatenate(parts) if parts else np.zeros((0,) + values.shape[grid.ndim:])


def _param_cdf_derivatives(f, grid, params, eps):
    """``dPhi_i/dtheta_j`` at all vertices, shape ``grid.shape + (N, P)``."""
    N, P = grid.ndim, params.size
    out = np.empty(grid.shape + (N, P))
    for j in range(P):
        cp = conditionals_nd(f, grid, _param_shift(params, j, eps))
        cm = conditionals_nd(f, grid, _param_shift(params, j, -eps))
        for i in range(N):
            out[..., i, j] = (cp.cdf_array(i) - cm.cdf_array(i)) / (2.0 * eps)
    return out


def sensitivity_nd_grid(f, grid: RectilinearGrid, params, points, cfg=None) -> JacobianBatch:
    """``Interp Full``: vertex Jacobians from on-grid stencils, then multilinear interpolation.

    Uses ``(2P + 1) prod K_i`` evaluations regardless of the number of points.
    """
    cfg = cfg or SensitivityConfig()
    params = _params_of(f, params)
    X = _as_points(points, grid.ndim)
    _check_inside(X, grid)
    N, P = grid.ndim, params.size
    cf = conditionals_nd(f, grid, params)
    G = _param_cdf_derivatives(f, grid, params, cfg.epsilon)
    H = np.empty(grid.shape + (N, N))
    for i in range(N):
        Phi = cf.cdf_array(i)
        for k, axis in enumerate(grid.axes):
            H[..., i, k] = fd_derivative_along(Phi, axis.vertices, k)
    Jf, cond = _solve_systems(H.reshape(-1, N, N), G.reshape(-1, N, P), cfg)
    Jv = (-Jf).reshape(grid.shape + (N, P))
    cond = cond.reshape(grid.shape)
    J = _interp_chunks(X, grid, Jv, cfg)
    diag = {
        "boundary_points": _boundary_points(X, grid),
        "singular_vertices": int(np.sum(~np.isfinite(cond) | (cond > cfg.condition_limit))),
        "max_condition": float(np.max(cond)) if cond.size else float("nan"),
        "max_cell_fraction": cf.max_cell_fraction,
    }
    batch = JacobianBatch(X, J, "Interp Full", diag)
    fails = _Failures()
    badpts = np.flatnonzero(~np.isfinite(J).all(axis=(1, 2)))
    if badpts.size:
        badv = np.argwhere(~(cond <= cfg.condition_limit))
        where = tuple(int(t) for t in badv[0]) if badv.size else "?"
        fails.add(
            SingularSystem,
            badpts,
            f"interpolation touches a vertex with a singular or ill-conditioned system (first vertex {where})",
        )
    fails.raise_if_any(batch)
    return batch


def sensitivity_nd_grid_diag(f, grid: RectilinearGrid, params, points, cfg=None) -> JacobianBatch:
    """``Interp Diag``: ``J[m, i, j] = -interp(dPhi_i/dtheta_j) / interp(phi_i)``.

    Uses ``(2P + 1) prod K_i`` evaluations regardless of the number of points.
    """
    cfg = cfg or SensitivityConfig()
    params = _params_of(f, params)
    X = _as_points(points, grid.ndim)
    _check_inside(X, grid)
    N = grid.ndim
    cf = conditionals_nd(f, grid, params)
    phi_v = np.stack([cf.pdf_array(i) for i in range(N)], axis=-1)
    delta_v = _param_cdf_derivatives(f, grid, params, cfg.epsilon)
    phi = _interp_chunks(X, grid, phi_v, cfg)
    delta = _interp_chunks(X, grid, delta_v, cfg)
    with np.errstate(divide="ignore", invalid="ignore"):
        J = -delta / phi[:, :, None]
    floor = cfg.density_floor * np.max(phi_v.reshape(-1, N), axis=0)
    small = ~(phi >= floor)
    fails = _Failures()
    if np.any(small):
        k = np.flatnonzero(small.any(axis=1))
        fails.add(
            DensityTooSmall,
            k,
            f"interpolated conditional density below floor (first at x={X[k[0]].tolist()})",
        )
        J[small.any(axis=1)] = np.nan
    batch = JacobianBatch(
        X, J, "Interp Diag",
        {"boundary_points": _boundary_points(X, grid), "max_cell_fraction": cf.max_cell_fraction},
    )
    fails.raise_if_any(batch)
    return batch


def compute_sensitivity(algorithm, f, grid: RectilinearGrid, params, points, cfg=None) -> JacobianBatch:
    """Dispatch by algorithm label; ``1D Alg`` uses the shared-line batch variant."""
    name = canonical_algorithm(algorithm)
    if name == "1D Alg":
        if grid.ndim != 1:
            raise ConfigError("1D Alg needs a one-dimensional grid")
        return sensitivity_1d_batch(f, grid.axes[0], params, points, cfg)
    fn = {
        "Full Inv": sensitivity_nd_full_batch,
        "Interp Full": sensitivity_nd_grid,
        "Diag Approx": sensitivity_nd_diag_batch,
        "Interp Diag": sensitivity_nd_grid_diag,
    }[name]
    return fn(f, grid, params, points, cfg)


def predict_call_count(algorithm, M, N, P, K):
    """Closed-form number of density evaluations.

    ``K`` is the per-axis vertex count sequence (length ``N``).  ``1D Alg``
    is the per-point algorithm, ``M ((2P + 1) K + 1)``.
    """
    name = canonical_algorithm(algorithm)
    K = [int(k) for k in np.atleast_1d(K)]
    M, N, P = int(M), int(N), int(P)
    if M < 0 or N < 1 or P < 1 or len(K) != N or min(K) < 3:
        raise ConfigError(f"invalid sizes M={M}, N={N}, P={P}, K={K}")
    sk = sum(K)
    pk = math.prod(K)
    if name == "1D Alg":
        if N != 1:
            raise ConfigError("1D Alg is defined for N = 1 only")
        return M * ((2 * P + 1) * K[0] + 1)
    if name == "Full Inv":
        return 2 * M * (N + P) * sk
    if name == "Diag Approx":
        return M * (N + (2 * P + 1) * sk)
    return (2 * P + 1) * pk
