"""Trapezoidal CDFs on gridlines and all-axes conditional PDF/CDF fields."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ZeroMass
from .grid import GridLine, RectilinearGrid, VertexField, load_vertex_field, save_vertex_field

__all__ = [
    "Cdf1dResult",
    "CondField",
    "cdf_1d",
    "cumulative_trapezoid",
    "normalized_cdf_lines",
    "conditionals_nd",
    "restrict_to_line",
    "save_cond_field",
    "load_cond_field",
]


@dataclass(frozen=True)
class Cdf1dResult:
    phi: np.ndarray
    c: float


def cumulative_trapezoid(values, vertices, axis=-1):
    """Running trapezoid sums along ``axis``, starting at exactly 0.

    Each line is a sequential prefix sum, so the result does not depend on how
    lines are batched.
    """
    values = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    h = np.diff(np.asarray(vertices, dtype=float))
    cells = (values[..., :-1] + values[..., 1:]) * h / 2.0
    out = np.empty_like(values)
    out[..., 0] = 0.0
    np.cumsum(cells, axis=-1, out=out[..., 1:])
    return np.moveaxis(out, -1, axis)


def normalized_cdf_lines(values, vertices):
    """Normalized CDFs of many lines of density values (last axis = line).

    Returns ``(phi, c)``; lines with non-positive or non-finite mass give
    ``c`` that fails ``c > 0`` and are left for the caller to report.
    """
    cum = cumulative_trapezoid(values, vertices)
    c = cum[..., -1].copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = cum / c[..., None]
    return phi, c


def restrict_to_line(f, point, axis):
    """1-D density ``s -> f(point + (s - point[axis]) e_axis)``."""
    point = np.asarray(point, dtype=float)

    def g(s, params):
        s = np.asarray(s, dtype=float)
        if s.ndim and s.shape[-1] == 1:
            s = s[..., 0]
        pts = np.broadcast_to(point, s.shape + point.shape).copy()
        pts[..., axis] = s
        return f(pts, params)

    g.ndim = 1
    g.nparams = getattr(f, "nparams", None)
    g.concurrency_safe = getattr(f, "concurrency_safe", False)
    return g


def cdf_1d(f, line, params) -> Cdf1dResult:
    """Normalized trapezoidal CDF of a 1-D density at the vertices of ``line``.

    Consumes exactly ``K`` density evaluations.

    Raises
    ------
    ZeroMass
        If the trapezoid mass is not a positive finite number.
    """
    v = line.vertices if isinstance(line, GridLine) else GridLine(line).vertices
    vals = np.asarray(f(v[:, None], params), dtype=float).reshape(-1)
    phi, c = normalized_cdf_lines(vals, v)
    c = float(c)
    if not (np.isfinite(c) and c > 0):
        raise ZeroMass(f"density mass on [{v[0]}, {v[-1]}] is {c}; the line misses the support")
    phi[-1] = 1.0
    return Cdf1dResult(phi, c)


@dataclass(frozen=True)
class CondField:
    """Conditional PDFs ``cond_pdfs[i]`` and CDFs ``cond_cdfs[i]`` along each axis ``i``."""

    grid: RectilinearGrid
    cond_pdfs: tuple
    cond_cdfs: tuple
    # largest single-cell share of a line's mass; values near 1 suggest aliasing
    max_cell_fraction: float = float("nan")
    meta: dict = field(default_factory=dict)

    def pdf_array(self, axis):
        return self.cond_pdfs[axis].values

    def cdf_array(self, axis):
        return self.cond_cdfs[axis].values


def _line_index(shape, axis, flat):
    rest = tuple(s for d, s in enumerate(shape) if d != axis)
    idx = list(np.unravel_index(flat, rest))
    idx.insert(axis, slice(None))
    return tuple(i if isinstance(i, slice) else int(i) for i in idx)


def conditionals_from_joint(joint, grid: RectilinearGrid) -> CondField:
    """Conditional fields from precomputed joint values at all vertices."""
    joint = np.asarray(joint, dtype=float)
    pdfs, cdfs = [], []
    worst = 0.0
    for i, axis in enumerate(grid.axes):
        cum = cumulative_trapezoid(joint, axis.vertices, axis=i)
        norm = np.take(cum, [-1], axis=i)
        bad = ~(np.isfinite(norm) & (norm > 0))
        if np.any(bad):
            flat = np.flatnonzero(np.squeeze(bad, axis=i))
            shape = joint.shape
            failures = [(int(k), f"axis {i}, line {_line_index(shape, i, k)}") for k in flat[:20]]
            raise ZeroMass(
                f"{flat.size} gridline(s) along axis {i} carry no mass; first: "
                f"{_line_index(shape, i, flat[0])}",
                failures,
            )
        cells = np.diff(cum, axis=i)
        worst = max(worst, float(np.max(cells / norm)))
        pdfs.append(VertexField(grid, joint / norm))
        cdf = cum / norm
        last = [slice(None)] * grid.ndim
        last[i] = -1
        cdf[tuple(last)] = 1.0
        cdfs.append(VertexField(grid, cdf))
    return CondField(grid, tuple(pdfs), tuple(cdfs), worst)


def conditionals_nd(f, grid: RectilinearGrid, params) -> CondField:
    """All 1-D conditional PDFs/CDFs at every vertex.

    The joint density is evaluated once per vertex (``prod K_i`` calls) and
    reused for every axis.
    """
    joint = np.asarray(f(grid.vertex_points(), params), dtype=float)
    return conditionals_from_joint(joint, grid)


def save_cond_field(cf: CondField, path, meta=None):
    """Store as one vertex field with element shape ``(2, N)``: [pdf|cdf, axis]."""
    stacked = np.stack(
        [np.stack([p.values for p in cf.cond_pdfs], -1), np.stack([c.values for c in cf.cond_cdfs], -1)],
        axis=-2,
    )
    m = dict(meta or {})
    m["max_cell_fraction"] = cf.max_cell_fraction
    save_vertex_field(VertexField(cf.grid, stacked), path, m)


def load_cond_field(path):
    vf, meta = load_vertex_field(path)
    g = vf.grid
    n = g.ndim
    pdfs = tuple(VertexField(g, vf.values[..., 0, i]) for i in range(n))
    cdfs = tuple(VertexField(g, vf.values[..., 1, i]) for i in range(n))
    return CondField(g, pdfs, cdfs, float(meta.get("max_cell_fraction", float("nan"))), meta)
