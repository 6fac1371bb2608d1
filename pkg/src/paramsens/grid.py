"""Rectilinear grids, multilinear interpolation and nonuniform FD stencils.

Vertex arrays are stored row-major with axis 0 slowest, i.e. a field on a
grid with ``K_1 x ... x K_N`` vertices is a numpy array of shape
``(K_1, ..., K_N) + element_shape``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IndexOutOfRange, InvalidGrid, PointOutsideGrid, ShapeMismatch

__all__ = [
    "GridLine",
    "RectilinearGrid",
    "VertexField",
    "interpolate",
    "interpolate_many",
    "interp_1d",
    "fd_first_derivative",
    "fd_derivative_along",
    "save_vertex_field",
    "load_vertex_field",
]


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridLine:
    """Strictly increasing sequence of at least three vertices."""

    vertices: np.ndarray

    def __post_init__(self):
        v = _frozen(self.vertices)
        if v.ndim != 1 or v.size < 3:
            raise InvalidGrid(f"a gridline needs >= 3 vertices, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidGrid("gridline vertices must be finite")
        if np.any(np.diff(v) <= 0):
            raise InvalidGrid("gridline vertices must be strictly increasing")
        object.__setattr__(self, "vertices", v)

    @classmethod
    def uniform(cls, lo, hi, count):
        return cls(np.linspace(lo, hi, int(count)))

    @classmethod
    def logspaced(cls, lo, hi, count):
        """Vertices uniform in log space; requires ``0 < lo < hi``."""
        if not 0 < lo < hi:
            raise InvalidGrid(f"log spacing needs 0 < lo < hi, got ({lo}, {hi})")
        v = np.geomspace(lo, hi, int(count))
        v[0], v[-1] = lo, hi
        return cls(v)

    def __len__(self):
        return self.vertices.size

    @property
    def lo(self):
        return float(self.vertices[0])

    @property
    def hi(self):
        return float(self.vertices[-1])

    def __eq__(self, other):
        return isinstance(other, GridLine) and np.array_equal(self.vertices, other.vertices)

    def __hash__(self):
        return hash(self.vertices.tobytes())


@dataclass(frozen=True, eq=False)
class RectilinearGrid:
    axes: tuple

    def __post_init__(self):
        axes = tuple(a if isinstance(a, GridLine) else GridLine(a) for a in self.axes)
        if not axes:
            raise InvalidGrid("a grid needs at least one axis")
        total = 1
        for a in axes:
            total *= len(a)
        if total >= np.iinfo(np.int64).max:
            raise InvalidGrid("vertex count overflows int64")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def from_bounds(cls, bounds, counts, spacing="uniform"):
        if isinstance(spacing, str):
            spacing = [spacing] * len(bounds)
        axes = []
        for (lo, hi), k, sp in zip(bounds, counts, spacing):
            if sp == "uniform":
                axes.append(GridLine.uniform(lo, hi, k))
            elif sp == "log":
                axes.append(GridLine.logspaced(lo, hi, k))
            else:
                raise InvalidGrid(f"unknown spacing {sp!r}")
        return cls(tuple(axes))

    @property
    def ndim(self):
        return len(self.axes)

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def lower(self):
        return np.array([a.lo for a in self.axes])

    @property
    def upper(self):
        return np.array([a.hi for a in self.axes])

    def vertex_points(self):
        """All vertex coordinates, shape ``shape + (N,)``."""
        mesh = np.meshgrid(*(a.vertices for a in self.axes), indexing="ij")
        return np.stack(mesh, axis=-1)

    def contains(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((p >= self.lower) & (p <= self.upper), axis=-1)

    def digest(self):
        h = hashlib.sha256()
        for a in self.axes:
            h.update(np.int64(len(a)).tobytes())
            h.update(np.ascontiguousarray(a.vertices, dtype="<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        return isinstance(other, RectilinearGrid) and self.axes == other.axes

    def __hash__(self):
        return hash(self.axes)


@dataclass(frozen=True, eq=False)
class VertexField:
    grid: RectilinearGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[: self.grid.ndim] != self.grid.shape:
            raise ShapeMismatch(
                f"field shape {v.shape} does not start with grid shape {self.grid.shape}"
            )
        object.__setattr__(self, "values", v)

    @property
    def element_shape(self):
        return self.values.shape[self.grid.ndim:]

    def __call__(self, points):
        return interpolate_many(points, self.grid, self.values)


def _locate(vertices, x):
    """Cell index and local coordinate; upper-boundary points go to the last cell."""
    k = np.searchsorted(vertices, x, side="right") - 1
    k = np.clip(k, 0, vertices.size - 2)
    t = (x - vertices[k]) / (vertices[k + 1] - vertices[k])
    return k, t


def _check_inside(points, grid):
    lo, hi = grid.lower, grid.upper
    bad = np.flatnonzero(np.any((points < lo) | (points > hi) | ~np.isfinite(points), axis=1))
    if bad.size:
        failures = [(int(i), f"point {points[i].tolist()} outside grid box") for i in bad[:20]]
        raise PointOutsideGrid(
            f"{bad.size} point(s) outside the grid box [{lo.tolist()}, {hi.tolist()}]",
            failures,
        )


def interpolate_many(points, grid: RectilinearGrid, values):
    """Piecewise multilinear interpolation of a vertex array at many points.

    ``points`` has shape ``(M, N)``; ``values`` has shape ``grid.shape + S``.
    Returns an array of shape ``(M,) + S``.
    """
    values = np.asarray(values)
    pts = np.asarray(points, dtype=float).reshape(-1, grid.ndim)
    _check_inside(pts, grid)
    idx, frac = [], []
    for d, axis in enumerate(grid.axes):
        k, t = _locate(axis.vertices, pts[:, d])
        idx.append(k)
        frac.append(t)
    elem = values.shape[grid.ndim:]
    out = np.zeros((pts.shape[0],) + elem)
    for corner in itertools.product((0, 1), repeat=grid.ndim):
        w = np.ones(pts.shape[0])
        sel = []
        for d, c in enumerate(corner):
            w = w * (frac[d] if c else 1.0 - frac[d])
            sel.append(idx[d] + c)
        vals = values[tuple(sel)]
        # zero-weight corners must not leak inf/nan into exact vertex hits
        w = w.reshape((-1,) + (1,) * len(elem))
        out += np.where(w != 0.0, w * vals, 0.0)
    return out


def interpolate(point, field: VertexField):
    """Interpolate ``field`` at a single N-vector."""
    return interpolate_many(np.reshape(point, (1, -1)), field.grid, field.values)[0]


def interp_1d(x, vertices, values):
    """Linear interpolation along one gridline.

    Either ``values`` is a single line of shape ``(K,)`` and ``x`` any shape, or
    ``values`` has shape ``(..., K)`` and ``x`` broadcasts to ``values.shape[:-1]``.
    No bounds check; callers validate.
    """
    values = np.asarray(values, dtype=float)
    x = np.asarray(x, dtype=float)
    k, t = _locate(vertices, x)
    if values.ndim == 1:
        v0, v1 = values[k], values[k + 1]
    else:
        k = np.broadcast_to(k, values.shape[:-1])[..., None]
        t = np.broadcast_to(t, values.shape[:-1])
        v0 = np.take_along_axis(values, k, -1)[..., 0]
        v1 = np.take_along_axis(values, k + 1, -1)[..., 0]
    # this form is exact at both cell ends
    return (1.0 - t) * v0 + t * v1


def _stencil_weights(vertices):
    """Per-vertex three-point weights and offsets for d/dx.

    Returns ``(w, off)`` with ``w`` of shape ``(K, 3)`` and ``off`` giving the
    index of the first stencil vertex for each row.
    """
    x = np.asarray(vertices, dtype=float)
    K = x.size
    w = np.empty((K, 3))
    off = np.empty(K, dtype=int)
    h = np.diff(x)

    # forward at the first vertex
    h0, h1 = h[0], h[1]
    den = h0 * h1 * (h0 + h1)
    w[0] = (-h1 * (2 * h0 + h1) / den, (h0 + h1) ** 2 / den, -h0 * h0 / den)
    off[0] = 0

    # central at interior vertices: hl = x_k - x_{k-1}, hr = x_{k+1} - x_k
    hl, hr = h[:-1], h[1:]
    den = hr * hl * (hr + hl)
    w[1:-1, 0] = -hr * hr / den
    w[1:-1, 1] = (hr - hl) * (hr + hl) / den
    w[1:-1, 2] = hl * hl / den
    off[1:-1] = np.arange(K - 2)

    # backward at the last vertex: a = x_K - x_{K-1}, b = x_{K-1} - x_{K-2}
    a, b = h[-1], h[-2]
    den = a * b * (a + b)
    w[-1] = (a * a / den, -((a + b) ** 2) / den, b * (2 * a + b) / den)
    off[-1] = K - 3
    return w, off


def fd_first_derivative(line: GridLine, values: Sequence[float], at_index: int) -> float:
    """Second-order first derivative of vertex values at one vertex.

    Forward stencil at the first vertex, backward at the last, central elsewhere.
    """
    values = np.asarray(values, dtype=float)
    K = len(line)
    if values.shape != (K,):
        raise ShapeMismatch(f"expected {K} values, got shape {values.shape}")
    if not 0 <= at_index < K:
        raise IndexOutOfRange(f"index {at_index} outside [0, {K - 1}]")
    w, off = _stencil_weights(line.vertices)
    o = off[at_index]
    return float(w[at_index] @ values[o:o + 3])


def fd_derivative_along(values, vertices, axis):
    """Apply the three stencils along ``axis`` of an array; same output shape."""
    values = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    w, off = _stencil_weights(vertices)
    K = values.shape[0]
    bshape = (K,) + (1,) * (values.ndim - 1)
    out = (
        w[:, 0].reshape(bshape) * values[off]
        + w[:, 1].reshape(bshape) * values[off + 1]
        + w[:, 2].reshape(bshape) * values[off + 2]
    )
    return np.moveaxis(out, 0, axis)


def save_vertex_field(field: VertexField, path, meta=None):
    """Write ``<path>.json`` (header) and ``<path>.bin`` (little-endian float64, row-major)."""
    path = Path(path)
    header = {
        "format": "paramsens-vertex-field",
        "version": 1,
        "axes": [a.vertices.tolist() for a in field.grid.axes],
        "element_shape": list(field.element_shape),
        "order": "row-major, axis 1 slowest, element indices fastest",
        "dtype": "<f8",
        "grid_digest": field.grid.digest(),
        "meta": meta or {},
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=2))
    np.ascontiguousarray(field.values, dtype="<f8").tofile(path.with_suffix(".bin"))


def load_vertex_field(path):
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    grid = RectilinearGrid(tuple(GridLine(v) for v in header["axes"]))
    shape = grid.shape + tuple(header["element_shape"])
    values = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    if values.size != int(np.prod(shape)):
        raise ShapeMismatch(f"binary payload has {values.size} values, header implies {shape}")
    return VertexField(grid, values.reshape(shape)), header.get("meta", {})
