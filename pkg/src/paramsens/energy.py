"""Energy score: empirical value and gradients, continuous form by quadrature.

The empirical score of model samples ``X`` (``M_x`` points) against
observations ``O`` (``M_o`` points) is

    L = 1/(M_x M_o) sum_kl |x_k - o_l| - 1/(2 M_x (M_x - 1)) sum_kl |x_k - x_l|.

Pairwise sums run over fixed-size blocks whose partial sums are combined with
``math.fsum``, so results do not depend on how work is scheduled.  In 1-D the
sums use a sort plus prefix sums instead of the O(M^2) double loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .density import pdf_param_gradient_of
from .errors import DuplicatePoint, InvalidParameter, ShapeMismatch, TooFewSamples, ZeroMass
from .grid import GridLine

__all__ = [
    "SampleSet",
    "QuadratureRule",
    "as_points",
    "gauss_legendre",
    "composite_gauss_legendre",
    "distance_sums",
    "energy_score",
    "energy_score_terms",
    "energy_score_sample_gradient",
    "energy_score_sample_gradients",
    "energy_score_param_gradient",
    "energy_score_and_gradients",
    "continuous_energy_score",
    "continuous_energy_param_gradient",
    "continuous_energy_value_and_gradient",
    "naive_fd_param_gradient",
]

# pair distances per block; small enough to stay in cache
BLOCK_PAIRS = 65536


@dataclass(frozen=True)
class SampleSet:
    """``M x N`` realizations plus free-form metadata (density, params, seed)."""

    points: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[0] < 1:
            raise ShapeMismatch(f"a sample set needs shape (M >= 1, N), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ShapeMismatch("sample points must be finite")
        object.__setattr__(self, "points", p)

    def __len__(self):
        return self.points.shape[0]

    @property
    def ndim(self):
        return self.points.shape[1]

    def to_csv(self, path):
        """One row per realization; ``#`` header lines carry the metadata."""
        lines = [f"# {k}: {v}" for k, v in self.meta.items()]
        lines.append(",".join(f"x{i + 1}" for i in range(self.ndim)))
        body = "\n".join(",".join(f"{v:.17g}" for v in row) for row in self.points)
        Path(path).write_text("\n".join(lines) + "\n" + body + "\n")

    @classmethod
    def from_csv(cls, path):
        meta, rows = {}, []
        for line in Path(path).read_text().splitlines():
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                meta[key.strip()] = val.strip()
            elif line and not line.startswith("x"):
                rows.append([float(v) for v in line.split(",")])
        return cls(np.array(rows), meta)


def as_points(S):
    """``(M, N)`` float array from a SampleSet, a 1-D array or a 2-D array."""
    if isinstance(S, SampleSet):
        return S.points
    p = np.asarray(S, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    if p.ndim != 2:
        raise ShapeMismatch(f"expected an (M, N) sample array, got shape {p.shape}")
    return p


# pairwise kernels ------------------------------------------------------------

def _blocks(Ma, Mb):
    step = max(1, BLOCK_PAIRS // max(Mb, 1))
    return [(lo, min(lo + step, Ma)) for lo in range(0, Ma, step)]


def _raise_duplicates(pairs):
    i, j = pairs[0]
    other = "another point" if j is None else f"point {j}"
    raise DuplicatePoint(
        f"sample {i} coincides with {other}; the energy-score gradient is undefined",
        [(int(a), "duplicate" if b is None else f"duplicate of {int(b)}") for a, b in pairs[:20]],
    )


def _pair_sums(A, B, same=False, grad=False):
    """Distance sums ``sum_l |a_k - b_l|`` and, with ``grad``, unit-vector sums.

    With ``same`` (``B is A``) the zero self-distance is skipped in the unit
    sums; any other coincidence raises DuplicatePoint when ``grad`` is set.
    """
    Ma, N = A.shape
    sums = np.empty(Ma)
    units = np.empty((Ma, N)) if grad else None
    for lo, hi in _blocks(Ma, B.shape[0]):
        a = A[lo:hi]
        t = [np.subtract.outer(a[:, d], B[:, d]) for d in range(N)]
        d = t[0] * t[0]
        for td in t[1:]:
            d += td * td
        np.sqrt(d, out=d)
        sums[lo:hi] = d.sum(axis=1)
        if not grad:
            continue
        if same:
            rows = np.arange(hi - lo)
            d[rows, rows + lo] = np.inf
        if not np.all(d):
            _raise_duplicates([(lo + i, j) for i, j in np.argwhere(d == 0)])
        np.divide(1.0, d, out=d)
        for k, td in enumerate(t):
            units[lo:hi, k] = np.einsum("ij,ij->i", td, d)
    return sums, units


def distance_sums(A, B):
    """``s_k = sum_l |a_k - b_l|`` for every row of ``A``."""
    A, B = as_points(A), as_points(B)
    if A.shape[1] != B.shape[1]:
        raise ShapeMismatch(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if A.shape[1] == 1:
        b = np.sort(B[:, 0])
        csum = np.concatenate([[0.0], np.cumsum(b)])
        a = A[:, 0]
        r = np.searchsorted(b, a, side="right")
        # below: r points contribute a - b_l, above: b_l - a
        return a * (2 * r - b.size) - 2.0 * csum[r] + csum[-1]
    return _pair_sums(A, B)[0]


def _unit_sums(A, B, same):
    """``sum_l (a_k - b_l)/|a_k - b_l|``; with ``same`` the k = l term is skipped.

    Raises DuplicatePoint on any other zero distance.
    """
    if A.shape[1] > 1:
        return _pair_sums(A, B, same, grad=True)[1]
    b = np.sort(B[:, 0])
    a = A[:, 0]
    below = np.searchsorted(b, a, side="left")
    above = b.size - np.searchsorted(b, a, side="right")
    ties = b.size - below - above - (1 if same else 0)
    if np.any(ties > 0):
        _raise_duplicates([(int(k), None) for k in np.flatnonzero(ties > 0)])
    return (below - above).astype(float)[:, None]


def _fsum_blocks(values, block=65536):
    return math.fsum(float(np.sum(values[i:i + block])) for i in range(0, values.size, block))


# empirical score ---------------------------------------------------------------

def _check_pair(X, O):
    X, O = as_points(X), as_points(O)
    if X.shape[0] < 2:
        raise TooFewSamples(f"the energy score needs M_x >= 2 model samples, got {X.shape[0]}")
    if O.shape[0] < 1:
        raise TooFewSamples("the energy score needs at least one observation")
    if X.shape[1] != O.shape[1]:
        raise ShapeMismatch(f"dimension mismatch: X has {X.shape[1]}, O has {O.shape[1]}")
    return X, O


def energy_score_terms(X, O):
    """``(term1, term2)`` with ``L = term1 - term2 / 2``."""
    X, O = _check_pair(X, O)
    Mx, Mo = X.shape[0], O.shape[0]
    t1 = _fsum_blocks(distance_sums(X, O)) / (Mx * Mo)
    t2 = _fsum_blocks(distance_sums(X, X)) / (Mx * (Mx - 1))
    return t1, t2


def energy_score(X, O) -> float:
    """Empirical energy score of model samples ``X`` against observations ``O``.

    Raises
    ------
    TooFewSamples
        If ``X`` has fewer than two points.
    """
    t1, t2 = energy_score_terms(X, O)
    return t1 - 0.5 * t2


def energy_score_sample_gradients(X, O):
    """``dL/dx_k`` for every model sample, shape ``(M_x, N)``."""
    X, O = _check_pair(X, O)
    Mx, Mo = X.shape[0], O.shape[0]
    return _unit_sums(X, O, False) / (Mx * Mo) - _unit_sums(X, X, True) / (Mx * (Mx - 1))


def energy_score_sample_gradient(X, O, k):
    """``dL/dx_k`` for one model sample (0-based ``k``)."""
    X, O = _check_pair(X, O)
    Mx, Mo = X.shape[0], O.shape[0]
    if not 0 <= k < Mx:
        raise ShapeMismatch(f"sample index {k} outside [0, {Mx - 1}]")
    xk = X[k:k + 1]
    # the self term has zero distance; drop it by index
    others = np.delete(X, k, axis=0)
    g_o = _unit_sums(xk, O, False)[0]
    g_x = _unit_sums(xk, others, False)[0]
    return g_o / (Mx * Mo) - g_x / (Mx * (Mx - 1))


def energy_score_and_gradients(X, O):
    """``(L, dL/dx_k for all k)`` sharing one pass over the pairs."""
    X, O = _check_pair(X, O)
    Mx, Mo = X.shape[0], O.shape[0]
    if X.shape[1] == 1:
        return energy_score(X, O), energy_score_sample_gradients(X, O)
    s_o, u_o = _pair_sums(X, O, grad=True)
    s_x, u_x = _pair_sums(X, X, same=True, grad=True)
    L = _fsum_blocks(s_o) / (Mx * Mo) - 0.5 * _fsum_blocks(s_x) / (Mx * (Mx - 1))
    return L, u_o / (Mx * Mo) - u_x / (Mx * (Mx - 1))


def energy_score_param_gradient(X, O, jac):
    """Chain rule ``sum_k J_k^T dL/dx_k``.

    ``jac`` is a JacobianBatch evaluated at ``X`` (same order) or an array of
    shape ``(M_x, N, P)``.
    """
    X, O = _check_pair(X, O)
    J = getattr(jac, "jac", jac)
    J = np.asarray(J, dtype=float)
    pts = getattr(jac, "points", None)
    if J.ndim != 3 or J.shape[:2] != X.shape:
        raise ShapeMismatch(f"Jacobians of shape {J.shape} do not match samples {X.shape}")
    if pts is not None and not np.array_equal(np.asarray(pts), X):
        raise ShapeMismatch("the Jacobian batch was evaluated at different points than X")
    g = energy_score_sample_gradients(X, O)
    return np.einsum("kip,ki->p", J, g)


# quadrature ------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Nodes ``(Q, N)`` and weights ``(Q,)`` for integrals over a box."""

    nodes: np.ndarray
    weights: np.ndarray
    description: str = ""

    def __post_init__(self):
        n = np.asarray(self.nodes, dtype=float)
        if n.ndim == 1:
            n = n[:, None]
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if n.shape[0] != w.size:
            raise ShapeMismatch(f"{n.shape[0]} nodes but {w.size} weights")
        if not np.all(np.isfinite(w)):
            raise ShapeMismatch("quadrature weights must be finite")
        object.__setattr__(self, "nodes", n)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.size

    @property
    def ndim(self):
        return self.nodes.shape[1]

    def integrate(self, values):
        return np.tensordot(self.weights, np.asarray(values, dtype=float), axes=(0, 0))


def _tensor(rules_1d, description):
    nodes = np.stack(np.meshgrid(*(r[0] for r in rules_1d), indexing="ij"), -1).reshape(-1, len(rules_1d))
    w = rules_1d[0][1]
    for r in rules_1d[1:]:
        w = np.multiply.outer(w, r[1])
    return QuadratureRule(nodes, w.reshape(-1), description)


def _gl_on(edges, n):
    t, w = np.polynomial.legendre.leggauss(int(n))
    a, b = np.asarray(edges[:-1]), np.asarray(edges[1:])
    half = (b - a) / 2.0
    x = ((a + b) / 2.0)[:, None] + half[:, None] * t[None]
    return x.reshape(-1), (half[:, None] * w[None]).reshape(-1)


def gauss_legendre(bounds, n):
    """Tensor Gauss-Legendre rule with ``n`` points per axis on a box.

    ``bounds`` is a list of ``(lo, hi)`` pairs, one per dimension.
    """
    rules = [_gl_on([lo, hi], n) for lo, hi in bounds]
    return _tensor(rules, f"Gauss-Legendre {n} per axis on {list(map(tuple, bounds))}")


def composite_gauss_legendre(axes, n):
    """Tensor rule with ``n`` Gauss-Legendre points in every cell of each line.

    ``axes`` holds one GridLine (or vertex array) per dimension; the cells
    between consecutive vertices may be nonuniform, e.g. log spaced.
    """
    axes = [a.vertices if isinstance(a, GridLine) else np.asarray(a, dtype=float) for a in axes]
    rules = [_gl_on(v, n) for v in axes]
    cells = " x ".join(str(v.size - 1) for v in axes)
    return _tensor(rules, f"composite Gauss-Legendre, {cells} cells, {n} points per cell and axis")


# continuous score --------------------------------------------------------------

def _weighted_pair_sums(nodes, wf):
    """``B_q = sum_r wf_r |x_q - x_r|`` over the quadrature nodes."""
    Q, N = nodes.shape
    if N == 1:
        x = nodes[:, 0]
        order = np.argsort(x, kind="stable")
        xs, ws = x[order], wf[order]
        cw = np.concatenate([[0.0], np.cumsum(ws)])
        cxw = np.concatenate([[0.0], np.cumsum(ws * xs)])
        r = np.searchsorted(xs, x, side="right")
        return x * (2 * cw[r] - cw[-1]) - 2 * cxw[r] + cxw[-1]
    out = np.empty(Q)
    for lo, hi in _blocks(Q, Q):
        a = nodes[lo:hi]
        d = np.zeros((hi - lo, Q))
        for k in range(N):
            t = np.subtract.outer(a[:, k], nodes[:, k])
            d += t * t
        out[lo:hi] = np.sqrt(d, out=d) @ wf
    return out


def continuous_energy_value_and_gradient(f, params, O, quad: QuadratureRule, normalize=True,
                                         pdf_param_gradient=None, gradient=True):
    """Score and parameter gradient of the continuous energy score.

    With ``normalize`` the density is divided by its quadrature mass ``c`` and
    the gradient uses ``grad f = (grad f~ - f grad c) / c``.  Returns
    ``(value, gradient)``; ``gradient`` is None when not requested.
    """
    O = as_points(O)
    if O.shape[1] != quad.ndim:
        raise ShapeMismatch(f"observations have {O.shape[1]} dims, quadrature has {quad.ndim}")
    params = np.asarray(params, dtype=float).reshape(-1)
    x = quad.nodes
    w = quad.weights
    fv = np.asarray(f(x, params), dtype=float).reshape(-1)
    dfv = None
    if gradient:
        grad_fn = pdf_param_gradient or pdf_param_gradient_of(f)
        dfv = np.asarray(grad_fn(x, params), dtype=float).reshape(fv.size, -1)
    if normalize:
        c = float(np.dot(w, fv))
        if not (np.isfinite(c) and c > 0):
            raise ZeroMass(f"density mass under the quadrature rule is {c}")
        fv = fv / c
        if gradient:
            dc = w @ dfv
            dfv = (dfv - fv[:, None] * dc[None, :]) / c
    # mean distance to the observations at each node
    A = distance_sums(x, O) / O.shape[0]
    B = _weighted_pair_sums(x, w * fv)
    value = float(np.dot(w * fv, A) - 0.5 * np.dot(w * fv, B))
    if not gradient:
        return value, None
    grad = (w * A) @ dfv - (w * B) @ dfv
    return value, grad


def continuous_energy_score(f, params, O, quad: QuadratureRule, normalize=True) -> float:
    """Continuous energy score by quadrature (model term as a double sum over nodes)."""
    return continuous_energy_value_and_gradient(f, params, O, quad, normalize, gradient=False)[0]


def continuous_energy_param_gradient(f, pdf_param_gradient, params, O, quad: QuadratureRule,
                                     normalize=True):
    """Analytic parameter gradient of the continuous energy score.

    ``pdf_param_gradient(x, params)`` returns ``d f/d theta`` of shape
    ``(Q, P)``; pass None to use the density's own or central differences.
    """
    return continuous_energy_value_and_gradient(
        f, params, O, quad, normalize, pdf_param_gradient=pdf_param_gradient
    )[1]


# naive baseline --------------------------------------------------------------------

def naive_fd_param_gradient(f, params, O, sampler, M_x, delta, seed=0):
    """Finite differences of the empirical score with freshly drawn sample sets.

    ``sampler(params, count, seed)`` returns ``count`` draws; the ``2 P``
    sample sets use independent child seeds of ``seed``.  The estimate is
    noisy by construction.
    """
    if not delta > 0:
        raise InvalidParameter(f"finite-difference step must be positive, got {delta}")
    p = np.asarray(params, dtype=float).reshape(-1)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(2 * p.size)
    g = np.empty(p.size)
    for j in range(p.size):
        e = np.zeros_like(p)
        e[j] = delta
        Xp = sampler(p + e, M_x, children[2 * j])
        Xm = sampler(p - e, M_x, children[2 * j + 1])
        g[j] = (energy_score(Xp, O) - energy_score(Xm, O)) / (2.0 * delta)
    return g
