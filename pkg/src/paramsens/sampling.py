"""Rejection sampling with a piecewise-constant envelope on a rectilinear grid.

Random numbers come from numpy's PCG64 bit generator seeded through
``SeedSequence(seed, spawn_key=(stream, block))``.  Draws are produced in
fixed-size blocks, each with its own substream, so the output depends only
on ``(seed, stream, count)`` and not on how blocks are scheduled.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .energy import SampleSet
from .errors import EnvelopeViolation, InvalidParameter, SamplerFailure, ZeroMass
from .grid import RectilinearGrid

__all__ = [
    "RNG_ALGORITHM",
    "RngSeed",
    "PiecewiseConstantProposal",
    "build_proposal",
    "sample",
    "make_sampler",
    "generator",
    "as_seed",
]

RNG_ALGORITHM = f"numpy PCG64 via SeedSequence (numpy {np.__version__})"
# draws per substream; fixed so results do not depend on the thread count
BLOCK = 65536
MAX_ROUNDS = 1000


@dataclass(frozen=True)
class RngSeed:
    """Master seed plus substream key; the pair fixes every draw."""

    seed: int
    stream: int | tuple = 0

    def __post_init__(self):
        key = self.key
        if not (0 <= int(self.seed) < 2**64 and all(int(k) >= 0 for k in key)):
            raise InvalidParameter(f"seed must be a 64-bit unsigned integer and stream ids >= 0, got {self}")

    @property
    def key(self):
        return tuple(self.stream) if isinstance(self.stream, (tuple, list)) else (int(self.stream),)

    def child(self, *extra):
        return RngSeed(self.seed, self.key + tuple(int(e) for e in extra))

    def sequence(self, *extra):
        return np.random.SeedSequence(int(self.seed), spawn_key=self.key + tuple(int(e) for e in extra))


def as_seed(seed):
    """RngSeed from an int, an RngSeed, a ``(seed, stream)`` pair or a SeedSequence."""
    if isinstance(seed, RngSeed):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return RngSeed(int(seed.entropy), tuple(seed.spawn_key))
    if isinstance(seed, (tuple, list)):
        return RngSeed(int(seed[0]), seed[1])
    return RngSeed(int(seed), 0)


def generator(seed, *extra):
    """PCG64 generator for ``seed`` (int, RngSeed or (seed, stream))."""
    return np.random.Generator(np.random.PCG64(as_seed(seed).sequence(*extra)))


@dataclass(frozen=True)
class PiecewiseConstantProposal:
    grid: RectilinearGrid
    cell_heights: np.ndarray
    cell_masses: np.ndarray
    total_mass: float
    safety: float

    @property
    def cumulative(self):
        c = np.cumsum(self.cell_masses.reshape(-1))
        return c / c[-1]


def build_proposal(f, grid: RectilinearGrid, params, safety=1.05) -> PiecewiseConstantProposal:
    """Envelope ``safety * max(f at the 2^N cell corners)`` on every cell.

    Consumes one density evaluation per vertex.
    """
    if not safety >= 1:
        raise InvalidParameter(f"safety factor must be >= 1, got {safety}")
    vals = np.asarray(f(grid.vertex_points(), params), dtype=float)
    if not np.all(np.isfinite(vals)) or np.any(vals < 0):
        raise ZeroMass("density is negative or not finite at some grid vertex")
    # running max over the two corners along each axis
    h = vals
    for ax in range(grid.ndim):
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        h = np.maximum(h[tuple(lo)], h[tuple(hi)])
    heights = safety * h
    vol = np.ones(())
    for a in grid.axes:
        vol = np.multiply.outer(vol, np.diff(a.vertices))
    masses = heights * vol
    total = float(masses.sum())
    if not (np.isfinite(total) and total > 0):
        raise ZeroMass(f"envelope mass is {total}; the density vanishes at every vertex")
    return PiecewiseConstantProposal(grid, heights, masses, total, float(safety))


def _candidates(prop, rng, n):
    """``n`` proposal draws: flat cell ids and points."""
    cell = np.searchsorted(prop.cumulative, rng.random(n), side="right")
    cell = np.minimum(cell, prop.cell_masses.size - 1)
    multi = np.unravel_index(cell, prop.cell_masses.shape)
    u = rng.random((n, prop.grid.ndim))
    pts = np.empty((n, prop.grid.ndim))
    for d, a in enumerate(prop.grid.axes):
        v = a.vertices
        k = multi[d]
        pts[:, d] = v[k] + u[:, d] * (v[k + 1] - v[k])
    return cell, pts


def _draw_block(f, prop, params, count, seq):
    rng = np.random.Generator(np.random.PCG64(seq))
    heights = prop.cell_heights.reshape(-1)
    out = []
    have = tried = accepted = 0
    for _ in range(MAX_ROUNDS):
        need = count - have
        n = max(64, int(need * 1.3 * prop.safety) + 16)
        cell, pts = _candidates(prop, rng, n)
        u = rng.random(n)
        fx = np.asarray(f(pts, params), dtype=float).reshape(-1)
        over = fx > heights[cell]
        if np.any(over):
            k = int(np.flatnonzero(over)[0])
            idx = tuple(int(i) for i in np.unravel_index(cell[k], prop.cell_heights.shape))
            raise EnvelopeViolation(
                f"f = {fx[k]:.6g} exceeds the envelope {heights[cell[k]]:.6g} in cell {idx} "
                f"at {pts[k].tolist()}; raise the safety factor or refine the grid",
                [(int(cell[k]), f"cell {idx}")],
            )
        acc = pts[u * heights[cell] <= fx]
        tried += n
        accepted += len(acc)
        out.append(acc[:need])
        have += min(len(acc), need)
        if have >= count:
            return np.concatenate(out, axis=0), tried, accepted
    raise SamplerFailure(f"only {have} of {count} draws accepted after {MAX_ROUNDS} rounds")


def sample(f, proposal: PiecewiseConstantProposal, params, count, seed=0, threads=1, meta=None) -> SampleSet:
    """``count`` i.i.d. draws from ``f(., params)`` restricted to the grid box.

    Candidates are drawn cell-wise proportionally to the envelope mass and
    accepted when ``u * height <= f(x)``.

    Raises
    ------
    EnvelopeViolation
        If some evaluated ``f`` exceeds its cell's envelope height.
    """
    count = int(count)
    if count < 1:
        raise InvalidParameter(f"count must be positive, got {count}")
    s = as_seed(seed)
    sizes = [min(BLOCK, count - lo) for lo in range(0, count, BLOCK)]
    seqs = [s.sequence(b) for b in range(len(sizes))]
    safe = getattr(f, "concurrency_safe", False)
    if threads > 1 and safe and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda a: _draw_block(f, proposal, params, *a), zip(sizes, seqs)))
    else:
        parts = [_draw_block(f, proposal, params, n, q) for n, q in zip(sizes, seqs)]
    tried = sum(p[1] for p in parts)
    info = {"density": getattr(f, "name", "density"), "params": np.asarray(params, dtype=float).tolist(),
            "seed": s.seed, "stream": list(s.key), "rng": RNG_ALGORITHM,
            "acceptance": sum(p[2] for p in parts) / tried}
    info.update(meta or {})
    return SampleSet(np.concatenate([p[0] for p in parts], axis=0), info)


def make_sampler(f, grid: RectilinearGrid, safety=1.05):
    """``sampler(params, count, seed) -> (count, N)`` array, rebuilding the envelope per call."""

    def sampler(params, count, seed):
        return sample(f, build_proposal(f, grid, params, safety), params, count, seed).points

    return sampler
