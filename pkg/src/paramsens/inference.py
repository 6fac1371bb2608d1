"""Distribution fitting by minimizing the energy score, with bootstrap.

Each loss/gradient evaluation draws a fresh model sample set at the current
parameters (rejection sampler on the fixed background grid), scores it
against the observations and pushes the per-sample gradients through the
space-parameter sensitivities of the chosen algorithm.  Two reference
gradients are also available: the continuous score by quadrature and the
naive finite difference over independently drawn sample sets.

Random streams are keyed by ``(restart, purpose, iteration)`` below an
optional prefix (the bootstrap index), so every fit is reproducible and
independent of scheduling.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .density import CountingDensity, as_params
from .energy import (
    QuadratureRule,
    continuous_energy_value_and_gradient,
    energy_score,
    energy_score_and_gradients,
    naive_fd_param_gradient,
    as_points,
)
from .errors import ConfigError, EnvelopeViolation, InvalidParameter, NoSuccessfulRestart, ParamSensError, ZeroMass
from .grid import RectilinearGrid
from .sampling import RngSeed, build_proposal, sample
from .sensitivity import SensitivityConfig, canonical_algorithm, compute_sensitivity

__all__ = [
    "FitConfig",
    "FitResult",
    "BootstrapRun",
    "Adam",
    "lbfgs_minimize",
    "adam_minimize",
    "fit",
    "bootstrap_fit",
    "l1_pdf_error",
    "LossOracle",
]

OPTIMIZERS = ("adam", "lbfgs")
REFERENCE = ("continuous", "naive-FD")
# stream purposes under (prefix..., restart)
_INIT, _EPOCH, _FD, _LS = 0, 1, 2, 3
# final-loss evaluation stream, shared by all restarts and algorithms
_EVAL = 2**31 - 1


@dataclass(frozen=True)
class FitConfig:
    """Settings of one fit.

    ``epochs`` counts ADAM steps or L-BFGS outer iterations.  ``init`` fixes
    the starting point of every restart; otherwise each restart draws one
    uniformly in ``param_box``.  ``eval_M_x`` is the sample size of the
    final-loss evaluation that ranks restarts (defaults to ``M_x``).
    ``loss_estimate="expected"`` replaces that sampled final loss by the
    score's expectation over ``X``, i.e. the normalized continuous score on
    ``loss_quad`` (default ``quad``); it removes the sampling noise from the
    comparison of fits whose losses differ by less than that noise.
    With L-BFGS the envelope is built once per outer iteration with the
    wider ``line_search_safety`` and reused for the line-search trial points.
    """

    algorithm: str
    grid: RectilinearGrid
    param_box: tuple
    optimizer: str = "adam"
    learning_rate: float = 0.01
    epochs: int = 3000
    M_x: int = 10000
    restarts: int = 1
    seed: int = 0
    init: tuple | None = None
    safety: float = 1.05
    fd_delta: float = 1e-3
    quad: QuadratureRule | None = None
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    lbfgs_memory: int = 10
    lbfgs_gtol: float = 1e-8
    lbfgs_initial_step: float | None = None
    line_search_evals: int = 20
    line_search_safety: float = 1.5
    eval_M_x: int | None = None
    loss_estimate: str = "sampled"
    loss_quad: QuadratureRule | None = None

    def __post_init__(self):
        alg = self.algorithm if self.algorithm in REFERENCE else canonical_algorithm(self.algorithm)
        object.__setattr__(self, "algorithm", alg)
        box = np.array(self.param_box, dtype=float)
        if box.ndim != 2 or box.shape[1] != 2 or np.any(~(box[:, 0] <= box[:, 1])):
            raise ConfigError(f"param_box must be P pairs (lo <= hi), got {self.param_box!r}")
        object.__setattr__(self, "param_box", tuple(map(tuple, box.tolist())))
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0 or self.restarts < 1:
            raise ConfigError("epochs must be >= 0 and restarts >= 1")
        if self.M_x < 2:
            raise ConfigError(f"M_x must be >= 2, got {self.M_x}")
        if alg == "continuous" and self.quad is None:
            raise ConfigError("the continuous reference needs a quadrature rule")
        if self.loss_estimate not in ("sampled", "expected"):
            raise ConfigError(f"loss_estimate must be 'sampled' or 'expected', got {self.loss_estimate!r}")
        if self.loss_estimate == "expected" and (self.loss_quad or self.quad) is None:
            raise ConfigError("loss_estimate='expected' needs a quadrature rule")
        if self.init is not None:
            init = as_params(self.init, box.shape[0])
            if np.any(init < box[:, 0]) or np.any(init > box[:, 1]):
                raise ConfigError(f"init {init.tolist()} lies outside param_box")
            object.__setattr__(self, "init", tuple(init.tolist()))

    @property
    def box(self):
        return np.array(self.param_box)

    def describe(self):
        """JSON-ready settings (grid summarized by shape, bounds and digest)."""
        d = {k: v for k, v in asdict(self).items() if k not in ("grid", "quad", "loss_quad", "sensitivity")}
        d["grid"] = {"shape": list(self.grid.shape), "lower": self.grid.lower.tolist(),
                     "upper": self.grid.upper.tolist(), "digest": self.grid.digest()}
        d["quad"] = None if self.quad is None else self.quad.description
        d["loss_quad"] = None if self.loss_quad is None else self.loss_quad.description
        d["sensitivity"] = asdict(self.sensitivity)
        return d


@dataclass
class FitResult:
    theta_opt: np.ndarray
    final_loss: float
    loss_trajectory: list
    theta_trajectory: np.ndarray
    restart_losses: list
    best_restart: int
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "theta_opt": np.asarray(self.theta_opt).tolist(),
            "final_loss": self.final_loss,
            "loss_trajectory": [[int(e), float(v)] for e, v in self.loss_trajectory],
            "theta_trajectory": np.asarray(self.theta_trajectory).tolist(),
            "restart_losses": [None if v is None else float(v) for v in self.restart_losses],
            "best_restart": self.best_restart,
            "diagnostics": self.diagnostics,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


@dataclass
class BootstrapRun:
    n_bootstrap: int
    restarts_per_bootstrap: int
    fits: list
    theta_hats: np.ndarray
    summary: dict

    def summary_rows(self):
        """One row per bootstrap: id, final loss, theta, wall time, density evals."""
        rows = []
        for b, r in enumerate(self.fits):
            rows.append([b, r.final_loss, *np.asarray(r.theta_opt).tolist(),
                         r.diagnostics.get("wall_time", float("nan")), r.diagnostics.get("density_evals", 0)])
        return rows

    def to_dict(self):
        return {"n_bootstrap": self.n_bootstrap, "restarts_per_bootstrap": self.restarts_per_bootstrap,
                "summary": self.summary, "fits": [r.to_dict() for r in self.fits]}


# optimizers -----------------------------------------------------------------------

class Adam:
    """ADAM with bias correction and a componentwise clamp to ``box`` after each step."""

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, box=None):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.box = None if box is None else np.asarray(box, dtype=float)
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad):
        g = np.asarray(grad, dtype=float)
        if self.m is None:
            self.m, self.v = np.zeros_like(g), np.zeros_like(g)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        out = theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return project(out, self.box)


def project(theta, box):
    if box is None:
        return theta
    return np.clip(theta, box[:, 0], box[:, 1])


def adam_minimize(oracle, theta0, epochs, lr, box=None, betas=(0.9, 0.999), eps=1e-8):
    """Run ``epochs`` ADAM steps; ``oracle(theta, k) -> (loss, grad)``.

    Returns ``(theta, trajectory, thetas)`` with the loss recorded at the
    point where each gradient was taken.
    """
    opt = Adam(lr, betas, eps, box)
    theta = project(np.asarray(theta0, dtype=float), opt.box)
    traj, thetas = [], [theta.copy()]
    for k in range(epochs):
        loss, g = oracle(theta, k)
        traj.append((k, float(loss)))
        theta = opt.step(theta, g)
        thetas.append(theta.copy())
    return theta, traj, np.array(thetas)


def _strong_wolfe(phi, f0, d0, alpha0, c1=1e-4, c2=0.9, max_evals=20, alpha_max=np.inf):
    """Strong-Wolfe line search (bracketing plus bisection-interpolation zoom).

    ``phi(alpha) -> (value, slope)``.  Returns ``(alpha, value, slope, ok)``;
    on failure the best Armijo point seen (if any) is returned with ``ok``
    False.
    """
    best = None
    evals = 0

    def record(a, v, s):
        nonlocal best
        if v <= f0 + c1 * a * d0 and (best is None or v < best[1]):
            best = (a, v, s)

    def zoom(lo, hi):
        nonlocal evals
        while evals < max_evals:
            a = 0.5 * (lo[0] + hi[0])
            v, s = phi(a)
            evals += 1
            record(a, v, s)
            if v > f0 + c1 * a * d0 or v >= lo[1]:
                hi = (a, v, s)
            else:
                if abs(s) <= -c2 * d0:
                    return a, v, s, True
                if s * (hi[0] - lo[0]) >= 0:
                    hi = lo
                lo = (a, v, s)
        return None

    prev = (0.0, f0, d0)
    a = min(alpha0, alpha_max)
    while evals < max_evals:
        v, s = phi(a)
        evals += 1
        record(a, v, s)
        if v > f0 + c1 * a * d0 or (evals > 1 and v >= prev[1]):
            out = zoom(prev, (a, v, s))
            break
        if abs(s) <= -c2 * d0:
            return a, v, s, True
        if s >= 0:
            out = zoom((a, v, s), prev)
            break
        prev = (a, v, s)
        if a >= alpha_max:
            out = None
            break
        a = min(2.0 * a, alpha_max)
    else:
        out = None
    if out is not None:
        return out
    if best is not None:
        return best[0], best[1], best[2], False
    return 0.0, f0, d0, False


def _feasible(d, x, box):
    """Zero the components of ``d`` that would leave the box from an active bound."""
    if box is None:
        return d
    out = ((x <= box[:, 0]) & (d < 0)) | ((x >= box[:, 1]) & (d > 0))
    return np.where(out, 0.0, d)


def lbfgs_minimize(oracle, theta0, iterations, box=None, memory=10, gtol=1e-8, max_evals=20, initial_step=None):
    """Projected L-BFGS with a strong-Wolfe line search.

    ``oracle(theta, k) -> (loss, grad)`` may be stochastic in ``k``: each
    outer iteration ``k`` fixes its own stream, so the line search sees one
    consistent function.  The iterate is clamped into ``box``; the search
    direction is restricted to the free coordinates at active bounds.
    Without curvature history the trial step is ``min(1, 1/|g|_1)``, or, if
    ``initial_step`` is given, the step whose largest coordinate move is
    ``initial_step``.  Returns ``(theta, trajectory, thetas, info)``.
    """
    box = None if box is None else np.asarray(box, dtype=float)
    x = project(np.asarray(theta0, dtype=float), box)
    S, Y = [], []
    traj, thetas = [], [x.copy()]
    info = {"line_search_failures": 0, "stopped": "iterations"}
    for k in range(iterations):
        f, g = oracle(x, k)
        traj.append((k, float(f)))
        free = np.ones_like(x, dtype=bool)
        if box is not None:
            # drop coordinates pinned at a bound with the gradient pushing outward
            free &= ~((x <= box[:, 0]) & (g > 0)) & ~((x >= box[:, 1]) & (g < 0))
        gf = np.where(free, g, 0.0)
        if np.max(np.abs(gf)) <= gtol:
            info["stopped"] = "gradient tolerance"
            break
        # two-loop recursion
        q = gf.copy()
        alphas = []
        for s, y in reversed(list(zip(S, Y))):
            rho = 1.0 / np.dot(y, s)
            a = rho * np.dot(s, q)
            alphas.append((a, rho, s, y))
            q -= a * y
        if S:
            q *= np.dot(S[-1], Y[-1]) / np.dot(Y[-1], Y[-1])
        for a, rho, s, y in reversed(alphas):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        d = _feasible(np.where(free, -q, 0.0), x, box)
        if not np.dot(d, gf) < 0:
            d, S, Y = _feasible(-gf, x, box), [], []
        if S:
            alpha0 = 1.0
        elif initial_step is None:
            alpha0 = min(1.0, 1.0 / np.sum(np.abs(gf)))
        else:
            alpha0 = initial_step / np.max(np.abs(d))
        if box is not None:
            with np.errstate(divide="ignore", invalid="ignore"):
                room = np.where(d > 0, (box[:, 1] - x) / d, np.where(d < 0, (box[:, 0] - x) / d, np.inf))
            alpha_max = float(np.min(room))
        else:
            alpha_max = np.inf
        if not alpha_max > 0:
            info["stopped"] = "no feasible descent"
            break

        def phi(a, x=x, d=d, k=k):
            v, gg = oracle(project(x + a * d, box), k)
            return v, float(np.dot(gg, d))

        alpha, _, _, ok = _strong_wolfe(phi, f, float(np.dot(g, d)), alpha0, max_evals=max_evals, alpha_max=alpha_max)
        if not ok:
            info["line_search_failures"] += 1
        if alpha == 0.0:
            # noisy objective: drop the curvature history and try a fresh sample set
            S, Y = [], []
            continue
        x_new = project(x + alpha * d, box)
        _, g_new = oracle(x_new, k)
        s, y = x_new - x, g_new - g
        if np.dot(s, y) > 1e-12 * np.dot(y, y):
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        x = x_new
        thetas.append(x.copy())
    return x, traj, np.array(thetas), info


# loss oracles ---------------------------------------------------------------------

class LossOracle:
    """``(loss, grad)`` at ``theta`` for a given random stream.

    Results are memoized per ``(theta, stream)`` so a line search that
    revisits a point does not redraw.  With ``freeze`` the envelope built at
    the first parameters seen on a stream is reused for the stream's later
    draws, so nearby trial points share candidates and differ only in a few
    accept/reject decisions.
    """

    def __init__(self, f, O, cfg: FitConfig, freeze=False):
        self.f = f
        self.O = as_points(O)
        self.cfg = cfg
        self.freeze = freeze
        self.evals = 0
        self.rebuilds = 0
        self._cache = {}
        self._props = {}

    def draw(self, theta, seed):
        cfg = self.cfg
        if not self.freeze:
            prop = build_proposal(self.f, cfg.grid, theta, cfg.safety)
            return sample(self.f, prop, theta, cfg.M_x, seed, threads=cfg.sensitivity.threads).points
        key = (seed.seed, seed.key)
        prop = self._props.get(key)
        if prop is not None:
            try:
                return sample(self.f, prop, theta, cfg.M_x, seed, threads=cfg.sensitivity.threads).points
            except EnvelopeViolation:
                self.rebuilds += 1
        if len(self._props) > 8:
            self._props.clear()
        prop = self._props[key] = build_proposal(self.f, cfg.grid, theta, cfg.line_search_safety)
        return sample(self.f, prop, theta, cfg.M_x, seed, threads=cfg.sensitivity.threads).points

    def __call__(self, theta, seed: RngSeed):
        theta = np.asarray(theta, dtype=float)
        key = (theta.tobytes(), seed.seed, seed.key)
        if key in self._cache:
            return self._cache[key]
        cfg = self.cfg
        self.evals += 1
        if cfg.algorithm == "continuous":
            out = continuous_energy_value_and_gradient(self.f, theta, self.O, cfg.quad, normalize=True)
        else:
            X = self.draw(theta, seed)
            if cfg.algorithm == "naive-FD":
                loss = energy_score(X, self.O)
                sampler = lambda p, n, s: self.draw(p, s)
                grad = naive_fd_param_gradient(self.f, theta, self.O, sampler, cfg.M_x, cfg.fd_delta,
                                               seed.sequence(_FD))
                out = (loss, grad)
            else:
                loss, G = energy_score_and_gradients(X, self.O)
                jac = compute_sensitivity(cfg.algorithm, self.f, cfg.grid, theta, X, cfg.sensitivity)
                out = (loss, np.einsum("kip,ki->p", jac.jac, G))
        if not np.all(np.isfinite(out[1])):
            raise ZeroMass(f"non-finite gradient at theta={theta.tolist()}")
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[key] = out
        return out

    def final_loss(self, theta, base: RngSeed):
        """Score at ``theta`` on the shared evaluation stream (common random numbers)."""
        cfg = self.cfg
        if cfg.algorithm == "continuous" or cfg.loss_estimate == "expected":
            quad = cfg.quad if cfg.algorithm == "continuous" else (cfg.loss_quad or cfg.quad)
            return continuous_energy_value_and_gradient(self.f, theta, self.O, quad, gradient=False)[0]
        prop = build_proposal(self.f, cfg.grid, theta, cfg.safety)
        X = sample(self.f, prop, theta, cfg.eval_M_x or cfg.M_x, base.child(_EVAL),
                   threads=cfg.sensitivity.threads).points
        return energy_score(X, self.O)


def _initial(cfg: FitConfig, seed: RngSeed):
    if cfg.init is not None:
        return np.array(cfg.init)
    box = cfg.box
    u = np.random.Generator(np.random.PCG64(seed.sequence(_INIT))).random(box.shape[0])
    return box[:, 0] + u * (box[:, 1] - box[:, 0])


def _fit_one(f, O, cfg: FitConfig, rseed: RngSeed, oracle: LossOracle):
    theta0 = _initial(cfg, rseed)
    if cfg.optimizer == "adam":
        run = lambda th, k: oracle(th, rseed.child(_EPOCH, k))
        theta, traj, thetas = adam_minimize(run, theta0, cfg.epochs, cfg.learning_rate, cfg.box,
                                            cfg.adam_betas, cfg.adam_eps)
        info = {}
    else:
        run = lambda th, k: oracle(th, rseed.child(_LS, k))
        theta, traj, thetas, info = lbfgs_minimize(run, theta0, cfg.epochs, cfg.box, cfg.lbfgs_memory,
                                                   cfg.lbfgs_gtol, cfg.line_search_evals, cfg.lbfgs_initial_step)
    return theta, traj, thetas, info


def fit(f, O, cfg: FitConfig, prefix=()) -> FitResult:
    """Best-of-restarts fit; restarts are ranked by the final loss on a shared stream.

    A restart that raises a numerical error is recorded and skipped.

    Raises
    ------
    NoSuccessfulRestart
        If every restart failed.
    """
    O = as_points(O)
    if O.shape[0] < 1:
        raise InvalidParameter("observations must be nonempty")
    counter = f if isinstance(f, CountingDensity) else CountingDensity(f)
    base = RngSeed(cfg.seed, tuple(prefix))
    oracle = LossOracle(counter, O, cfg, freeze=cfg.optimizer == "lbfgs")
    t0 = time.monotonic()
    results, losses, failures = [], [], []
    for r in range(cfg.restarts):
        rseed = base.child(r)
        try:
            theta, traj, thetas, info = _fit_one(counter, O, cfg, rseed, oracle)
            loss = float(oracle.final_loss(theta, base))
        except ParamSensError as exc:
            failures.append((r, f"{type(exc).__name__}: {exc}"))
            results.append(None)
            losses.append(None)
            continue
        results.append((theta, traj, thetas, info))
        losses.append(loss)
    ok = [r for r in range(cfg.restarts) if losses[r] is not None]
    if not ok:
        raise NoSuccessfulRestart(f"all {cfg.restarts} restarts failed; first: {failures[0][1]}", failures)
    best = min(ok, key=lambda r: losses[r])
    theta, traj, thetas, info = results[best]
    diag = {
        "algorithm": cfg.algorithm,
        "optimizer": cfg.optimizer,
        "density_evals": counter.count,
        "oracle_calls": oracle.evals,
        "envelope_rebuilds": oracle.rebuilds,
        "wall_time": time.monotonic() - t0,
        "failures": failures,
        "seed": cfg.seed,
        "stream_prefix": list(prefix),
        **info,
    }
    return FitResult(theta, losses[best], traj, thetas, losses, best, diag)


def bootstrap_fit(f, O, cfg: FitConfig, n_bootstrap, restarts=None) -> BootstrapRun:
    """Refit on ``n_bootstrap`` resamples of ``O`` (with replacement, size M_o).

    Bootstrap ``b`` resamples from stream ``(b, 0)`` and fits below prefix
    ``(b, 1)``; with ``n_bootstrap = 1`` and one restart it reduces to
    :func:`fit` on the resampled data.
    """
    O = as_points(O)
    if restarts is not None:
        cfg = replace(cfg, restarts=int(restarts))
    fits = []
    for b in range(int(n_bootstrap)):
        rng = np.random.Generator(np.random.PCG64(RngSeed(cfg.seed, (b, 0)).sequence()))
        Ob = O[rng.integers(0, O.shape[0], O.shape[0])]
        fits.append(fit(f, Ob, cfg, prefix=(b, 1)))
    th = np.array([r.theta_opt for r in fits])
    q = np.quantile(th, [0.25, 0.5, 0.75], axis=0)
    summary = {"q25": q[0].tolist(), "median": q[1].tolist(), "q75": q[2].tolist()}
    return BootstrapRun(int(n_bootstrap), cfg.restarts, fits, th, summary)


def l1_pdf_error(f, theta_hat, theta_true, quad: QuadratureRule) -> float:
    """Quadrature of ``|f(.; theta_hat) - f(.; theta_true)|`` with both normalized."""
    vals = []
    for th in (theta_hat, theta_true):
        v = np.asarray(f(quad.nodes, th), dtype=float).reshape(-1)
        c = float(quad.weights @ v)
        if not (np.isfinite(c) and c > 0):
            raise ZeroMass(f"density mass under the quadrature rule is {c} at theta={list(th)}")
        vals.append(v / c)
    return float(quad.weights @ np.abs(vals[0] - vals[1]))
