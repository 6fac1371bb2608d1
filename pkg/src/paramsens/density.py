"""Black-box densities, evaluation accounting and closed-form Gaussian oracles.

A density is any object with ``ndim``, ``nparams`` and a vectorised
``__call__(x, params)`` where ``x`` has shape ``(..., ndim)`` and the result
has shape ``x.shape[:-1]``.  Normalisation is never assumed; consumers
integrate numerically.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .errors import DomainViolation, InvalidParameter, UnknownDensity

__all__ = [
    "Density",
    "CountingDensity",
    "Gaussian1D",
    "Gaussian2D",
    "Beta1D",
    "Proxy2D",
    "gaussian1d",
    "gaussian2d",
    "beta1d",
    "proxy2d",
    "get_density",
    "REGISTRY",
    "as_params",
    "fd_param_gradient",
    "pdf_param_gradient_of",
    "gaussian1d_jacobian_oracle",
    "truncated_gaussian1d_jacobian_oracle",
    "gaussian2d_jacobian_oracle",
    "gaussian2d_diag_jacobian_oracle",
    "digamma",
    "EULER_GAMMA",
]

EULER_GAMMA = 0.57721566490153286061
_SQRT2PI = math.sqrt(2.0 * math.pi)
FD_PARAM_STEP = 1e-6


def as_params(params, nparams=None):
    p = np.array(params, dtype=float).reshape(-1)
    if p.size < 1 or not np.all(np.isfinite(p)):
        raise InvalidParameter(f"parameters must be a nonempty finite vector, got {params!r}")
    if nparams is not None and p.size != nparams:
        raise InvalidParameter(f"expected {nparams} parameters, got {p.size}")
    return p


class Density:
    """Base class for built-in density families."""

    name = "density"
    ndim = 1
    nparams = 1
    param_names: tuple = ()
    concurrency_safe = True

    def check_params(self, params):
        return as_params(params, self.nparams)

    def _points(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 and self.ndim == 1:
            x = x.reshape(1)
        if x.shape[-1] != self.ndim:
            raise DomainViolation(f"{self.name} expects points with last axis {self.ndim}, got {x.shape}")
        return x

    def __call__(self, x, params):
        raise NotImplementedError

    def param_gradient(self, x, params, step=FD_PARAM_STEP):
        """d f / d theta, shape ``x.shape[:-1] + (P,)``; central differences by default."""
        return fd_param_gradient(self, x, self.check_params(params), step)

    def __repr__(self):
        return f"{type(self).__name__}()"


def fd_param_gradient(f, x, params, step=FD_PARAM_STEP):
    """Central finite differences of ``f(x, theta)`` in each parameter."""
    p = as_params(params)
    cols = []
    for j in range(p.size):
        e = np.zeros_like(p)
        e[j] = step
        cols.append((np.asarray(f(x, p + e)) - np.asarray(f(x, p - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def pdf_param_gradient_of(f):
    """The density's own ``param_gradient`` if it has one, else central differences."""
    g = getattr(f, "param_gradient", None)
    if g is not None:
        return g
    return lambda x, params: fd_param_gradient(f, x, params)


class CountingDensity:
    """Wraps a density and counts point evaluations exactly (thread-safe)."""

    def __init__(self, density):
        self.density = density
        self.ndim = density.ndim
        self.nparams = density.nparams
        self.name = getattr(density, "name", "density")
        self.concurrency_safe = getattr(density, "concurrency_safe", False)
        self._count = 0
        self._lock = threading.Lock()

    @property
    def count(self):
        return self._count

    def reset(self):
        with self._lock:
            self._count = 0

    def __call__(self, x, params):
        x = np.asarray(x, dtype=float)
        n = x.size // self.ndim if x.ndim else 1
        out = self.density(x, params)
        with self._lock:
            self._count += n
        return out

    def __getattr__(self, item):
        return getattr(self.density, item)


class Gaussian1D(Density):
    name = "gaussian1d"
    ndim = 1
    nparams = 2
    param_names = ("mu", "sigma")

    def check_params(self, params):
        p = as_params(params, 2)
        if p[1] <= 0:
            raise InvalidParameter(f"sigma must be positive, got {p[1]}")
        return p

    def __call__(self, x, params):
        mu, sigma = self.check_params(params)
        z = (self._points(x)[..., 0] - mu) / sigma
        return np.exp(-0.5 * z * z) / (sigma * _SQRT2PI)

    def cdf(self, x, params):
        from scipy.special import ndtr

        mu, sigma = self.check_params(params)
        return ndtr((np.asarray(x, dtype=float) - mu) / sigma)


class Gaussian2D(Density):
    name = "gaussian2d"
    ndim = 2
    nparams = 5
    param_names = ("mu1", "mu2", "sigma1", "sigma2", "rho")

    def check_params(self, params):
        p = as_params(params, 5)
        if p[2] <= 0 or p[3] <= 0 or not abs(p[4]) < 1:
            raise InvalidParameter(f"degenerate covariance for parameters {p.tolist()}")
        return p

    def __call__(self, x, params):
        mu1, mu2, s1, s2, rho = self.check_params(params)
        x = self._points(x)
        z1 = (x[..., 0] - mu1) / s1
        z2 = (x[..., 1] - mu2) / s2
        om = 1.0 - rho * rho
        q = (z1 * z1 - 2.0 * rho * z1 * z2 + z2 * z2) / om
        return np.exp(-0.5 * q) / (2.0 * math.pi * s1 * s2 * math.sqrt(om))

    def mahalanobis_sq(self, x, params):
        mu1, mu2, s1, s2, rho = self.check_params(params)
        x = np.asarray(x, dtype=float)
        z1 = (x[..., 0] - mu1) / s1
        z2 = (x[..., 1] - mu2) / s2
        return (z1 * z1 - 2.0 * rho * z1 * z2 + z2 * z2) / (1.0 - rho * rho)


def digamma(t):
    """Digamma function for positive real arguments (scalar or array).

    Shifts the argument above 6 with psi(t) = psi(t + 1) - 1/t, then uses the
    asymptotic expansion in 1/t^2.
    """
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise DomainViolation("digamma is only implemented for t > 0")
    t = t.copy()
    acc = np.zeros_like(t)
    low = t < 6.0
    while np.any(low):
        acc[low] -= 1.0 / t[low]
        t[low] += 1.0
        low = t < 6.0
    r = 1.0 / (t * t)
    series = r * (
        1.0 / 12
        - r * (1.0 / 120
               - r * (1.0 / 252
                      - r * (1.0 / 240
                             - r * (1.0 / 132
                                    - r * (691.0 / 32760
                                           - r * (1.0 / 12)))))))
    out = acc + np.log(t) - 0.5 / t - series
    return float(out) if out.ndim == 0 else out


class Beta1D(Density):
    name = "beta1d"
    ndim = 1
    nparams = 2
    param_names = ("theta1", "theta2")

    def check_params(self, params):
        p = as_params(params, 2)
        if p[0] <= 0 or p[1] <= 0:
            raise InvalidParameter(f"beta parameters must be positive, got {p.tolist()}")
        return p

    def _x(self, x):
        x = self._points(x)[..., 0]
        if np.any(~((x > 0) & (x < 1))):
            raise DomainViolation("beta density evaluated outside (0, 1)")
        return x

    def __call__(self, x, params):
        a, b = self.check_params(params)
        x = self._x(x)
        lognorm = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        return np.exp((a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) + lognorm)

    def param_gradient(self, x, params, step=None):
        a, b = self.check_params(params)
        xs = self._x(x)
        f = self(x, params)
        dab = digamma(a + b)
        return np.stack(
            [f * (np.log(xs) + dab - digamma(a)), f * (np.log1p(-xs) + dab - digamma(b))],
            axis=-1,
        )

    # the pdf_param_gradient name used in configs and docs
    pdf_param_gradient = param_gradient


class Proxy2D(Density):
    """Unnormalised 2-D surrogate density on the open unit square."""

    name = "proxy2d"
    ndim = 2
    nparams = 5
    param_names = ("theta1", "theta2", "theta3", "theta4", "theta5")
    box = np.array([[-0.5, 1.0], [2.75, 4.0], [0.0, 1.3], [3.0, 4.5], [0.0, 1.5]])
    # finite-difference probes may step just outside the box
    box_slack = 1e-4

    def check_params(self, params):
        p = as_params(params, 5)
        if np.any(p < self.box[:, 0] - self.box_slack) or np.any(p > self.box[:, 1] + self.box_slack):
            raise InvalidParameter(f"proxy parameters {p.tolist()} outside the admissible box")
        return p

    def _x(self, x):
        x = self._points(x)
        if np.any(~((x > 0) & (x < 1))):
            raise DomainViolation("proxy density evaluated outside (0, 1)^2")
        return x[..., 0], x[..., 1]

    def __call__(self, x, params):
        t1, t2, t3, t4, t5 = self.check_params(params)
        x1, x2 = self._x(x)
        return (
            np.exp(t1 * np.log(x1) + t2 * np.log1p(-x1) + t3 * np.log(x2) + t4 * np.log1p(-x2))
            * (1.0 + t5 * x1 * x2)
        )

    def param_gradient(self, x, params, step=None):
        p = self.check_params(params)
        x1, x2 = self._x(x)
        f = self(x, p)
        return np.stack(
            [
                f * np.log(x1),
                f * np.log1p(-x1),
                f * np.log(x2),
                f * np.log1p(-x2),
                f * x1 * x2 / (1.0 + p[4] * x1 * x2),
            ],
            axis=-1,
        )


REGISTRY = {
    "gaussian1d": Gaussian1D,
    "gaussian2d": Gaussian2D,
    "beta1d": Beta1D,
    "proxy2d": Proxy2D,
}


def get_density(name):
    try:
        return REGISTRY[name]()
    except KeyError:
        raise UnknownDensity(f"unknown density {name!r}; known: {sorted(REGISTRY)}") from None


def gaussian1d(params=None):
    """Gaussian family; ``params`` (if given) is validated eagerly."""
    d = Gaussian1D()
    if params is not None:
        d.check_params(params)
    return d


def gaussian2d(params=None):
    d = Gaussian2D()
    if params is not None:
        d.check_params(params)
    return d


def beta1d(params=None):
    d = Beta1D()
    if params is not None:
        d.check_params(params)
    return d


def proxy2d(params=None):
    d = Proxy2D()
    if params is not None:
        d.check_params(params)
    return d


def gaussian1d_jacobian_oracle(x, params):
    """Closed-form dx/d(mu, sigma) = [1, (x - mu)/sigma]; shape ``x.shape + (2,)``."""
    mu, sigma = Gaussian1D().check_params(params)
    z = (np.asarray(x, dtype=float) - mu) / sigma
    return np.stack([np.ones_like(z), z], axis=-1)


def truncated_gaussian1d_jacobian_oracle(x, params, lo, hi):
    """dx/d(mu, sigma) for the Gaussian restricted to the fixed interval ``[lo, hi]``.

    Implicit differentiation of ``F = (Phi(z) - Phi(z_lo)) / (Phi(z_hi) - Phi(z_lo))``;
    this is what a grid on ``[lo, hi]`` converges to.
    """
    from scipy.special import ndtr

    mu, sigma = Gaussian1D().check_params(params)
    z = (np.asarray(x, dtype=float) - mu) / sigma
    za, zb = (lo - mu) / sigma, (hi - mu) / sigma
    phi = lambda t: np.exp(-0.5 * t * t) / _SQRT2PI
    num, den = ndtr(z) - ndtr(za), ndtr(zb) - ndtr(za)
    out = []
    # dz/dmu = -1/sigma, dz/dsigma = -z/sigma, likewise for the bounds
    for dz, dza, dzb in ((-1 / sigma, -1 / sigma, -1 / sigma), (-z / sigma, -za / sigma, -zb / sigma)):
        dnum = phi(z) * dz - phi(za) * dza
        dden = phi(zb) * dzb - phi(za) * dza
        dF = (dnum * den - num * dden) / den**2
        out.append(-dF * sigma * den / phi(z))
    return np.stack(out, axis=-1)


def _z12(x, params):
    mu1, mu2, s1, s2, rho = Gaussian2D().check_params(params)
    x = np.asarray(x, dtype=float)
    return (x[..., 0] - mu1) / s1, (x[..., 1] - mu2) / s2, s1, s2, rho


def gaussian2d_jacobian_oracle(x, params):
    """Closed-form 2 x 5 Jacobian under the conditional-CDF mapping."""
    z1, z2, s1, s2, rho = _z12(x, params)
    one, zero = np.ones_like(z1), np.zeros_like(z1)
    om = 1.0 - rho * rho
    r1 = np.stack([one, zero, z1, zero, s1 * z2 / om], axis=-1)
    r2 = np.stack([zero, one, zero, z2, s2 * z1 / om], axis=-1)
    return np.stack([r1, r2], axis=-2)


def gaussian2d_diag_jacobian_oracle(x, params):
    """Closed-form 2 x 5 Jacobian under the diagonal approximation."""
    z1, z2, s1, s2, rho = _z12(x, params)
    one = np.ones_like(z1)
    om = 1.0 - rho * rho
    r1 = np.stack(
        [one, -rho * s1 / s2 * one, z1, -rho * s1 / s2 * z2, -s1 / om * (rho * z1 - z2)], axis=-1
    )
    r2 = np.stack(
        [-rho * s2 / s1 * one, one, -rho * s2 / s1 * z1, z2, s2 / om * (z1 - rho * z2)], axis=-1
    )
    return np.stack([r1, r2], axis=-2)
