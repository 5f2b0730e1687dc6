"""
Weibull distribution helpers and a three-parameter maximum-likelihood fit.

The CDF used throughout is::

    F(x) = 1 - exp(-((x - nu) / lam) ** kappa)    for x > nu, else 0

A reverse-Weibull tail (bounded above) is handled by fitting this family
to the negated values; there is no separate reverse-family code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import betainc

from .exceptions import (
    ContractError,
    DegenerateTailError,
    DomainError,
    InsufficientTailError,
)

NU_EPS_GRID = (0.001, 0.01, 0.05, 0.1, 0.5)
MIN_SPREAD = 1e-9
REL_TOL = 1e-9
MAX_ITER = 200


@dataclass(frozen=True)
class WeibullParams:
    location: float
    scale: float
    shape: float

    def __post_init__(self):
        for name in ("location", "scale", "shape"):
            object.__setattr__(self, name, float(getattr(self, name)))
            if not math.isfinite(getattr(self, name)):
                raise ContractError(f"Weibull {name} must be finite")
        if self.scale <= 0 or self.shape <= 0:
            raise ContractError("Weibull scale and shape must be positive")

    # short aliases matching the usual symbols
    @property
    def nu(self):
        return self.location

    @property
    def lam(self):
        return self.scale

    @property
    def kappa(self):
        return self.shape

    def cdf(self, x):
        return weibull_cdf(self, x)

    def to_dict(self):
        return {"nu": self.location, "lambda": self.scale, "kappa": self.shape}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["nu"]), float(d["lambda"]), float(d["kappa"]))


@dataclass(frozen=True)
class WeibullFit(WeibullParams):
    """Fitted parameters plus diagnostics of the optimisation."""

    loglik: float = float("nan")
    iterations: int = 0
    converged: bool = False

    def params(self):
        return WeibullParams(self.location, self.scale, self.shape)


def weibull_cdf(p: WeibullParams, x):
    x = np.asarray(x, dtype=float)
    y = np.maximum((x - p.location) / p.scale, 0.0)
    out = -np.expm1(-(y ** p.shape))
    return float(out) if out.ndim == 0 else out


def weibull_logpdf(p: WeibullParams, x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= p.location):
        raise DomainError("Weibull log-density undefined at or below the location")
    z = (x - p.location) / p.scale
    return math.log(p.shape) - math.log(p.scale) + (p.shape - 1.0) * np.log(z) - z ** p.shape


def weibull_loglik(p: WeibullParams, data) -> float:
    return float(np.sum(weibull_logpdf(p, data)))


def weibull_sample(p: WeibullParams, n, rng):
    return p.location + p.scale * rng.weibull(p.shape, size=n)


def _fit_shape_scale(y):
    """Profile MLE of (scale, shape) for positive data with known location.

    Newton iterations on the shape equation, falling back to
    bisection whenever a step leaves the current bracket. ``y`` is
    normalised by its maximum so powers never overflow.
    """
    ymax = y.max()
    u = y / ymax
    logu = np.log(u)
    mean_log = logu.mean()

    def g(k):
        w = u ** k
        s = w.sum()
        return (w * logu).sum() / s - 1.0 / k - mean_log, w, s

    lo, hi = 1e-3, 1e3
    k = 1.0
    it = 0
    converged = False
    for it in range(1, MAX_ITER + 1):
        val, w, s = g(k)
        if val > 0:
            hi = min(hi, k)
        else:
            lo = max(lo, k)
        # dg/dk = var of log u under weights w, plus 1/k^2
        m1 = (w * logu).sum() / s
        m2 = (w * logu * logu).sum() / s
        deriv = m2 - m1 * m1 + 1.0 / (k * k)
        new = k - val / deriv if deriv > 0 else float("nan")
        if not (lo < new < hi) or not math.isfinite(new):
            new = math.sqrt(lo * hi)
        if abs(new - k) <= REL_TOL * k:
            k = new
            converged = True
            break
        k = new
    lam = float(ymax) * float(np.mean(u ** k)) ** (1.0 / k)
    return lam, k, it, converged


def _profile(data, nu):
    nu = float(nu)
    lam, k, it, conv = _fit_shape_scale(data - nu)
    p = WeibullParams(nu, lam, k)
    return weibull_loglik(p, data), p, it, conv


def fit_weibull(data, min_n: int = 3) -> WeibullFit:
    """Three-parameter Weibull maximum-likelihood fit.

    The location is profiled over ``min(data) - eps * range(data)`` for
    ``eps`` in :data:`NU_EPS_GRID` and then refined by a bounded scalar
    search around the best grid point. For each location, scale and shape
    are solved by Newton iterations to relative tolerance 1e-9 (at most
    200 iterations).

    Raises
    ------
    InsufficientTailError
        fewer than ``min_n`` points.
    DegenerateTailError
        ``max(data) - min(data) < 1e-9``.
    """
    x = np.asarray(data, dtype=float).ravel()
    if min_n < 1:
        raise ContractError("min_n must be positive")
    if x.size < min_n:
        raise InsufficientTailError(f"need at least {min_n} points, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ContractError("data must be finite")
    lo, spread = x.min(), x.max() - x.min()
    if spread < MIN_SPREAD:
        raise DegenerateTailError(f"tail spread {spread:.3g} below {MIN_SPREAD}")

    results = []
    for eps in NU_EPS_GRID:
        results.append((eps,) + _profile(x, lo - eps * spread))
    best_i = int(np.argmax([r[1] for r in results]))
    best = results[best_i]

    # bounded refinement in log(eps) between the neighbouring grid points
    a = math.log(NU_EPS_GRID[max(best_i - 1, 0)])
    b = math.log(NU_EPS_GRID[min(best_i + 1, len(NU_EPS_GRID) - 1)])
    res = minimize_scalar(
        lambda t: -_profile(x, lo - math.exp(t) * spread)[0],
        bounds=(a, b), method="bounded", options={"xatol": 1e-6},
    )
    if res.success and -res.fun > best[1]:
        eps = math.exp(res.x)
        best = (eps,) + _profile(x, lo - eps * spread)

    _, ll, p, it, conv = best
    return WeibullFit(p.location, p.scale, p.shape, loglik=ll, iterations=it, converged=conv)


def student_t_sf(t: float, df: int) -> float:
    """Upper-tail probability P(T > t) of Student's t with ``df`` degrees of freedom."""
    if df < 1:
        raise ContractError("df must be >= 1")
    if math.isnan(t):
        raise ContractError("t must not be NaN")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return tail if t >= 0 else 1.0 - tail
