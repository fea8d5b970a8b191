"""Analytic diagnostics for marked branching trees.

The Laplace transform ``P(T, c) = E[prod_k exp(-c_k omega_k)]`` of the
branch-type counts solves

    dG/dt = beta * (-G + sum_k p_k exp(-c_k) G**k),    G(0) = 1,

which is integrated numerically; the single-type case has a closed form.
Bounds on the estimator and the convergence criterion are evaluations of
the same object with ``p_k exp(-c_k)`` replaced by ``|a_k| |psi|**(k-1)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.optimize import brentq

from .errors import ContractViolation
from .nonlinearity import Polynomial, ProbabilityVector

ODE_RTOL = 1e-11
ODE_ATOL = 1e-13
QUAD_TOL = 1e-10
ROOT_TOL = 1e-10
ESCAPE = 1e12


def laplace_single_closed(T: float, beta: float, k: int, c: float) -> float:
    """Closed form of ``E[exp(-c omega_k)]`` when only type ``k`` is drawn."""
    if k == 1:
        raise ContractViolation("closed form requires k != 1")
    if T < 0 or beta < 0:
        raise ContractViolation("T and beta must be non-negative")
    e = math.exp(beta * T * (k - 1))
    inner = 1.0 - e + math.exp(c) * e
    if inner <= 0:
        return math.inf
    return math.exp(c / (k - 1)) / inner ** (1.0 / (k - 1))


def _growth_solution(q: np.ndarray, beta: float, T: float) -> float:
    """``G(T)`` for ``G' = beta (-G + sum q_k G^k)``, ``G(0) = 1``; ``inf`` on escape."""
    if beta == 0.0 or T == 0.0:
        return 1.0
    if math.fsum(q) == 1.0:
        return 1.0
    coeffs = np.pad(np.asarray(q, dtype=float), (0, max(0, 2 - len(q))))
    coeffs[1] -= 1.0
    rev = coeffs[::-1]

    def rhs(_s, g):
        return [np.polyval(rev, g[0])]

    def escape(_s, g):
        return ESCAPE - g[0]

    escape.terminal = True
    sol = solve_ivp(rhs, (0.0, beta * T), [1.0], method="DOP853", rtol=ODE_RTOL,
                    atol=ODE_ATOL, events=escape)
    if sol.status == 1 or not np.isfinite(sol.y[0, -1]):
        return math.inf
    if sol.status != 0:
        return math.inf
    return float(sol.y[0, -1])


def laplace_numeric(T: float, beta: float, probs: ProbabilityVector, c: Sequence[float]) -> float:
    """``E[prod exp(-c_k omega_k)]`` from the growth ODE (``inf`` if it escapes first)."""
    p = np.asarray(probs.probs, dtype=float)
    cc = np.zeros(p.size)
    cc[:min(p.size, len(c))] = np.asarray(c, dtype=float)[:p.size]
    with np.errstate(over="ignore"):
        q = np.where(p > 0, p * np.exp(-cc), 0.0)
    if not np.all(np.isfinite(q)):
        return math.inf
    return _growth_solution(q, beta, T)


class Regime(enum.Enum):
    SUBCRITICAL = "subcritical"
    CRITICAL = "critical"
    SUPERCRITICAL = "supercritical"


@dataclass(frozen=True)
class CriticalityReport:
    m: float
    s0: float
    regime: Regime

    def to_dict(self):
        return {"m": self.m, "s0": self.s0, "regime": self.regime.value}


def criticality(probs: ProbabilityVector) -> CriticalityReport:
    p = np.asarray(probs.probs, dtype=float)
    m = math.fsum(k * pk for k, pk in enumerate(p))
    if abs(m - 1.0) <= 1e-12:
        regime = Regime.CRITICAL
    else:
        regime = Regime.SUPERCRITICAL if m > 1 else Regime.SUBCRITICAL

    def g(s):
        return float(np.polyval(p[::-1], s)) - s

    s0 = 1.0
    if g(0.0) == 0.0:
        s0 = 0.0
    else:
        grid = np.linspace(0.0, 1.0, 2001)
        vals = np.array([g(s) for s in grid])
        for a, b, ga, gb in zip(grid, grid[1:], vals, vals[1:]):
            if b == 1.0:
                break
            if ga == 0.0:
                s0 = float(a)
                break
            if ga * gb < 0:
                s0 = brentq(g, a, b, xtol=ROOT_TOL)
                break
    return CriticalityReport(m, s0, regime)


@dataclass(frozen=True)
class BlowUpReport:
    converges: bool
    X: float
    T_max: float
    case: int

    def to_dict(self):
        return asdict(self)


def _bound_coefficients(poly: Polynomial, sup_norm: float) -> np.ndarray:
    return np.array([abs(a) * sup_norm ** (k - 1) for k, a in enumerate(poly.coeffs)])


def _growth_integral(c: np.ndarray, beta: float, lo: float, hi: float) -> float:
    """``int_lo^hi ds / (beta (-s + sum c_k s^k))``."""
    rev = c.copy()
    if rev.size < 2:
        rev = np.append(rev, 0.0)
    rev[1] -= 1.0
    rev = rev[::-1]

    def f(s):
        return 1.0 / (beta * np.polyval(rev, s))

    if math.isinf(hi):
        # s = 1/w maps [lo, inf) onto (0, 1/lo]
        val, _ = quad(lambda w: f(1.0 / w) / (w * w), 0.0, 1.0 / lo, epsabs=QUAD_TOL,
                      epsrel=QUAD_TOL, limit=200)
    else:
        val, _ = quad(f, lo, hi, epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)
    return val


def blowup_check(poly: Polynomial, sup_norm: float, beta: float, T: float) -> BlowUpReport:
    """Sufficient convergence criterion for the main representation.

    ``X`` solves ``int_1^X ds/p(s) = T`` with ``p(s) = beta (-s + sum |a_k|
    |psi|^(k-1) s^k)``; ``T_max`` is the supremum of that map.
    """
    if not sup_norm > 0:
        raise ContractViolation("sup_norm must be positive")
    c = _bound_coefficients(poly, sup_norm)
    total = math.fsum(c)
    if beta == 0.0 or T == 0.0:
        return BlowUpReport(True, 1.0, math.inf, 2 if total <= 1 else 1)
    if total <= 1.0:
        return BlowUpReport(True, _growth_solution(c, beta, T), math.inf, 2)

    # first root of p beyond 1 (p(1) > 0 here)
    rev = c.copy()
    if rev.size < 2:
        rev = np.append(rev, 0.0)
    rev[1] -= 1.0
    roots = np.roots(rev[::-1]) if np.any(rev[2:]) else np.array([-rev[0] / rev[1]]) if rev[1] else np.array([])
    real = sorted(r.real for r in np.atleast_1d(roots) if abs(r.imag) < 1e-12 and r.real > 1.0)
    x_star = real[0] if real else math.inf
    degree = int(np.flatnonzero(rev)[-1])
    if math.isfinite(x_star) or degree < 2:
        t_max = math.inf
    else:
        t_max = _growth_integral(c, beta, 1.0, math.inf)
    if T >= t_max:
        return BlowUpReport(False, math.inf, t_max, 1)

    def gap(X):
        return _growth_integral(c, beta, 1.0, X) - T

    hi = 2.0
    if math.isfinite(x_star):
        j = 1
        hi = x_star - (x_star - 1.0) * 0.5**j
        while gap(hi) < 0:
            j += 1
            hi = x_star - (x_star - 1.0) * 0.5**j
    else:
        while gap(hi) < 0:
            hi *= 2.0
    X = brentq(gap, 1.0, hi, xtol=ROOT_TOL, rtol=4 * np.finfo(float).eps)
    return BlowUpReport(True, float(X), t_max, 1)


def variance_bound(poly: Polynomial, probs: ProbabilityVector, sup_norm: float, beta: float,
                   T: float, moment: int = 1) -> float:
    """Bound on ``E[|estimator|^moment]``; ``inf`` when the bounding ODE escapes."""
    if moment not in (1, 2):
        raise ContractViolation("moment must be 1 or 2")
    if not sup_norm > 0:
        raise ContractViolation("sup_norm must be positive")
    a = np.asarray(poly.coeffs, dtype=float)
    p = np.zeros(max(a.size, len(probs)))
    p[:len(probs)] = probs.probs
    a = np.pad(a, (0, p.size - a.size))
    if np.any((a != 0) & (p == 0)):
        raise ContractViolation("probability zero on a non-zero coefficient")
    c = np.zeros(p.size)
    nz = a != 0
    k = np.arange(p.size)
    c[nz] = -moment * np.log(np.abs(a[nz]) / p[nz]) - moment * (k[nz] - 1) * math.log(sup_norm)
    pv = ProbabilityVector(tuple(_clean(p)))
    return sup_norm**moment * laplace_numeric(T, beta, pv, c)


def _clean(p: np.ndarray) -> list[float]:
    out = list(map(float, p))
    j = int(np.argmax(p))
    out[j] += 1.0 - math.fsum(out)
    return out
