"""Fully implicit 1-D finite-difference solver for the normal-form PDEs.

Time runs backwards from maturity (``tau = T - t``).  Each step solves

    (I - dtau*A + dtau*kappa) u_new = u_old + dtau*kappa*S(u_new)

where ``A`` is the central-difference generator and ``S`` the source term:
``F(u)`` (nonlinear mode, Picard-iterated), ``G(M)`` with ``M`` the linear
mark-to-market layer (mtm mode), or ``a2 * exp(beta*tau) * v**2`` for the
time-weighted rescaling ``u = exp(beta*(T-t)) v``.  A step is split in
halves while the source is stiff on it, which keeps implicit Euler from
igniting early on near-explosive problems.

GBM problems are solved on a log-price grid; general 1-D diffusions on a
uniform price grid whose bounds must be given.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from ..diffusion import ItoProcessSpec
from ..errors import ContractViolation, SolverError
from ..gwtree import Mode
from ..nonlinearity import Polynomial, PayoffSpec, mtm_transform

logger = logging.getLogger(__name__)

PICARD_TOL = 1e-10
PICARD_MAX_ITER = 50
ESCAPE_LEVEL = 1e8
MAX_HALVINGS = 40
STIFF_LIMIT = 5e-4


class Boundary(enum.Enum):
    DIRICHLET = "dirichlet"
    LINEAR = "linear"


@dataclass(frozen=True)
class PdeProblem:
    """A 1-D normal-form problem.

    ``nonlinearity`` approximates ``x+``; ``None`` means the exact positive
    part.  In mtm mode the recovery blend ``(1-R) x+ + R x`` is formed
    internally and the default intensity is ``beta / (1 - R)``.  In
    time-weighted mode ``nonlinearity`` must be ``u + a2 u**2``.
    """

    mode: Mode
    spec: ItoProcessSpec
    payoff: PayoffSpec = field(compare=False)
    beta: float
    T: float
    nonlinearity: Polynomial | None = None
    recovery: float = 0.0
    x0: float = 1.0

    def __post_init__(self):
        if self.spec.dim != 1:
            raise ContractViolation("finite differences are 1-D only")
        if self.beta < 0 or self.T < 0:
            raise ContractViolation("beta and T must be non-negative")
        if not 0.0 <= self.recovery <= 1.0:
            raise ContractViolation("recovery must lie in [0, 1]")
        if self.mode is Mode.MTM and self.recovery >= 1.0:
            raise ContractViolation("mtm mode needs recovery < 1")
        if self.mode is Mode.TIMEWEIGHTED:
            quadratic_coefficient(self.nonlinearity)

    @property
    def intensity(self) -> float:
        if self.mode is Mode.MTM:
            return self.beta / (1.0 - self.recovery)
        return self.beta

    def with_(self, **kw) -> "PdeProblem":
        d = dict(mode=self.mode, spec=self.spec, payoff=self.payoff, beta=self.beta, T=self.T,
                 nonlinearity=self.nonlinearity, recovery=self.recovery, x0=self.x0)
        d.update(kw)
        return PdeProblem(**d)


def quadratic_coefficient(poly: Polynomial | None) -> float:
    """``a2`` of a time-weighted nonlinearity ``u + a2 u**2``."""
    if poly is None:
        raise ContractViolation("time-weighted mode needs an explicit polynomial")
    c = list(poly.coeffs) + [0.0] * 3
    if c[1] != 1.0 or c[0] != 0.0 or any(c[3:]) or c[2] == 0.0:
        raise ContractViolation("time-weighted mode requires F(u) = u + a2*u^2")
    return c[2]


@dataclass(frozen=True)
class FdGrid:
    x_min: float
    x_max: float
    n_space: int = 801
    n_time: int = 400
    boundary: Boundary = Boundary.DIRICHLET
    smoothing: bool = True
    # steps are halved while dtau * kappa * |dS/du| exceeds this
    stiffness: float = STIFF_LIMIT

    def __post_init__(self):
        if not self.stiffness > 0:
            raise ContractViolation("stiffness limit must be positive")
        if self.n_space < 3 or self.n_time < 1:
            raise ContractViolation("need n_space >= 3 and n_time >= 1")
        if not self.x_min < self.x_max:
            raise ContractViolation("x_min must be < x_max")

    @classmethod
    def for_problem(cls, problem: PdeProblem, n_space: int = 801, n_time: int = 400,
                    width: float = 6.0, **kw) -> "FdGrid":
        """Log-space grid ``ln x0 +- width*sigma*sqrt(T)`` for GBM problems."""
        if not problem.spec.is_gbm:
            raise ContractViolation("default grid bounds only exist for GBM; pass explicit bounds")
        s = problem.spec.sigma[0] * math.sqrt(max(problem.T, 1e-12))
        half = width * max(s, 1e-3)
        c = math.log(problem.x0)
        return cls(c - half, c + half, n_space, n_time, **kw)


@dataclass
class FdSolution:
    """Solution ``u(0, .)`` on the grid nodes (price coordinates in ``x``)."""

    x: np.ndarray
    u: np.ndarray
    grid: FdGrid
    x0: float
    diverged: bool = False
    divergence_time: float | None = None
    picard_max_iterations: int = 0
    mtm_layer: np.ndarray | None = None
    _spline: CubicSpline | None = field(default=None, repr=False)

    def __call__(self, x) -> np.ndarray | float:
        if self.diverged:
            return np.full_like(np.asarray(x, dtype=float), np.inf) if np.ndim(x) else math.inf
        if self._spline is None:
            coord = np.log(self.x) if self._log_grid else self.x
            self._spline = CubicSpline(coord, self.u)
        q = np.log(x) if self._log_grid else np.asarray(x, dtype=float)
        out = self._spline(q)
        return float(out) if np.ndim(out) == 0 else out

    _log_grid: bool = True

    @property
    def value(self) -> float:
        return self(self.x0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "u"])
            for xi, ui in zip(self.x, self.u):
                w.writerow([repr(float(xi)), repr(float(ui))])


def _operator(spec: ItoProcessSpec, nodes: np.ndarray, h: float, t: float, log_grid: bool):
    """Sub/main/super diagonals of the generator on interior nodes."""
    if log_grid:
        sig, mu = spec.sigma[0], spec.mu[0]
        a = np.full(nodes.size, 0.5 * sig * sig)
        b = np.full(nodes.size, mu - 0.5 * sig * sig)
    else:
        xs = nodes[:, None]
        tt = np.full(nodes.size, t)
        s = np.asarray(spec.vol(tt, xs), dtype=float)[:, 0]
        a = 0.5 * s * s
        b = np.asarray(spec.drift(tt, xs), dtype=float)[:, 0]
    lo = a / h**2 - b / (2 * h)
    up = a / h**2 + b / (2 * h)
    di = -2 * a / h**2
    return lo, di, up


def _initial(payoff: PayoffSpec, nodes: np.ndarray, h: float, log_grid: bool, smooth: bool):
    if not smooth:
        pts = nodes
        x = np.exp(pts) if log_grid else pts
        return payoff(x[:, None])
    m = 32
    off = (np.arange(m) + 0.5) / m - 0.5
    pts = (nodes[:, None] + h * off[None, :]).ravel()
    x = np.exp(pts) if log_grid else pts
    return payoff(x[:, None]).reshape(nodes.size, m).mean(axis=1)


class _Stepper:
    """Implicit solve with fixed boundary handling for one diagonal set."""

    def __init__(self, lo, di, up, dtau, kappa, boundary: Boundary, n):
        self.boundary = boundary
        self.n = n
        # interior rows 1..n-2 ; diagonals indexed by interior position
        L = -dtau * lo
        D = 1.0 - dtau * di + dtau * kappa
        U = -dtau * up
        if boundary is Boundary.LINEAR:
            # u0 = 2u1 - u2 ; u_{n-1} = 2u_{n-2} - u_{n-3}
            D = D.copy()
            U = U.copy()
            L = L.copy()
            D[0] += 2 * L[0]
            U[0] -= L[0]
            D[-1] += 2 * U[-1]
            L[-1] -= U[-1]
        self.L, self.D, self.U = L, D, U
        ab = np.zeros((3, n - 2))
        ab[0, 1:] = U[:-1]
        ab[1] = D
        ab[2, :-1] = L[1:]
        self.ab = ab

    def solve(self, rhs_int: np.ndarray, left: float, right: float) -> np.ndarray:
        r = rhs_int.copy()
        if self.boundary is Boundary.DIRICHLET:
            r[0] -= self.L[0] * left
            r[-1] -= self.U[-1] * right
        inner = solve_banded((1, 1), self.ab, r, check_finite=False)
        out = np.empty(self.n)
        out[1:-1] = inner
        if self.boundary is Boundary.DIRICHLET:
            out[0], out[-1] = left, right
        else:
            out[0] = 2 * inner[0] - inner[1]
            out[-1] = 2 * inner[-1] - inner[-2]
        return out


def _positive_part(u):
    return np.maximum(u, 0.0)


def fd_solve(problem: PdeProblem, grid: FdGrid | None = None) -> FdSolution:
    grid = grid or FdGrid.for_problem(problem)
    log_grid = problem.spec.is_gbm
    nodes = np.linspace(grid.x_min, grid.x_max, grid.n_space)
    h = nodes[1] - nodes[0]
    x_nodes = np.exp(nodes) if log_grid else nodes
    n = grid.n_space
    nt = grid.n_time
    dtau = problem.T / nt if nt else 0.0
    kappa = problem.intensity
    u = _initial(problem.payoff, nodes, h, log_grid, grid.smoothing)
    left, right = float(u[0]), float(u[-1])

    mode = problem.mode
    poly = problem.nonlinearity
    source: Callable[[np.ndarray, float], np.ndarray] | None
    if mode is Mode.NONLINEAR:
        F = _positive_part if poly is None else poly
        source = lambda v, tau: F(v)  # noqa: E731
    elif mode is Mode.TIMEWEIGHTED:
        a2 = quadratic_coefficient(poly)
        beta = problem.beta
        source = lambda v, tau: a2 * math.exp(beta * tau) * v * v  # noqa: E731
    else:
        R = problem.recovery
        if poly is None:
            G = lambda m: (1.0 - R) * np.maximum(m, 0.0) + R * m  # noqa: E731
        else:
            G = mtm_transform(poly, R)
        source = None

    M = u.copy() if mode is Mode.MTM else None
    interior = nodes[1:-1]
    cache: dict[float, _Stepper] = {}

    def stepper(t: float, dt: float, rate: float) -> _Stepper:
        key = (dt, rate)
        if log_grid and key in cache:
            return cache[key]
        lo, di, up = _operator(problem.spec, interior, h, t, log_grid)
        st = _Stepper(lo, di, up, dt, rate, grid.boundary, n)
        if log_grid:
            cache[key] = st
        return st

    stats = {"picard": 0, "halvings": 0}

    def diverged_at(tau: float) -> FdSolution:
        logger.info("finite-difference solution escaped at t=%.6g", problem.T - tau)
        return FdSolution(x_nodes, np.full(n, np.inf), grid, problem.x0, diverged=True,
                          divergence_time=problem.T - tau,
                          picard_max_iterations=stats["picard"], _log_grid=log_grid)

    def nonlinear_step(u_old, tau0, dt, depth):
        """Advance from tau0 by dt, halving the step while Picard fails."""
        if depth < MAX_HALVINGS and dt * kappa * _slope(source, u_old, tau0) > grid.stiffness:
            # growing reactions make implicit Euler blow up early; refine instead
            stats["halvings"] += 1
            mid = nonlinear_step(u_old, tau0, dt / 2, depth + 1)
            if mid is None:
                return None
            return nonlinear_step(mid, tau0 + dt / 2, dt / 2, depth + 1)
        st = stepper(problem.T - tau0 - dt, dt, kappa)
        outcome, it, cand = _picard(st, u_old, dt * kappa, source, tau0 + dt, left, right)
        stats["picard"] = max(stats["picard"], it)
        if outcome == "ok":
            return cand
        if depth >= MAX_HALVINGS:
            if outcome == "escaped" or np.max(np.abs(u_old)) > ESCAPE_LEVEL ** 0.5:
                return None
            raise SolverError(f"Picard iteration did not converge at tau={tau0 + dt:.6g}")
        stats["halvings"] += 1
        mid = nonlinear_step(u_old, tau0, dt / 2, depth + 1)
        if mid is None:
            return None
        return nonlinear_step(mid, tau0 + dt / 2, dt / 2, depth + 1)

    for step in range(1, nt + 1):
        tau0 = (step - 1) * dtau
        if mode is Mode.MTM:
            t_new = problem.T - tau0 - dtau
            M = stepper(t_new, dtau, 0.0).solve(M[1:-1], left, right)
            rhs = u[1:-1] + dtau * kappa * G(M[1:-1])
            u = stepper(t_new, dtau, kappa).solve(rhs, left, right)
        elif kappa == 0.0:
            u = stepper(problem.T - tau0 - dtau, dtau, 0.0).solve(u[1:-1].copy(), left, right)
        else:
            u_new = nonlinear_step(u, tau0, dtau, 0)
            if u_new is None or np.max(np.abs(u_new)) > ESCAPE_LEVEL:
                return diverged_at(tau0 + dtau)
            u = u_new

    if stats["halvings"]:
        logger.debug("finite-difference solve used %d step halvings", stats["halvings"])
    if mode is Mode.TIMEWEIGHTED:
        u = math.exp(problem.beta * problem.T) * u
    return FdSolution(x_nodes, u, grid, problem.x0, picard_max_iterations=stats["picard"],
                      mtm_layer=M, _log_grid=log_grid)


def _slope(source, u, tau) -> float:
    """Largest local derivative of the source term, by forward differences."""
    e = 1e-7 * (1.0 + np.abs(u))
    with np.errstate(over="ignore", invalid="ignore"):
        d = np.abs(source(u + e, tau) - source(u, tau)) / e
    m = float(np.max(d))
    return m if math.isfinite(m) else math.inf


def _picard(stepper: _Stepper, u_old, weight, source, tau, left, right):
    """Fixed-point iteration for one implicit step: ``(outcome, iterations, u)``."""
    it_u = u_old
    base = u_old[1:-1]
    prev_res = math.inf
    damp = 1.0
    for it in range(1, PICARD_MAX_ITER + 1):
        rhs = base + weight * source(it_u[1:-1], tau)
        cand = stepper.solve(rhs, left, right)
        if not np.all(np.isfinite(cand)) or np.max(np.abs(cand)) > ESCAPE_LEVEL:
            return "escaped", it, cand
        res = float(np.max(np.abs(cand - it_u)))
        if res <= PICARD_TOL * max(1.0, float(np.max(np.abs(cand)))):
            return "ok", it, cand
        if res > prev_res:
            damp = 0.5
        it_u = cand if damp == 1.0 else it_u + damp * (cand - it_u)
        prev_res = res
    return "stalled", PICARD_MAX_ITER, it_u


@dataclass(frozen=True)
class BiasBounds:
    lower: FdSolution
    exact: FdSolution
    upper: FdSolution

    @property
    def values(self) -> tuple[float, float, float]:
        return self.lower.value, self.exact.value, self.upper.value


def check_bias_bounds(problem: PdeProblem, f_under: Polynomial, f_over: Polynomial,
                      grid: FdGrid | None = None, tol: float = 1e-6) -> BiasBounds:
    """Solve with ``F_under``, exact ``x+`` and ``F_over``; assert nodewise ordering."""
    grid = grid or FdGrid.for_problem(problem)
    lo = fd_solve(problem.with_(nonlinearity=f_under), grid)
    ex = fd_solve(problem.with_(nonlinearity=None), grid)
    hi = fd_solve(problem.with_(nonlinearity=f_over), grid)
    if lo.diverged or ex.diverged or hi.diverged:
        raise SolverError("bias-bound solve diverged")
    if np.any(lo.u > ex.u + tol) or np.any(ex.u > hi.u + tol):
        worst = max(float(np.max(lo.u - ex.u)), float(np.max(ex.u - hi.u)))
        raise AssertionError(f"comparison ordering violated by {worst:.3g}")
    return BiasBounds(lo, ex, hi)
