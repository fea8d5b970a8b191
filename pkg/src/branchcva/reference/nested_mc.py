"""Brute-force nested ("Monte Carlo of Monte Carlo") baseline.

Outer paths are sampled on the midpoints ``s_i`` of a uniform date grid
and at maturity.  At each midpoint an inner simulation estimates
``m_i = E[psi(X_T) | X_{s_i}]`` and the estimator assembles

    nonlinear:  exp(-beta T) psi(X_T) + beta exp(-beta T) sum_i F(m_i) dt
    mtm:        exp(-lam T) psi(X_T) + sum_i (exp(-lam t_{i-1}) - exp(-lam t_i)) G(m_i)

with ``lam = beta / (1 - R)`` and ``G`` the recovery blend.  The first form
is accurate to first order in ``beta``; the second is exact up to the
quadrature and the inner sampling error.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import rng as rngmod
from ..diffusion import ItoProcessSpec, advance, sample_paths
from ..errors import ContractViolation
from ..gwtree import McEstimate, Mode
from ..nonlinearity import PayoffSpec, Polynomial, mtm_transform

logger = logging.getLogger(__name__)

OUTER_BLOCK = 1 << 12
# cap on simultaneously simulated inner paths per date
INNER_CHUNK = 1 << 20


@dataclass(frozen=True)
class McProblem:
    """Problem description for the simulation baselines (any dimension)."""

    mode: Mode
    spec: ItoProcessSpec
    payoff: PayoffSpec = field(compare=False)
    beta: float
    T: float
    nonlinearity: Polynomial | None = None
    recovery: float = 0.0
    x0: float | tuple[float, ...] = 1.0

    def __post_init__(self):
        if self.beta < 0 or self.T < 0:
            raise ContractViolation("beta and T must be non-negative")
        if not 0.0 <= self.recovery < 1.0 and self.mode is Mode.MTM:
            raise ContractViolation("mtm mode needs recovery in [0, 1)")

    @property
    def intensity(self) -> float:
        if self.mode is Mode.MTM:
            return self.beta / (1.0 - self.recovery)
        return self.beta


@dataclass(frozen=True)
class NestedMcEstimate(McEstimate):
    """:class:`McEstimate` plus the number of simulated inner paths."""

    inner_paths: int = 0
    n_times: int = 0

    def to_dict(self) -> dict:
        d = super().to_dict()
        d.update(inner_paths=self.inner_paths, n_times=self.n_times)
        return d


def _source(problem):
    poly = problem.nonlinearity
    if problem.mode is Mode.MTM:
        R = problem.recovery
        if poly is None:
            return lambda m: (1.0 - R) * np.maximum(m, 0.0) + R * m
        return mtm_transform(poly, R)
    if poly is None:
        return lambda m: np.maximum(m, 0.0)
    return poly


def _weights(problem, n_times: int):
    T = problem.T
    grid = np.linspace(0.0, T, n_times + 1)
    mids = 0.5 * (grid[:-1] + grid[1:])
    if problem.mode is Mode.MTM:
        lam = problem.intensity
        lead = math.exp(-lam * T)
        w = np.exp(-lam * grid[:-1]) - np.exp(-lam * grid[1:])
    else:
        b = problem.beta
        lead = math.exp(-b * T)
        w = np.full(n_times, b * lead * T / n_times)
    return mids, lead, w


def _inner_mean(spec, payoff, start: np.ndarray, t: float, T: float, n_inner: int,
                g: np.random.Generator) -> np.ndarray:
    """Inner-simulation estimates of ``E[psi(X_T) | X_t = start]`` per row."""
    n, d = start.shape
    out = np.empty(n)
    rows = max(1, INNER_CHUNK // n_inner)
    for lo in range(0, n, rows):
        hi = min(n, lo + rows)
        x = np.repeat(start[lo:hi], n_inner, axis=0)
        xt = advance(spec, t, x, np.full(x.shape[0], T - t), g)
        out[lo:hi] = payoff(xt).reshape(hi - lo, n_inner).mean(axis=1)
    return out


def nested_mc_samples(problem, n_outer: int, n_inner: int, n_times: int, seed: int = 0, *,
                      workers: int = 1) -> tuple[np.ndarray, int]:
    """Per-outer-path estimator values and the number of simulated inner paths.

    With a fixed seed the outer paths and inner means do not depend on
    ``beta``, so runs at different intensities share common random numbers.
    """
    if n_outer < 2 or n_inner < 1 or n_times < 1:
        raise ContractViolation("need n_outer >= 2, n_inner >= 1 and n_times >= 1")
    spec = problem.spec
    payoff = problem.payoff
    F = _source(problem)
    mids, lead, w = _weights(problem, n_times)
    times = np.append(mids, problem.T)
    x0 = np.broadcast_to(np.atleast_1d(np.asarray(problem.x0, dtype=float)), (spec.dim,))

    def block(index: int):
        lo = index * OUTER_BLOCK
        n = min(OUTER_BLOCK, n_outer - lo)
        g = rngmod.stream(seed, rngmod.NESTED, index)
        paths = sample_paths(spec, x0, times, n, g)
        vals = lead * payoff(paths[-1])
        count = 0
        if problem.beta > 0:
            for i, s in enumerate(mids):
                m = _inner_mean(spec, payoff, paths[i], float(s), problem.T, n_inner, g)
                count += m.size * n_inner
                vals = vals + w[i] * F(m)
        return vals, count

    n_blocks = -(-n_outer // OUTER_BLOCK)
    if workers <= 1 or n_blocks == 1:
        parts = [block(i) for i in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(block, range(n_blocks)))
    vals = np.concatenate([p[0] for p in parts])
    inner = sum(p[1] for p in parts)
    logger.debug("nested MC: %d outer, %d inner paths", n_outer, inner)
    return vals, inner


def nested_mc(problem, n_outer: int, n_inner: int, n_times: int, seed: int = 0, *,
              workers: int = 1) -> NestedMcEstimate:
    """Nested Monte-Carlo estimate of ``u(0, x0)``.

    ``problem`` is a :class:`McProblem` or a finite-difference problem with
    the same fields.  Time-weighted problems are treated as nonlinear ones.
    """
    vals, inner = nested_mc_samples(problem, n_outer, n_inner, n_times, seed, workers=workers)
    mean = float(np.mean(vals))
    stderr = float(np.std(vals, ddof=1) / math.sqrt(n_outer))
    return NestedMcEstimate(mean, stderr, n_outer, seed, inner_paths=inner, n_times=n_times)
