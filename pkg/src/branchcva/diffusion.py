"""Sampling of the underlying Ito diffusion.

Geometric Brownian motion is advanced with exact lognormal transitions.
General diffusions with diagonal noise use Euler substeps at a configured
density (steps per year).  Positions are stored as ``(n, d)`` arrays in
the batch helpers and as ``(d,)`` arrays in :class:`StatePoint`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, EvaluationError

CoefficientField = Callable[[float | np.ndarray, np.ndarray], np.ndarray]


class ProcessKind(enum.Enum):
    GBM = "gbm"
    GENERAL = "general"


@dataclass(frozen=True)
class ItoProcessSpec:
    """Immutable description of the diffusion generator.

    For GBM, ``sigma`` and ``mu`` hold one entry per dimension (per sqrt-year
    and per year).  For general processes ``drift(t, x)`` and ``vol(t, x)``
    map an ``(n, d)`` position array to ``(n, d)`` coefficients.
    """

    kind: ProcessKind
    dim: int = 1
    sigma: tuple[float, ...] = ()
    mu: tuple[float, ...] = ()
    drift: CoefficientField | None = field(default=None, compare=False)
    vol: CoefficientField | None = field(default=None, compare=False)
    substeps_per_year: float = 50.0

    def __post_init__(self):
        if self.dim < 1:
            raise ContractViolation("dimension must be >= 1")
        if self.kind is ProcessKind.GBM:
            if len(self.sigma) != self.dim or len(self.mu) != self.dim:
                raise ContractViolation("GBM sigma/mu must have one entry per dimension")
            if any(s < 0 or not math.isfinite(s) for s in self.sigma):
                raise ContractViolation("GBM volatility must be finite and >= 0")
            if any(not math.isfinite(m) for m in self.mu):
                raise ContractViolation("GBM drift must be finite")
        else:
            if self.drift is None or self.vol is None:
                raise ContractViolation("general process needs drift and vol fields")
            if not self.substeps_per_year > 0:
                raise ContractViolation("substeps_per_year must be positive")

    @classmethod
    def gbm(cls, sigma: float | Sequence[float] = 0.2, mu: float | Sequence[float] = 0.0,
            dim: int | None = None) -> "ItoProcessSpec":
        sig = np.atleast_1d(np.asarray(sigma, dtype=float))
        drf = np.atleast_1d(np.asarray(mu, dtype=float))
        d = dim or max(sig.size, drf.size)
        sig = np.broadcast_to(sig, (d,))
        drf = np.broadcast_to(drf, (d,))
        return cls(ProcessKind.GBM, d, tuple(map(float, sig)), tuple(map(float, drf)))

    @classmethod
    def general(cls, drift: CoefficientField, vol: CoefficientField, dim: int = 1,
                substeps_per_year: float = 50.0) -> "ItoProcessSpec":
        return cls(ProcessKind.GENERAL, dim, drift=drift, vol=vol,
                   substeps_per_year=substeps_per_year)

    @property
    def is_gbm(self) -> bool:
        return self.kind is ProcessKind.GBM


@dataclass(frozen=True)
class StatePoint:
    t: float
    x: np.ndarray = field(compare=False)

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if not np.all(np.isfinite(x)):
            raise ContractViolation("state position must be finite")
        object.__setattr__(self, "x", x)
        if self.t < 0:
            raise ContractViolation("state time must be >= 0")


def advance(spec: ItoProcessSpec, t: float | np.ndarray, x: np.ndarray, dt: np.ndarray,
            rng: np.random.Generator) -> np.ndarray:
    """Advance a batch of positions ``x`` (shape ``(n, d)``) by ``dt`` (shape ``(n,)``).

    ``t`` is the start time of each row (scalar or ``(n,)``).  Returns a new
    array; the input is not modified.
    """
    x = np.asarray(x, dtype=float)
    dt = np.asarray(dt, dtype=float)
    n = x.shape[0]
    if n == 0:
        return x.copy()
    if np.any(dt < 0):
        raise ContractViolation("cannot advance backwards in time")
    if spec.is_gbm:
        sig = np.asarray(spec.sigma)
        mu = np.asarray(spec.mu)
        z = rng.standard_normal((n, spec.dim))
        dtc = dt[:, None]
        return x * np.exp((mu - 0.5 * sig * sig) * dtc + sig * np.sqrt(dtc) * z)
    return _euler(spec, np.broadcast_to(np.asarray(t, dtype=float), (n,)), x, dt, rng)


def _euler(spec: ItoProcessSpec, t: np.ndarray, x: np.ndarray, dt: np.ndarray,
           rng: np.random.Generator) -> np.ndarray:
    steps = np.maximum(1, np.ceil(dt * spec.substeps_per_year - 1e-12)).astype(np.int64)
    h = dt / steps
    sqh = np.sqrt(h)[:, None]
    cur = x.copy()
    tt = t.copy()
    for j in range(int(steps.max())):
        live = steps > j
        if not live.all():
            idx = np.flatnonzero(live)
            xs, ts = cur[idx], tt[idx]
        else:
            idx = None
            xs, ts = cur, tt
        hs = h if idx is None else h[idx]
        b = np.asarray(spec.drift(ts, xs), dtype=float)
        s = np.asarray(spec.vol(ts, xs), dtype=float)
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(s))):
            raise EvaluationError("non-finite drift/volatility evaluation")
        z = rng.standard_normal(xs.shape)
        step = b * hs[:, None] + s * (sqh if idx is None else sqh[idx]) * z
        if idx is None:
            cur += step
            tt += h
        else:
            cur[idx] += step
            tt[idx] += hs
    return cur


def sample_transition(spec: ItoProcessSpec, start: StatePoint, to_time: float,
                      rng: np.random.Generator) -> StatePoint:
    if to_time < start.t:
        raise ContractViolation(f"to_time {to_time} precedes start time {start.t}")
    dt = to_time - start.t
    if dt == 0:
        return start
    x = advance(spec, start.t, start.x[None, :], np.array([dt]), rng)[0]
    return StatePoint(to_time, x)


def sample_path_at(spec: ItoProcessSpec, start: StatePoint, times: Sequence[float],
                   rng: np.random.Generator) -> list[StatePoint]:
    times = list(times)
    if any(b < a for a, b in zip(times, times[1:])):
        raise ContractViolation("times must be ascending")
    if times and times[0] < start.t:
        raise ContractViolation("first time precedes the start point")
    out = []
    cur = start
    for t in times:
        cur = sample_transition(spec, cur, t, rng)
        out.append(cur)
    return out


def sample_paths(spec: ItoProcessSpec, x0: np.ndarray | float, times: np.ndarray, n: int,
                 rng: np.random.Generator, t0: float = 0.0) -> np.ndarray:
    """Batch version of :func:`sample_path_at`: returns ``(len(times), n, d)``."""
    x = np.broadcast_to(np.atleast_1d(np.asarray(x0, dtype=float)), (n, spec.dim)).copy()
    times = np.asarray(times, dtype=float)
    out = np.empty((times.size, n, spec.dim))
    prev = t0
    for i, t in enumerate(times):
        if t < prev:
            raise ContractViolation("times must be ascending")
        x = advance(spec, prev, x, np.full(n, t - prev), rng)
        out[i] = x
        prev = t
    return out
