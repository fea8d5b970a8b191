"""Marked Galton-Watson trees over a diffusion.

Each particle lives an exponential lifetime.  If the lifetime outlasts the
horizon the particle is evaluated at ``T``; otherwise it branches into
``k`` children with probability ``p_k`` and the sample weight picks up the
factor ``a_k / p_k``.  A sample's signed value is the product of the
branch factors and of ``psi`` over the surviving particles.

Two engines produce identically distributed samples:

* :func:`simulate_sample` walks one tree depth-first with an explicit
  stack and returns the full :class:`TreeSample`.
* :func:`simulate_batch` advances whole generations of many trees at once
  with numpy and only keeps per-sample aggregates.

:func:`estimate` splits ``n`` samples into fixed blocks, each with its own
seed-keyed stream, so results do not depend on the worker count.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .diffusion import ItoProcessSpec, advance
from .errors import BlowUpRefusal, ContractViolation, ExplosionError
from .nonlinearity import (Polynomial, PayoffSpec, ProbabilityVector, mtm_transform,
                           optimal_probabilities)

logger = logging.getLogger(__name__)

DEFAULT_MAX_PARTICLES = 1_000_000
BLOCK_SIZE = 1 << 15


class Mode(enum.Enum):
    NONLINEAR = "nonlinear"
    MTM = "mtm"
    TIMEWEIGHTED = "timeweighted"


@dataclass(frozen=True)
class BranchingConfig:
    """Branching mechanism for one estimator run.

    ``weights`` are the coefficients ``a_k`` of the polynomial nonlinearity.
    In mtm mode the branch factors use the recovery-blended coefficients from
    :func:`mtm_transform` and the default intensity is ``intensity / (1-R)``;
    ``probs`` must then be paired with the blended coefficients.  In
    time-weighted mode ``weights`` must be ``u + a2 u**2`` and ``probs`` puts
    all mass on binary branching.
    """

    intensity: float
    horizon: float
    mode: Mode
    weights: Polynomial
    probs: ProbabilityVector
    recovery: float = 0.0
    max_particles: int = DEFAULT_MAX_PARTICLES

    def __post_init__(self):
        if self.intensity < 0 or not math.isfinite(self.intensity):
            raise ContractViolation("intensity must be finite and >= 0")
        if self.horizon < 0:
            raise ContractViolation("horizon must be >= 0")
        if not 0.0 <= self.recovery <= 1.0:
            raise ContractViolation("recovery must lie in [0, 1]")
        if self.mode is Mode.MTM and self.recovery >= 1.0:
            raise ContractViolation("mtm mode needs recovery < 1")
        if self.max_particles < 1:
            raise ContractViolation("max_particles must be positive")
        self.probs.check_paired(self.branch_polynomial)

    @classmethod
    def optimal(cls, intensity: float, horizon: float, mode: Mode, weights: Polynomial, *,
                recovery: float = 0.0, sup_norm: float = 1.0,
                max_particles: int = DEFAULT_MAX_PARTICLES) -> "BranchingConfig":
        """Config with variance-optimal probabilities for the sampled coefficients."""
        if mode is Mode.TIMEWEIGHTED:
            probs = ProbabilityVector((0.0, 0.0, 1.0))
        else:
            target = mtm_transform(weights, recovery) if mode is Mode.MTM else weights
            probs = optimal_probabilities(target, sup_norm)
        return cls(intensity, horizon, mode, weights, probs, recovery, max_particles)

    @property
    def effective_intensity(self) -> float:
        if self.mode is Mode.MTM:
            return self.intensity / (1.0 - self.recovery)
        return self.intensity

    @property
    def branch_polynomial(self) -> Polynomial:
        """Coefficients that the branch factors are built from."""
        if self.mode is Mode.MTM:
            return mtm_transform(self.weights, self.recovery)
        if self.mode is Mode.TIMEWEIGHTED:
            c = list(self.weights.coeffs) + [0.0] * 3
            if c[0] != 0.0 or c[1] != 1.0 or c[2] == 0.0 or any(c[3:]):
                raise ContractViolation("time-weighted mode requires F(u) = u + a2*u^2")
            return Polynomial((0.0, 0.0, c[2]))
        return self.weights

    @property
    def order(self) -> int:
        return max(len(self.probs), len(self.branch_polynomial.coeffs)) - 1

    def factors(self) -> np.ndarray:
        """``a_k / p_k`` per branch type (zero where ``p_k = 0``)."""
        m = self.order + 1
        a = np.zeros(m)
        p = np.zeros(m)
        b = self.branch_polynomial.coeffs
        a[:len(b)] = b
        p[:len(self.probs)] = self.probs.probs
        out = np.zeros(m)
        nz = p > 0
        out[nz] = a[nz] / p[nz]
        return out

    def cumulative(self) -> np.ndarray:
        p = np.zeros(self.order + 1)
        p[:len(self.probs)] = self.probs.probs
        cum = np.cumsum(p)
        last = int(np.flatnonzero(p)[-1])
        cum[last:] = 1.0
        return cum

    def replace(self, **kw) -> "BranchingConfig":
        d = dict(intensity=self.intensity, horizon=self.horizon, mode=self.mode,
                 weights=self.weights, probs=self.probs, recovery=self.recovery,
                 max_particles=self.max_particles)
        d.update(kw)
        return BranchingConfig(**d)


@dataclass
class TreeSample:
    terminal_positions: np.ndarray
    branch_counts: tuple[int, ...]
    branch_times: tuple[float, ...]
    signed_value: float

    @property
    def n_terminal(self) -> int:
        return int(self.terminal_positions.shape[0])


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n_samples: int
    seed: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n_samples": self.n_samples,
                "seed": self.seed}


def _start(x0, dim: int) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    return np.broadcast_to(x, (dim,)).astype(float)


def _branch_factor(cfg: BranchingConfig, factors: np.ndarray, k, t_branch):
    if cfg.mode is Mode.TIMEWEIGHTED:
        return factors[k] * np.exp(cfg.intensity * (cfg.horizon - t_branch))
    return factors[k]


def simulate_sample(cfg: BranchingConfig, spec: ItoProcessSpec, payoff: PayoffSpec,
                    rng: np.random.Generator, x0=1.0) -> TreeSample:
    """One tree, depth-first; dispatches on ``cfg.mode``."""
    T = cfg.horizon
    rate = cfg.effective_intensity
    factors = cfg.factors()
    cum = cfg.cumulative()
    omega = [0] * (cfg.order + 1)
    times: list[float] = []
    terminals: list[np.ndarray] = []
    weight = 1.0
    stack = [(0.0, _start(x0, spec.dim), 0)]
    while stack:
        t, x, gen = stack.pop()
        immortal = cfg.mode is Mode.MTM and gen >= 1
        if rate == 0.0 or immortal:
            life = math.inf
        else:
            life = -math.log1p(-rng.random()) / rate
        if t + life >= T:
            terminals.append(advance(spec, t, x[None, :], np.array([T - t]), rng)[0])
        else:
            tb = t + life
            xb = advance(spec, t, x[None, :], np.array([life]), rng)[0]
            k = int(np.searchsorted(cum, rng.random(), side="right"))
            omega[k] += 1
            times.append(tb)
            weight *= float(_branch_factor(cfg, factors, k, tb))
            stack.extend((tb, xb, gen + 1) for _ in range(k))
        if len(stack) + len(terminals) > cfg.max_particles:
            raise ExplosionError(
                f"tree population exceeded {cfg.max_particles} particles",
                population=len(stack) + len(terminals))
    pos = np.array(terminals).reshape(len(terminals), spec.dim)
    value = weight * float(np.prod(payoff(pos))) if len(terminals) else weight
    return TreeSample(pos, tuple(omega), tuple(times), value)


def _require(cfg: BranchingConfig, mode: Mode):
    if cfg.mode is not mode:
        raise ContractViolation(f"config mode is {cfg.mode.value}, expected {mode.value}")


def simulate_sample_nonlinear(cfg, spec, payoff, rng, x0=1.0) -> TreeSample:
    _require(cfg, Mode.NONLINEAR)
    return simulate_sample(cfg, spec, payoff, rng, x0)


def simulate_sample_mtm(cfg, spec, payoff, rng, x0=1.0) -> TreeSample:
    _require(cfg, Mode.MTM)
    return simulate_sample(cfg, spec, payoff, rng, x0)


def simulate_sample_timeweighted(cfg, spec, payoff, rng, x0=1.0) -> TreeSample:
    """Sample of the rescaled representation; multiply by ``exp(beta*T)`` for ``u``."""
    _require(cfg, Mode.TIMEWEIGHTED)
    return simulate_sample(cfg, spec, payoff, rng, x0)


@dataclass
class BatchResult:
    values: np.ndarray
    n_terminal: np.ndarray
    omega: np.ndarray = field(repr=False)


def simulate_batch(cfg: BranchingConfig, spec: ItoProcessSpec, payoff: PayoffSpec, n: int,
                   rng: np.random.Generator, x0=1.0, offset: int = 0) -> BatchResult:
    """``n`` independent trees advanced generation by generation.

    ``offset`` is only used to report global sample indices in errors.
    """
    T = cfg.horizon
    rate = cfg.effective_intensity
    factors = cfg.factors()
    cum = cfg.cumulative()
    m = cfg.order + 1
    values = np.ones(n)
    n_term = np.zeros(n, dtype=np.int64)
    omega = np.zeros((n, m), dtype=np.int64)

    owner = np.arange(n)
    t = np.zeros(n)
    x = np.broadcast_to(_start(x0, spec.dim), (n, spec.dim)).copy()
    gen = 0
    while owner.size:
        size = owner.size
        if rate == 0.0 or (cfg.mode is Mode.MTM and gen >= 1):
            life = np.full(size, np.inf)
        else:
            life = -np.log1p(-rng.random(size)) / rate
        done = t + life >= T
        if done.any():
            i = np.flatnonzero(done)
            xt = advance(spec, t[i], x[i], T - t[i], rng)
            np.multiply.at(values, owner[i], payoff(xt))
            np.add.at(n_term, owner[i], 1)
        live = ~done
        if not live.any():
            break
        i = np.flatnonzero(live)
        o, tb = owner[i], t[i] + life[i]
        xb = advance(spec, t[i], x[i], life[i], rng)
        k = np.searchsorted(cum, rng.random(i.size), side="right")
        np.add.at(omega, (o, k), 1)
        np.multiply.at(values, o, _branch_factor(cfg, factors, k, tb))
        owner = np.repeat(o, k)
        t = np.repeat(tb, k)
        x = np.repeat(xb, k, axis=0)
        gen += 1
        if owner.size:
            pop = n_term + np.bincount(owner, minlength=n)
            worst = int(np.argmax(pop))
            if pop[worst] > cfg.max_particles:
                raise ExplosionError(
                    f"sample {offset + worst}: population {int(pop[worst])} exceeded "
                    f"cap {cfg.max_particles}", sample_index=offset + worst,
                    population=int(pop[worst]))
    return BatchResult(values, n_term, omega)


def _summarize(values: np.ndarray, seed: int, scale: float = 1.0) -> McEstimate:
    n = values.size
    if np.all(values == values[0]):
        return McEstimate(float(values[0]) * scale, 0.0, n, seed)
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1))
    return McEstimate(mean * scale, std / math.sqrt(n) * scale, n, seed)


def blowup_guard(cfg: BranchingConfig, payoff: PayoffSpec):
    """Convergence advisory for ``cfg``; mtm trees are always finite."""
    from .analysis import BlowUpReport, blowup_check

    if cfg.mode is Mode.MTM:
        return BlowUpReport(True, math.nan, math.inf, 2)
    return blowup_check(cfg.weights, payoff.sup_norm, cfg.intensity, cfg.horizon)


def sample_values(cfg: BranchingConfig, spec: ItoProcessSpec, payoff: PayoffSpec, n: int,
                  seed: int, x0=1.0, *, workers: int = 1, engine: str = "batch",
                  block_size: int = BLOCK_SIZE) -> np.ndarray:
    """Per-sample signed values in sample order (before any outer factor)."""
    if engine == "tree":
        def tree_block(lo, hi):
            return np.array([simulate_sample(cfg, spec, payoff, rngmod.stream(seed, rngmod.TREE, i),
                                             x0).signed_value for i in range(lo, hi)])
        job = tree_block
    elif engine == "batch":
        def batch_block(lo, hi):
            g = rngmod.stream(seed, rngmod.BATCH, lo // block_size)
            return simulate_batch(cfg, spec, payoff, hi - lo, g, x0, offset=lo).values
        job = batch_block
    else:
        raise ContractViolation(f"unknown engine {engine!r}")
    bounds = [(lo, min(lo + block_size, n)) for lo in range(0, n, block_size)]
    if workers <= 1 or len(bounds) == 1:
        parts = [job(lo, hi) for lo, hi in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda b: job(*b), bounds))
    return np.concatenate(parts)


def estimate(cfg: BranchingConfig, spec: ItoProcessSpec, payoff: PayoffSpec, n: int,
             seed: int = 0, x0=1.0, *, workers: int = 1, engine: str = "batch",
             block_size: int = BLOCK_SIZE, override_blowup: bool = True) -> McEstimate:
    """Monte-Carlo mean and standard error over ``n`` trees.

    With ``override_blowup=False`` the convergence advisory is checked first
    and a failing advisory raises :class:`BlowUpRefusal`.  In time-weighted
    mode the outer factor ``exp(beta*T)`` is applied here.
    """
    if n < 2:
        raise ContractViolation("need at least two samples")
    if not override_blowup:
        report = blowup_guard(cfg, payoff)
        if not report.converges:
            raise BlowUpRefusal(
                f"convergence advisory failed: T={cfg.horizon} >= T_max={report.T_max:.6g}",
                report)
    vals = sample_values(cfg, spec, payoff, n, seed, x0, workers=workers, engine=engine,
                         block_size=block_size)
    scale = math.exp(cfg.intensity * cfg.horizon) if cfg.mode is Mode.TIMEWEIGHTED else 1.0
    return _summarize(vals, seed, scale)
