"""Credit valuation adjustment on top of the normal-form engines.

A request is stated in market terms (hazard rate, recovery, payoff).  The
pricing pipeline normalizes the payoff to unit sup-norm, maps the request to
a normal-form problem with ``beta = hazard * (1 - R)``, runs the chosen
engine for the risky value and again with ``beta = 0`` for the riskless
value, and scales both back.  The CVA is ``riskless - risky``.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import gwtree
from .analysis import BlowUpReport, blowup_check
from .diffusion import ItoProcessSpec
from .errors import BlowUpRefusal, ContractViolation
from .gwtree import BranchingConfig, Mode
from .nonlinearity import PayoffSpec, Polynomial, ProbabilityVector
from .reference.bsde import bsde_solve
from .reference.fd import FdGrid, PdeProblem, fd_solve
from .reference.nested_mc import McProblem, nested_mc

logger = logging.getLogger(__name__)


class Convention(enum.Enum):
    WITH_PROVISION = "with_provision"
    NO_PROVISION = "no_provision"

    @property
    def mode(self) -> Mode:
        return Mode.NONLINEAR if self is Convention.WITH_PROVISION else Mode.MTM


class Engine(enum.Enum):
    BRANCHING = "branching"
    FD = "fd"
    NESTED_MC = "nested_mc"
    BSDE = "bsde"


@dataclass(frozen=True)
class CvaRequest:
    """Market-level pricing request.

    ``nonlinearity`` approximates ``x+`` on ``[-1, 1]`` for the normalized
    problem; ``None`` selects the exact positive part, which only the
    deterministic and nested engines support.
    """

    hazard: float
    recovery: float
    payoff: PayoffSpec = field(compare=False)
    horizon: float
    convention: Convention = Convention.WITH_PROVISION
    engine: Engine = Engine.BRANCHING
    nonlinearity: Polynomial | None = None
    spec: ItoProcessSpec = field(default_factory=ItoProcessSpec.gbm)
    x0: float = 1.0
    seed: int = 0
    n_samples: int = 1 << 20
    workers: int = 1
    n_space: int = 801
    n_time: int = 400
    n_outer: int = 10_000
    n_inner: int = 100
    n_times: int = 20
    theta: float = 0.5
    n_steps: int = 50
    basis_degree: int = 6
    override_blowup: bool = False
    probs: ProbabilityVector | None = None
    max_particles: int = gwtree.DEFAULT_MAX_PARTICLES
    sampler: str = "batch"

    def __post_init__(self):
        if not self.hazard >= 0 or not math.isfinite(self.hazard):
            raise ContractViolation("hazard must be finite and >= 0")
        if not 0.0 <= self.recovery <= 1.0:
            raise ContractViolation("recovery must lie in [0, 1]")
        if self.horizon < 0:
            raise ContractViolation("horizon must be >= 0")

    @property
    def beta(self) -> float:
        return self.hazard * (1.0 - self.recovery)


@dataclass(frozen=True)
class CvaResult:
    risky_value: float
    riskless_value: float
    cva: float
    engine: Engine
    convention: Convention
    diagnostics: dict[str, Any] = field(default_factory=dict)
    advisory: BlowUpReport | None = None

    def to_dict(self) -> dict:
        return {
            "risky_value": self.risky_value,
            "riskless_value": self.riskless_value,
            "cva": self.cva,
            "engine": self.engine.value,
            "convention": self.convention.value,
            "diagnostics": self.diagnostics,
            "advisory": None if self.advisory is None else self.advisory.to_dict(),
        }


def advisory(request: CvaRequest) -> BlowUpReport | None:
    """Convergence advisory of the branching representation, if it applies."""
    if request.nonlinearity is None:
        return None
    if request.convention is Convention.NO_PROVISION:
        return BlowUpReport(True, math.nan, math.inf, 2)
    return blowup_check(request.nonlinearity, 1.0, request.beta, request.horizon)


def _problem_args(request: CvaRequest, payoff: PayoffSpec, beta: float) -> dict:
    mode = request.convention.mode
    R = 0.0
    if mode is Mode.MTM:
        # full recovery means beta = 0, where the blend is irrelevant
        R = request.recovery if request.recovery < 1.0 else 0.0
    return dict(mode=mode, spec=request.spec, payoff=payoff, beta=beta, T=request.horizon,
                nonlinearity=request.nonlinearity, recovery=R, x0=request.x0)


def _run_pair(request: CvaRequest, payoff: PayoffSpec):
    """Risky and riskless values for the normalized payoff plus diagnostics."""
    eng = request.engine
    beta = request.beta
    if eng is Engine.BRANCHING:
        if request.nonlinearity is None:
            raise ContractViolation("the branching engine needs a polynomial nonlinearity")
        vals = []
        for b in (beta, 0.0):
            a = _problem_args(request, payoff, b)
            cfg = BranchingConfig.optimal(a["beta"], request.horizon, a["mode"],
                                          request.nonlinearity, recovery=a["recovery"],
                                          max_particles=request.max_particles)
            if request.probs is not None:
                cfg = cfg.replace(probs=request.probs)
            vals.append(gwtree.sample_values(cfg, request.spec, payoff, request.n_samples,
                                             request.seed, request.x0, workers=request.workers,
                                             engine=request.sampler))
        risky, riskless = vals
        n = risky.size
        diag = {
            "stderr_risky": float(np.std(risky, ddof=1) / math.sqrt(n)),
            "stderr_riskless": float(np.std(riskless, ddof=1) / math.sqrt(n)),
            "stderr_cva": float(np.std(riskless - risky, ddof=1) / math.sqrt(n)),
            "n_samples": n,
            "seed": request.seed,
        }
        return float(np.mean(risky)), float(np.mean(riskless)), diag
    if eng is Engine.FD:
        if request.spec.dim != 1:
            raise ContractViolation("the finite-difference engine is 1-D only")
        out = []
        diag: dict[str, Any] = {"n_space": request.n_space, "n_time": request.n_time}
        for b, tag in ((beta, "risky"), (0.0, "riskless")):
            p = PdeProblem(**_problem_args(request, payoff, b))
            sol = fd_solve(p, FdGrid.for_problem(p, request.n_space, request.n_time))
            diag[f"diverged_{tag}"] = sol.diverged
            out.append(sol.value)
        return out[0], out[1], diag
    if eng is Engine.NESTED_MC:
        ests = [nested_mc(McProblem(**_problem_args(request, payoff, b)), request.n_outer,
                          request.n_inner, request.n_times, request.seed, workers=request.workers)
                for b in (beta, 0.0)]
        diag = {"stderr_risky": ests[0].stderr, "stderr_riskless": ests[1].stderr,
                "inner_paths": ests[0].inner_paths, "seed": request.seed}
        return ests[0].mean, ests[1].mean, diag
    if eng is Engine.BSDE:
        if request.spec.dim != 1:
            raise ContractViolation("the BSDE engine is 1-D only")
        res = [bsde_solve(McProblem(**_problem_args(request, payoff, b)), request.theta,
                          request.n_steps, request.basis_degree, request.n_samples, request.seed)
               for b in (beta, 0.0)]
        diag = {"stderr_risky": res[0].stderr, "stderr_riskless": res[1].stderr,
                "y0": res[0].y0, "seed": request.seed}
        return res[0].value, res[1].value, diag
    raise ContractViolation(f"unknown engine {eng!r}")


_SCALED_KEYS = ("stderr_risky", "stderr_riskless", "stderr_cva")


def price(request: CvaRequest) -> CvaResult:
    """Risky value, riskless value and CVA of ``request``.

    A failing convergence advisory raises :class:`BlowUpRefusal` unless
    ``override_blowup`` is set; the advisory is attached to the result.
    """
    report = advisory(request)
    if report is not None and not report.converges and request.engine is Engine.BRANCHING \
            and not request.override_blowup:
        raise BlowUpRefusal(
            f"convergence advisory failed: T={request.horizon} >= T_max={report.T_max:.6g}",
            report)
    scale = request.payoff.sup_norm
    if not scale > 0:
        raise ContractViolation("payoff sup-norm must be positive")
    payoff = request.payoff.normalized()
    risky, riskless, diag = _run_pair(request, payoff)
    for k in _SCALED_KEYS:
        if k in diag:
            diag[k] *= scale
    risky *= scale
    riskless *= scale
    logger.info("%s/%s: risky=%.6g riskless=%.6g", request.engine.value,
                request.convention.value, risky, riskless)
    return CvaResult(risky, riskless, riskless - risky, request.engine, request.convention,
                     diag, report)
