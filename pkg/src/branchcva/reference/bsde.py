"""Regression-based theta scheme for the backward SDE of the normal forms.

With ``Y_t = exp(kappa (T - t)) u(t, X_t)`` the nonlinear form becomes

    dY = -kappa f(t, Y) dt + Z dW,    f(t, y) = exp(kappa (T-t)) F(exp(-kappa (T-t)) y),

which is stepped backwards as

    Y_{i-1} = E_{i-1} + kappa dt (theta f(t_{i-1}, Y_{i-1}) + (1 - theta) f(t_{i-1}, E_{i-1}))

where ``E_{i-1}`` is the regression estimate of ``E[Y_i | X_{i-1}]``.  For
the exact positive part the implicit equation has the closed-form solution
``E (1 + (1-theta) kappa dt) / (1 - theta kappa dt)`` on ``E > 0`` and ``E``
otherwise; polynomial drivers use a fixed-point iteration.  In mtm mode the
linear layer ``M`` is regressed alongside and ``Y`` picks up the explicit
source ``kappa exp(kappa (T-t)) G(M)``.

GBM paths are generated backwards with a Brownian bridge, so only one time
slice is held in memory.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .. import rng as rngmod
from ..diffusion import ItoProcessSpec, sample_paths
from ..errors import ContractViolation, SolverError
from ..gwtree import Mode
from ..nonlinearity import mtm_transform

logger = logging.getLogger(__name__)

FIXED_POINT_TOL = 1e-12
FIXED_POINT_MAX_ITER = 100


@dataclass(frozen=True)
class BsdeResult:
    value: float
    y0: float
    stderr: float
    n_paths: int
    n_steps: int
    seed: int

    def to_dict(self) -> dict:
        return {"value": self.value, "y0": self.y0, "stderr": self.stderr,
                "n_paths": self.n_paths, "n_steps": self.n_steps, "seed": self.seed}


class _BridgeGbm:
    """Backward generation of 1-D GBM slices through a Brownian bridge."""

    def __init__(self, spec: ItoProcessSpec, x0: float, times: np.ndarray, n: int,
                 g: np.random.Generator):
        self.sig, self.mu = spec.sigma[0], spec.mu[0]
        self.x0, self.times, self.g = x0, times, g
        self.w = math.sqrt(times[-1]) * g.standard_normal(n)

    def x(self, i: int) -> np.ndarray:
        t = self.times[i]
        return self.x0 * np.exp((self.mu - 0.5 * self.sig**2) * t + self.sig * self.w)

    def step_back(self, i: int) -> None:
        """Move the stored Brownian values from ``times[i]`` to ``times[i-1]``."""
        t, s = self.times[i], self.times[i - 1]
        if s == 0.0:
            self.w = np.zeros_like(self.w)
            return
        mean = (s / t) * self.w
        sd = math.sqrt(s * (t - s) / t)
        self.w = mean + sd * self.g.standard_normal(self.w.size)


class _StoredPaths:
    def __init__(self, spec, x0, times, n, g):
        self.paths = sample_paths(spec, x0, times[1:], n, g)[:, :, 0]
        self.x0 = x0

    def x(self, i: int) -> np.ndarray:
        if i == 0:
            return np.full(self.paths.shape[1], self.x0)
        return self.paths[i - 1]

    def step_back(self, i: int) -> None:
        pass


def _design(x: np.ndarray, degree: int, log_coords: bool) -> np.ndarray:
    z = np.log(x) if log_coords else x
    sd = float(np.std(z))
    z = (z - float(np.mean(z))) / (sd if sd > 0 else 1.0)
    return np.vander(z, degree + 1, increasing=True)


def _regress(x: np.ndarray, ys: list[np.ndarray], degree: int, log_coords: bool) -> list[np.ndarray]:
    A = _design(x, degree, log_coords)
    coef, _, rank, _ = np.linalg.lstsq(A, np.stack(ys, axis=1), rcond=None)
    if rank < degree + 1:
        raise SolverError(f"rank-deficient regression (rank {rank} < {degree + 1})")
    fitted = A @ coef
    return [fitted[:, j] for j in range(len(ys))]


def bsde_solve(problem, theta: float = 0.5, n_steps: int = 50, basis_degree: int = 6,
               n_paths: int = 100_000, seed: int = 0) -> BsdeResult:
    """Backward induction for ``u(0, x0)`` of a 1-D nonlinear or mtm problem."""
    if problem.spec.dim != 1:
        raise ContractViolation("the BSDE scheme is 1-D only")
    if not 0.0 <= theta <= 1.0:
        raise ContractViolation("theta must lie in [0, 1]")
    if n_steps < 1 or basis_degree < 0 or n_paths < basis_degree + 2:
        raise ContractViolation("invalid step count, basis degree or path count")
    T = problem.T
    kappa = problem.intensity
    dt = T / n_steps
    if theta * kappa * dt >= 1.0:
        raise ContractViolation(f"theta*beta*dt = {theta * kappa * dt:.4g} must be < 1")
    mode = problem.mode
    poly = problem.nonlinearity
    x0 = float(np.atleast_1d(problem.x0)[0])
    times = np.linspace(0.0, T, n_steps + 1)

    g = rngmod.stream(seed, rngmod.BSDE)
    gbm = problem.spec.is_gbm
    paths = (_BridgeGbm(problem.spec, x0, times, n_paths, g) if gbm
             else _StoredPaths(problem.spec, x0, times, n_paths, g))

    if mode is Mode.MTM:
        R = problem.recovery
        G = (lambda m: (1.0 - R) * np.maximum(m, 0.0) + R * m) if poly is None \
            else mtm_transform(poly, R)
    else:
        F = (lambda v: np.maximum(v, 0.0)) if poly is None else poly

    def implicit(E: np.ndarray, t: float, lo: float, hi: float) -> np.ndarray:
        """Solve the theta step; the driver sees ``E`` clipped to the payoff range.

        Least-squares fits overshoot near payoff jumps.  Clipping only the
        driver argument keeps polynomial drivers bounded while the fitted
        values themselves stay mean-preserving.
        """
        a = kappa * dt
        disc = math.exp(kappa * (T - t))
        Ec = np.clip(E, disc * lo, disc * hi)
        if poly is None:
            return E + np.where(Ec > 0, Ec * a / (1 - theta * a), 0.0)
        f = lambda y: disc * F(y / disc)  # noqa: E731
        base = Ec + a * (1 - theta) * f(Ec)
        y = Ec.copy()
        for _ in range(FIXED_POINT_MAX_ITER):
            nxt = base + a * theta * f(y)
            if not np.all(np.isfinite(nxt)):
                raise SolverError("BSDE fixed point escaped")
            if np.max(np.abs(nxt - y)) <= FIXED_POINT_TOL * max(1.0, float(np.max(np.abs(nxt)))):
                return E + (nxt - Ec)
            y = nxt
        raise SolverError("BSDE fixed point did not converge")

    x = paths.x(n_steps)
    psi = problem.payoff(x[:, None])
    Y = psi.copy()
    M = psi.copy() if mode is Mode.MTM else None
    # pathwise accumulation of the driver increments; its spread gives the stderr
    pathwise = psi.copy()
    lo, hi = float(psi.min()), float(psi.max())
    for i in range(n_steps, 0, -1):
        paths.step_back(i)
        t = times[i - 1]
        if i - 1 == 0:
            E = np.full(n_paths, float(np.mean(Y)))
            EM = np.full(n_paths, float(np.mean(M))) if M is not None else None
        else:
            x = paths.x(i - 1)
            if M is None:
                (E,) = _regress(x, [Y], basis_degree, gbm)
            else:
                E, EM = _regress(x, [Y, M], basis_degree, gbm)
        if mode is Mode.MTM:
            M = EM
            Y_new = E + kappa * dt * math.exp(kappa * (T - t)) * G(M)
        else:
            Y_new = implicit(E, t, lo, hi)
        pathwise += Y_new - E
        Y = Y_new
    y0 = float(Y[0])
    value = math.exp(-kappa * T) * y0
    # regression error is not included; this is the statistical floor
    stderr = math.exp(-kappa * T) * float(np.std(pathwise, ddof=1)) / math.sqrt(n_paths)
    logger.debug("bsde: Y0=%.6g u0=%.6g", y0, value)
    return BsdeResult(value, y0, stderr, n_paths, n_steps, seed)

