"""Polynomial nonlinearities, payoffs and branching probabilities.

A :class:`Polynomial` stores ``a_0 .. a_M`` for ``F(u) = sum a_k u**k``.
The positive part ``x+`` is approximated on ``[-1, 1]`` by discrete least
squares over Chebyshev nodes restricted to a chosen set of monomials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, FitError

_PROB_TOL = 1e-12


@dataclass(frozen=True)
class Polynomial:
    coeffs: tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(a) for a in self.coeffs)
        if not c:
            raise ContractViolation("polynomial needs at least one coefficient")
        if not all(math.isfinite(a) for a in c):
            raise ContractViolation("polynomial coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]]) -> "Polynomial":
        """Build from ``(degree, coefficient)`` pairs, the config-file format."""
        pairs = list(pairs)
        if not pairs:
            raise ContractViolation("empty coefficient list")
        degs = [int(d) for d, _ in pairs]
        if min(degs) < 0:
            raise ContractViolation("degrees must be non-negative")
        if len(set(degs)) != len(degs):
            raise ContractViolation("duplicate degree in coefficient list")
        c = [0.0] * (max(degs) + 1)
        for d, a in pairs:
            c[int(d)] = float(a)
        return cls(tuple(c))

    def to_pairs(self) -> list[tuple[int, float]]:
        return [(k, a) for k, a in enumerate(self.coeffs) if a != 0.0]

    @property
    def order(self) -> int:
        return len(self.coeffs) - 1

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(k for k, a in enumerate(self.coeffs) if a != 0.0)

    def __call__(self, u):
        # Horner
        u = np.asarray(u, dtype=float)
        acc = np.zeros_like(u)
        for a in reversed(self.coeffs):
            acc = acc * u + a
        return acc if acc.ndim else float(acc)

    def abs(self) -> "Polynomial":
        return Polynomial(tuple(abs(a) for a in self.coeffs))

    def shift(self, eps: float) -> "Polynomial":
        c = list(self.coeffs)
        c[0] += eps
        return Polynomial(tuple(c))

    def scaled_argument(self, s: float) -> "Polynomial":
        """Coefficients of ``u -> F(s u)``."""
        return Polynomial(tuple(a * s**k for k, a in enumerate(self.coeffs)))


def evaluate(poly: Polynomial, u: float) -> float:
    return poly(u)


# Named presets.  CHOICEU reproduces the CVA experiments; the absolute variant
# is the comparison polynomial used for the bound identity.
CHOICEU = Polynomial((0.0589, 0.5, 0.8164, 0.0, -0.4043))
CHOICEU_ABS = CHOICEU.abs()
EXPERIMENT1 = Polynomial((0.0, 0.0, -0.5, 0.5))
EXPERIMENT2 = Polynomial((0.0, 0.0, -1 / 3, 1 / 3, -1 / 3))
BLOWUP = Polynomial((0.0, 1.0, 1.0))
IDENTITY = Polynomial((0.0, 1.0))

PRESETS: dict[str, Polynomial] = {
    "choiceu": CHOICEU,
    "choiceu_abs": CHOICEU_ABS,
    "experiment1": EXPERIMENT1,
    "experiment2": EXPERIMENT2,
    "blowup": BLOWUP,
    "identity": IDENTITY,
}


@dataclass(frozen=True)
class ProbabilityVector:
    probs: tuple[float, ...]

    def __post_init__(self):
        p = tuple(float(x) for x in self.probs)
        if not p:
            raise ContractViolation("empty probability vector")
        if any(not (0.0 <= x <= 1.0) for x in p):
            raise ContractViolation("probabilities must lie in [0, 1]")
        if abs(math.fsum(p) - 1.0) > _PROB_TOL:
            raise ContractViolation(f"probabilities sum to {math.fsum(p)!r}, not 1")
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return len(self.probs)

    def __getitem__(self, k):
        return self.probs[k]

    @property
    def mean_offspring(self) -> float:
        return math.fsum(k * p for k, p in enumerate(self.probs))

    def check_paired(self, poly: Polynomial) -> None:
        """Probabilities must vanish exactly where the weights do."""
        n = max(len(self.probs), len(poly.coeffs))
        p = list(self.probs) + [0.0] * (n - len(self.probs))
        a = list(poly.coeffs) + [0.0] * (n - len(poly.coeffs))
        for k in range(n):
            if (a[k] == 0.0) != (p[k] == 0.0):
                raise ContractViolation(
                    f"branch type {k}: coefficient {a[k]} paired with probability {p[k]}")

    @classmethod
    def uniform_on(cls, poly: Polynomial) -> "ProbabilityVector":
        sup = poly.support
        if not sup:
            raise ContractViolation("zero polynomial has no support")
        p = [0.0] * len(poly.coeffs)
        for k in sup:
            p[k] = 1.0 / len(sup)
        return cls(tuple(_renormalize(p)))


def _renormalize(p: Sequence[float]) -> list[float]:
    s = math.fsum(p)
    out = [x / s for x in p]
    # push the rounding residue onto the largest entry so fsum is exactly 1
    j = max(range(len(out)), key=out.__getitem__)
    out[j] += 1.0 - math.fsum(out)
    return out


def optimal_probabilities(poly: Polynomial, sup_norm: float = 1.0) -> ProbabilityVector:
    """``p_k`` proportional to ``|a_k| * sup_norm**k``."""
    if not sup_norm > 0:
        raise ContractViolation("sup_norm must be positive")
    w = [abs(a) * sup_norm**k for k, a in enumerate(poly.coeffs)]
    if not any(w):
        raise ContractViolation("optimal probabilities undefined for the zero polynomial")
    return ProbabilityVector(tuple(_renormalize(w)))


def mtm_transform(poly: Polynomial, recovery: float) -> Polynomial:
    """Coefficients ``b`` with ``G(x) = sum b_k x**k`` approximating ``(1-R) x+ + R x``."""
    if not 0.0 <= recovery <= 1.0:
        raise ContractViolation("recovery must lie in [0, 1]")
    c = list(poly.coeffs) + [0.0] * max(0, 2 - len(poly.coeffs))
    b = [(1.0 - recovery) * a for a in c]
    b[1] += recovery
    return Polynomial(tuple(b))


@dataclass(frozen=True)
class PolynomialFit:
    poly: Polynomial
    sup_error: float


_REPORT_GRID = np.linspace(-1.0, 1.0, 10_001)
_VERIFY_GRID = np.linspace(-1.0, 1.0, 100_001)


def chebyshev_nodes(n: int) -> np.ndarray:
    j = np.arange(n)
    x = np.cos(np.pi * (j + 0.5) / n)
    # exact symmetry keeps odd/even parts decoupled in the normal equations
    return 0.5 * (x - x[::-1])


def sup_error(poly: Polynomial, grid: np.ndarray = _REPORT_GRID) -> float:
    return float(np.max(np.abs(poly(grid) - np.maximum(grid, 0.0))))


def fit_positive_part(degrees: Iterable[int] = (0, 1, 2, 4), sample_count: int = 1001) -> PolynomialFit:
    degs = sorted(set(int(d) for d in degrees))
    if not degs:
        raise ContractViolation("degree set must be non-empty")
    if degs[0] < 0:
        raise ContractViolation("degrees must be non-negative")
    if sample_count < 2 * degs[-1] or sample_count < len(degs):
        raise ContractViolation("sample_count must be at least twice the maximal degree")
    x = chebyshev_nodes(sample_count)
    A = np.stack([x**d for d in degs], axis=1)
    coef, _, rank, _ = np.linalg.lstsq(A, np.maximum(x, 0.0), rcond=None)
    if rank < len(degs):
        raise FitError(f"rank-deficient least-squares system (rank {rank} < {len(degs)})")
    c = [0.0] * (degs[-1] + 1)
    for d, a in zip(degs, coef):
        c[d] = float(a)
    poly = Polynomial(tuple(c))
    return PolynomialFit(poly, sup_error(poly))


def fit_bounding(direction: str, degrees: Iterable[int] = (0, 1, 2, 4),
                 sample_count: int = 1001) -> PolynomialFit:
    """Least-squares fit shifted by its sup-error so it lies below/above ``x+``.

    ``direction`` is ``"under"`` or ``"over"``.  The shift is measured on the
    verification grid itself, so the bound holds at every verification node.
    """
    direction = direction.lower()
    if direction not in ("under", "over"):
        raise ContractViolation("direction must be 'under' or 'over'")
    base = fit_positive_part(degrees, sample_count).poly
    eps = sup_error(base, _VERIFY_GRID)
    shifted = base.shift(eps if direction == "over" else -eps)
    gap = shifted(_VERIFY_GRID) - np.maximum(_VERIFY_GRID, 0.0)
    ok = np.all(gap >= -1e-14) if direction == "over" else np.all(gap <= 1e-14)
    if not ok:
        raise FitError(f"{direction} bound violated after shift")
    return PolynomialFit(shifted, eps)


@dataclass(frozen=True)
class PayoffSpec:
    """Terminal payoff ``psi`` acting on ``(n, d)`` position arrays.

    ``fn`` must be vectorized and return ``(n,)`` values.  ``sup_norm`` is the
    analytic bound used for rescaling and for branching probabilities.
    """

    fn: Callable[[np.ndarray], np.ndarray] = field(compare=False)
    sup_norm: float
    tag: str = "custom"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        return np.asarray(self.fn(x), dtype=float)

    def scaled(self, factor: float) -> "PayoffSpec":
        return PayoffSpec(_Scaled(self.fn, float(factor)), abs(factor) * self.sup_norm,
                          f"{factor:g}*{self.tag}")

    def normalized(self) -> "PayoffSpec":
        """Payoff divided by its sup-norm (bound 1)."""
        if self.sup_norm == 1.0:
            return self
        return PayoffSpec(_Scaled(self.fn, 1.0 / self.sup_norm), 1.0, f"{self.tag}/{self.sup_norm:g}")

    def check_bound(self, grid: np.ndarray) -> bool:
        return bool(np.all(np.abs(self(grid)) <= self.sup_norm * (1 + 1e-12)))


class _Scaled:
    def __init__(self, fn, factor):
        self.fn, self.factor = fn, factor

    def __call__(self, x):
        return self.factor * self.fn(x)


class _Digital:
    def __init__(self, strike, low, high):
        self.strike, self.low, self.high = strike, low, high

    def __call__(self, x):
        return np.where(x[:, 0] > self.strike, self.high, self.low)


class _Constant:
    def __init__(self, c):
        self.c = c

    def __call__(self, x):
        return np.full(x.shape[0], self.c)


def digital(strike: float = 1.0) -> PayoffSpec:
    """``1_{x > strike}`` on the first coordinate."""
    return PayoffSpec(_Digital(strike, 0.0, 1.0), 1.0, f"digital(K={strike:g})")


def cva_digital(strike: float = 1.0) -> PayoffSpec:
    """``1 - 2 * 1_{x > strike}``, the signed payoff of the CVA tables."""
    return PayoffSpec(_Digital(strike, 1.0, -1.0), 1.0, f"1-2*digital(K={strike:g})")


def constant(c: float) -> PayoffSpec:
    return PayoffSpec(_Constant(float(c)), abs(float(c)), f"const({c:g})")


PAYOFFS: dict[str, Callable[..., PayoffSpec]] = {
    "digital": digital,
    "cva_digital": cva_digital,
    "constant": constant,
}
