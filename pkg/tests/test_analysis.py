from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.optimize import brentq

from branchcva import rng as rngmod
from branchcva.analysis import (Regime, blowup_check, criticality, laplace_numeric,
                                laplace_single_closed, variance_bound)
from branchcva.gwtree import BranchingConfig, Mode, estimate, simulate_batch
from branchcva.nonlinearity import (BLOWUP, CHOICEU, CHOICEU_ABS, EXPERIMENT1, EXPERIMENT2,
                                    Polynomial, ProbabilityVector, digital,
                                    optimal_probabilities)


def single(k, n=5):
    p = [0.0] * max(n, k + 1)
    p[k] = 1.0
    return ProbabilityVector(tuple(p))


def test_single_closed_examples():
    assert laplace_single_closed(3.0, 0.7, 2, 0.0) == pytest.approx(1.0, abs=1e-15)
    assert laplace_single_closed(0.0, 0.7, 3, 1.3) == pytest.approx(1.0, abs=1e-15)
    assert laplace_single_closed(math.log(2), 1.0, 2, math.log(2)) == pytest.approx(2 / 3)


@given(st.floats(0.0, 5.0), st.floats(0.0, 1.0), st.sampled_from([0, 2, 3, 4]),
       st.floats(0.0, 2.0))
@settings(max_examples=60, deadline=None)
def test_closed_form_matches_ode(T, beta, k, c):
    closed = laplace_single_closed(T, beta, k, c)
    num = laplace_numeric(T, beta, single(k), [0.0] * k + [c])
    if math.isinf(closed):
        assert math.isinf(num)
    else:
        assert num == pytest.approx(closed, rel=1e-8, abs=1e-10)


def test_normalization_and_monotonicity():
    p = ProbabilityVector((0.1, 0.2, 0.3, 0.4))
    assert laplace_numeric(7.0, 0.3, p, [0, 0, 0, 0]) == 1.0
    g = np.random.default_rng(0)
    for _ in range(20):
        c = g.uniform(0, 1, 4)
        j = g.integers(4)
        d = c.copy()
        d[j] += g.uniform(0.01, 0.5)
        assert laplace_numeric(5.0, 0.3, p, d) <= laplace_numeric(5.0, 0.3, p, c) + 1e-12


def test_empirical_laplace_transform(gbm):
    cfg = BranchingConfig.optimal(0.05, 10.0, Mode.NONLINEAR, EXPERIMENT1)
    res = simulate_batch(cfg, gbm, digital(), 10**6, rngmod.stream(21, rngmod.BATCH))
    g = np.random.default_rng(1)
    for _ in range(5):
        c = np.concatenate([[0.0, 0.0], g.uniform(0.05, 1.0, 2)])
        w = np.exp(-(res.omega * c).sum(axis=1))
        se = w.std() / math.sqrt(w.size)
        assert abs(w.mean() - laplace_numeric(10.0, 0.05, cfg.probs, c)) < 3 * se


def test_criteria_examples():
    T = 10.0
    r = blowup_check(CHOICEU, 1.0, 0.05, T)
    assert r.T_max * 0.05 == pytest.approx(0.50829, abs=1e-4)
    assert r.converges
    assert not blowup_check(CHOICEU, 1.0, 0.05, 10.2).converges
    b = blowup_check(BLOWUP, 1.0, 1.0, 0.5)
    assert b.T_max == pytest.approx(1.0, abs=1e-9) and b.converges
    assert not blowup_check(BLOWUP, 1.0, 1.0, 1.1).converges


def test_identity_root_quadrature_oracle():
    p = lambda s: -s + 0.0589 + 0.5 * s + 0.8164 * s**2 + 0.4043 * s**4  # noqa: E731
    root = brentq(lambda X: quad(lambda s: 1 / p(s), 1, X, epsabs=1e-13)[0] - 0.5, 1.0, 10.0,
                  xtol=1e-12)
    r = blowup_check(CHOICEU, 1.0, 0.05, 10.0)
    v = variance_bound(CHOICEU_ABS, optimal_probabilities(CHOICEU_ABS), 1.0, 0.05, 10.0)
    assert r.X == pytest.approx(root, rel=1e-8)
    assert v == pytest.approx(root, rel=1e-7)


@pytest.mark.parametrize("k,a,s,beta,T", [(2, 1.0, 1.0, 1.0, 0.5), (3, 0.5, 1.2, 0.4, 2.0),
                                          (2, 2.0, 1.0, 0.3, 1.2), (4, 0.2, 1.0, 1.0, 1.0)])
def test_single_type_condition(k, a, s, beta, T):
    c = [0.0] * (k + 1)
    c[k] = a
    r = blowup_check(Polynomial(tuple(c)), s, beta, T)
    cond = a * s ** (k - 1) * (1 - math.exp(-beta * T * (k - 1))) < 1
    assert r.converges == cond


@given(st.floats(0.2, 4.0), st.floats(0.01, 1.0), st.floats(0.1, 20.0))
@settings(max_examples=40, deadline=None)
def test_blowup_scale_consistency(s, beta, T):
    a = CHOICEU.coeffs
    mapped = Polynomial(tuple(ak / s ** (k - 1) if k else ak * s for k, ak in enumerate(a)))
    r1 = blowup_check(CHOICEU, 1.0, beta, T)
    r2 = blowup_check(mapped, s, beta, T)
    assert r1.converges == r2.converges
    assert r2.T_max == pytest.approx(r1.T_max, rel=1e-9)
    if r1.converges:
        assert r2.X == pytest.approx(r1.X, rel=1e-7)


def test_blowup_independent_of_probabilities():
    base = blowup_check(EXPERIMENT2, 1.0, 0.05, 10.0)
    g = np.random.default_rng(3)
    for _ in range(10):
        p = g.dirichlet(np.ones(3))
        probs = ProbabilityVector((0.0, 0.0, *p))
        cfg = BranchingConfig(0.05, 10.0, Mode.NONLINEAR, EXPERIMENT2, probs)
        from branchcva.gwtree import blowup_guard
        assert blowup_guard(cfg, digital()) == base


def test_variance_bound_beta_zero():
    p = optimal_probabilities(CHOICEU)
    assert variance_bound(CHOICEU, p, 1.0, 0.0, 10.0) == 1.0
    assert variance_bound(CHOICEU, p, 2.5, 0.0, 10.0, moment=1) == 2.5


def _perturbed(p: np.ndarray, g) -> ProbabilityVector:
    q = p * np.exp(g.normal(0, 0.3, p.size))
    q[p == 0] = 0.0
    q /= q.sum()
    q[np.argmax(q)] += 1 - q.sum()
    return ProbabilityVector(tuple(q))


@pytest.mark.parametrize("moment", [1, 2])
def test_optimal_probabilities_minimize_bound(moment):
    poly = EXPERIMENT2 if moment == 2 else CHOICEU_ABS
    beta, T = (0.05, 3.0) if moment == 2 else (0.05, 10.0)
    p = optimal_probabilities(poly)
    best = variance_bound(poly, p, 1.0, beta, T, moment)
    assert math.isfinite(best)
    g = np.random.default_rng(4)
    for _ in range(100):
        q = _perturbed(np.asarray(p.probs), g)
        assert variance_bound(poly, q, 1.0, beta, T, moment) >= best - 1e-9


def test_optimal_probabilities_minimize_first_order_term():
    # sum a_k^2 / p_k is minimized at p ~ |a| (Cauchy-Schwarz); its minimum is (sum |a|)^2
    a = np.abs(np.asarray(CHOICEU.coeffs))
    p = np.asarray(optimal_probabilities(CHOICEU).probs)
    nz = a > 0
    best = float(np.sum(a[nz] ** 2 / p[nz]))
    assert best == pytest.approx(a.sum() ** 2, rel=1e-12)
    g = np.random.default_rng(5)
    for _ in range(100):
        q = np.asarray(_perturbed(p, g).probs)
        assert np.sum(a[nz] ** 2 / q[nz]) >= best - 1e-12


def test_optimal_probabilities_not_minimal_for_long_horizons():
    # the full second-moment bound is not minimized by p ~ |a| once the
    # higher powers dominate the growth ODE; an explicit counterexample
    p_opt = optimal_probabilities(CHOICEU)
    heavier = ProbabilityVector((0.03, 0.22, 0.41, 0.0, 0.34))
    assert variance_bound(CHOICEU, p_opt, 1.0, 0.03, 8.0, 2) == math.inf
    assert math.isfinite(variance_bound(CHOICEU, heavier, 1.0, 0.03, 8.0, 2))


def test_variance_bound_dominates_estimates(gbm):
    for poly in (EXPERIMENT1, EXPERIMENT2):
        p = optimal_probabilities(poly)
        bound = variance_bound(poly, p, 1.0, 0.05, 10.0)
        est = estimate(BranchingConfig(0.05, 10.0, Mode.NONLINEAR, poly, p), gbm, digital(),
                       2**16, seed=2)
        assert abs(est.mean) <= bound


def test_criticality_examples():
    r = criticality(ProbabilityVector((0.5, 0.0, 0.5)))
    assert r.m == 1.0 and r.regime is Regime.CRITICAL and r.s0 == pytest.approx(1.0)
    r = criticality(ProbabilityVector((0.0, 0.0, 0.5, 0.5)))
    assert r.m == 2.5 and r.regime is Regime.SUPERCRITICAL and r.s0 == 0.0
    r = criticality(ProbabilityVector((1.0,)))
    assert r.m == 0.0 and r.regime is Regime.SUBCRITICAL and r.s0 == 1.0
    r = criticality(ProbabilityVector((0.25, 0.0, 0.75)))
    assert r.s0 == pytest.approx(1 / 3, abs=1e-9)
