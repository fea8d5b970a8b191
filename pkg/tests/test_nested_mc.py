from __future__ import annotations

import math

import pytest
from scipy.stats import norm

from branchcva.errors import ContractViolation
from branchcva.gwtree import Mode
from branchcva.nonlinearity import CHOICEU, cva_digital, digital
from branchcva.reference.fd import FdGrid, PdeProblem, fd_solve
from branchcva.reference.nested_mc import McProblem, nested_mc


def test_beta_zero_is_plain_mc(gbm):
    est = nested_mc(McProblem(Mode.NONLINEAR, gbm, digital(), 0.0, 10.0), 50_000, 10, 5, seed=1)
    assert est.inner_paths == 0
    assert abs(est.mean - norm.cdf(-0.2 * math.sqrt(10) / 2)) < 3 * est.stderr


def test_mtm_agrees_with_fd(gbm):
    prob = McProblem(Mode.MTM, gbm, cva_digital(), 0.01, 10.0, recovery=0.4)
    est = nested_mc(prob, 20_000, 200, 20, seed=2)
    p = PdeProblem(Mode.MTM, gbm, cva_digital(), 0.01, 10.0, recovery=0.4)
    fd = fd_solve(p, FdGrid.for_problem(p, 1601, 1600)).value
    assert abs(est.mean - fd) < 3 * est.stderr


def test_polynomial_source(gbm):
    prob = McProblem(Mode.MTM, gbm, cva_digital(), 0.03, 10.0, CHOICEU, recovery=0.4)
    est = nested_mc(prob, 20_000, 100, 10, seed=3)
    p = PdeProblem(Mode.MTM, gbm, cva_digital(), 0.03, 10.0, CHOICEU, recovery=0.4)
    fd = fd_solve(p, FdGrid.for_problem(p, 801, 400)).value
    # inner noise biases F(m) slightly; allow the quadrature level on top of 3 sigma
    assert abs(est.mean - fd) < 3 * est.stderr + 2e-3


def test_cost_accounting(gbm):
    est = nested_mc(McProblem(Mode.NONLINEAR, gbm, digital(), 0.05, 2.0), 5000, 30, 7, seed=4)
    assert est.inner_paths == 5000 * 30 * 7
    assert est.n_samples == 5000 and est.n_times == 7


def test_worker_independence(gbm):
    prob = McProblem(Mode.NONLINEAR, gbm, cva_digital(), 0.05, 5.0)
    a = nested_mc(prob, 10_000, 20, 5, seed=5)
    b = nested_mc(prob, 10_000, 20, 5, seed=5, workers=3)
    assert a == b


def test_multidimensional(gbm):
    from branchcva.diffusion import ItoProcessSpec
    from branchcva.nonlinearity import PayoffSpec
    import numpy as np

    spec = ItoProcessSpec.gbm([0.2, 0.2])
    basket = PayoffSpec(lambda x: np.where(x.mean(axis=1) > 1.0, 1.0, 0.0), 1.0, "basket")
    est = nested_mc(McProblem(Mode.NONLINEAR, spec, basket, 0.0, 1.0, x0=(1.0, 1.0)),
                    20_000, 5, 2, seed=6)
    assert 0.4 < est.mean < 0.5


def test_contracts(gbm):
    with pytest.raises(ContractViolation):
        nested_mc(McProblem(Mode.NONLINEAR, gbm, digital(), 0.05, 2.0), 1, 30, 7)
    with pytest.raises(ContractViolation):
        McProblem(Mode.MTM, gbm, digital(), 0.05, 2.0, recovery=1.0)
