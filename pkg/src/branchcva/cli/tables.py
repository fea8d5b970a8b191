"""Named table presets reproducing the published experiment layouts.

Every preset returns a :class:`Table` whose columns follow the published
table one-to-one, except that ``value(stdev)`` cells are split into a value
column and a ``*_stdev`` column so the CSV stays numeric.  Prices are in
percent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

from ..analysis import blowup_check
from ..diffusion import ItoProcessSpec
from ..gwtree import BranchingConfig, Mode, estimate
from ..nonlinearity import (BLOWUP, CHOICEU, EXPERIMENT1, EXPERIMENT2, Polynomial,
                            cva_digital, digital)
from ..reference.fd import FdGrid, PdeProblem, fd_solve

SIGMA = 0.2
X0 = 1.0
CVA_RECOVERY = 0.4
CVA_MATURITIES = (2.0, 4.0, 6.0, 8.0, 10.0)
BLOWUP_MATURITIES = (0.5, 1.0, 1.1)
EXPERIMENT_LOG2 = (12, 14, 16, 18, 20, 22)
# grid used for the deterministic columns of every preset
TABLE_GRID = (1601, 1600)
BLOWUP_GRID = (801, 400)


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "meta": self.meta, "columns": self.columns,
                "rows": [dict(zip(self.columns, r)) for r in self.rows]}


def _fd(mode: Mode, payoff, beta: float, T: float, poly: Polynomial | None, recovery: float,
        grid: tuple[int, int]):
    spec = ItoProcessSpec.gbm(SIGMA)
    p = PdeProblem(mode, spec, payoff, beta, T, poly, recovery=recovery, x0=X0)
    return fd_solve(p, FdGrid.for_problem(p, *grid))


def _mc(mode: Mode, payoff, beta: float, T: float, poly: Polynomial, recovery: float,
        n: int, seed: int, workers: int):
    cfg = BranchingConfig.optimal(beta, T, mode, poly, recovery=recovery)
    return estimate(cfg, ItoProcessSpec.gbm(SIGMA), payoff, n, seed, X0, workers=workers)


def _experiment(name: str, poly: Polynomial, log2_paths, seed: int, workers: int) -> Table:
    table = Table(name, ["N", "fair_nonlinear", "stdev_nonlinear", "fair_mtm", "stdev_mtm"])
    for n in log2_paths:
        row: list[float] = [n]
        for mode in (Mode.NONLINEAR, Mode.MTM):
            est = _mc(mode, digital(), 0.05, 10.0, poly, 0.0, 1 << n, seed, workers)
            row += [100 * est.mean, 100 * est.stderr]
        table.rows.append(row)
    fd = {m.value: 100 * _fd(m, digital(), 0.05, 10.0, poly, 0.0, TABLE_GRID).value
          for m in (Mode.NONLINEAR, Mode.MTM)}
    table.meta.update(seed=seed, paths=[f"2^{n}" for n in log2_paths], beta=0.05, T=10.0,
                      sigma=SIGMA, x0=X0, payoff="digital(K=1)", fd_grid=list(TABLE_GRID),
                      fd_nonlinear=fd["nonlinear"], fd_mtm=fd["mtm"])
    return table


def experiment1(log2_paths=EXPERIMENT_LOG2, seed: int = 0, workers: int = 1) -> Table:
    return _experiment("experiment1", EXPERIMENT1, log2_paths, seed, workers)


def experiment2(log2_paths=EXPERIMENT_LOG2, seed: int = 0, workers: int = 1) -> Table:
    return _experiment("experiment2", EXPERIMENT2, log2_paths, seed, workers)


def blowup(log2_paths=(20,), seed: int = 0, workers: int = 1) -> Table:
    """Time-weighted branching estimate next to the FD solution of ``u + u**2``.

    The branching column is computed with the advisory overridden so the
    divergent rows still show what the estimator produces; the advisory
    column records whether the sufficient criterion holds.
    """
    n = 1 << log2_paths[-1]
    table = Table("blowup", ["maturity", "branching", "branching_stdev", "pde", "advisory"])
    for T in BLOWUP_MATURITIES:
        est = _mc(Mode.TIMEWEIGHTED, digital(), 1.0, T, BLOWUP, 0.0, n, seed, workers)
        sol = _fd(Mode.NONLINEAR, digital(), 1.0, T, BLOWUP, 0.0, BLOWUP_GRID)
        report = blowup_check(BLOWUP, 1.0, 1.0, T)
        pde = math.inf if sol.diverged else 100 * sol.value
        table.rows.append([T, 100 * est.mean, 100 * est.stderr, pde, int(report.converges)])
    table.meta.update(seed=seed, paths=f"2^{log2_paths[-1]}", beta=1.0, sigma=SIGMA, x0=X0,
                      payoff="digital(K=1)", fd_grid=list(BLOWUP_GRID),
                      branching_mode="timeweighted", advisory_T_max=1.0)
    return table


def _cva(name: str, mode: Mode, beta: float, log2_paths, seed: int, workers: int) -> Table:
    n = 1 << log2_paths[-1]
    R = CVA_RECOVERY if mode is Mode.MTM else 0.0
    table = Table(name, ["maturity", "pde_poly", "branching", "branching_stdev", "pde"])
    for T in CVA_MATURITIES:
        poly_fd = _fd(mode, cva_digital(), beta, T, CHOICEU, R, TABLE_GRID).value
        exact_fd = _fd(mode, cva_digital(), beta, T, None, R, TABLE_GRID).value
        est = _mc(mode, cva_digital(), beta, T, CHOICEU, R, n, seed, workers)
        table.rows.append([T, 100 * poly_fd, 100 * est.mean, 100 * est.stderr, 100 * exact_fd])
    table.meta.update(seed=seed, paths=f"2^{log2_paths[-1]}", mode=mode.value, beta=beta,
                      recovery=CVA_RECOVERY, sigma=SIGMA, x0=X0, payoff="1-2*digital(K=1)",
                      nonlinearity="choiceu", fd_grid=list(TABLE_GRID))
    return table


def table3(log2_paths=(20,), seed: int = 0, workers: int = 1) -> Table:
    return _cva("table3", Mode.MTM, 0.01, log2_paths, seed, workers)


def table4(log2_paths=(20,), seed: int = 0, workers: int = 1) -> Table:
    return _cva("table4", Mode.NONLINEAR, 0.01, log2_paths, seed, workers)


def table5(log2_paths=(20,), seed: int = 0, workers: int = 1) -> Table:
    return _cva("table5", Mode.MTM, 0.03, log2_paths, seed, workers)


def table6(log2_paths=(20,), seed: int = 0, workers: int = 1) -> Table:
    return _cva("table6", Mode.NONLINEAR, 0.03, log2_paths, seed, workers)


TABLES: dict[str, Callable[..., Table]] = {
    "experiment1": experiment1,
    "experiment2": experiment2,
    "blowup": blowup,
    "table3": table3,
    "table4": table4,
    "table5": table5,
    "table6": table6,
}


def format_csv(table: Table, decimals: int = 2) -> str:
    """Comma-separated text with ``#`` metadata lines and a header row."""
    lines = [f"# {k}: {v}" for k, v in table.meta.items()]
    lines.append(",".join(table.columns))
    for row in table.rows:
        cells = []
        for col, v in zip(table.columns, row):
            if col in ("N", "advisory"):
                cells.append(str(int(v)))
            elif col == "maturity":
                cells.append(f"{v:g}")
            elif math.isinf(v):
                cells.append("inf")
            else:
                cells.append(f"{v:.{decimals}f}")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
