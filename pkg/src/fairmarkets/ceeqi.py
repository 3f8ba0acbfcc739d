"""Competitive equilibrium from equitable incomes.

Class 0 keeps budget 1 and class 1 gets a common budget ``b1``. The signed
disparity ``U_1 - U_0`` of the EG equilibrium is continuous in ``b1``; it is
negative near 0, so doubling from 1 finds a bracket and bisection finds the
equalizing budget ``b_bar``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .eg import SolverConfig, solve_eg
from .exceptions import BracketFailure, EmptyGroup, WrongOrientation
from .market import EquilibriumSolution, MarketInstance

log = logging.getLogger(__name__)

MAX_BISECTIONS = 200


@dataclass
class CeeqiResult:
    b_bar: float
    solution: EquilibriumSolution
    disparity: float  # |U_1 - U_0| (relative if requested) at b_bar
    trace: list = field(default_factory=list)  # (b1, signed disparity) in evaluation order
    solves_used: int = 0
    flipped: bool = False  # class labels were swapped to make class 1 disadvantaged
    market: Optional[MarketInstance] = field(default=None, repr=False)

    @property
    def monotone(self) -> bool:
        """Whether the traced disparities are non-decreasing in ``b1`` (tol 1e-8)."""
        pts = sorted(self.trace)
        return all(b[1] >= a[1] - 1e-8 for a, b in zip(pts, pts[1:]))

    def to_dict(self) -> dict:
        return {
            "b_bar": self.b_bar,
            "disparity": self.disparity,
            "solves_used": self.solves_used,
            "flipped": self.flipped,
            "monotone": self.monotone,
            "trace": [[float(b), float(d)] for b, d in self.trace],
            "solution": self.solution.to_dict(),
        }


def _check_groups(market):
    for z in (0, 1):
        if not np.any(market.groups == z):
            raise EmptyGroup(z)


def _disparity(market, solution, relative):
    u = np.einsum("ij,ij->i", market.valuations, solution.allocation)
    u0, u1 = u[market.groups == 0].mean(), u[market.groups == 1].mean()
    d = u1 - u0
    if relative:
        d /= max(u0, u1)
    return float(d)


def utility_disparity_at(
    market: MarketInstance,
    b1: float,
    solver_config: Optional[SolverConfig] = None,
    relative: bool = False,
) -> float:
    """Signed ``U_1 - U_0`` of the EG equilibrium with class-1 budget ``b1``."""
    _check_groups(market)
    priced = market.group_budgets(b1)
    return _disparity(priced, solve_eg(priced, solver_config), relative)


class _Evaluator:
    """Solves at successive budgets, warm-starting from the previous bids."""

    def __init__(self, market, solver_config, relative):
        self.market = market
        self.config = solver_config
        self.relative = relative
        self.bids = None
        self.trace = []
        self.solutions = {}

    def __call__(self, b1):
        priced = self.market.group_budgets(b1)
        sol, self.bids = solve_eg(priced, self.config, initial_bids=self.bids, return_bids=True)
        d = _disparity(priced, sol, self.relative)
        self.trace.append((float(b1), d))
        self.solutions[float(b1)] = (priced, sol)
        return d


def solve_ceeqi(
    market: MarketInstance,
    epsilon: float = 1e-4,
    solver_config: Optional[SolverConfig] = None,
    relative: bool = False,
    auto_orient: bool = False,
) -> CeeqiResult:
    """Equalize mean class utilities to within ``epsilon`` by raising class 1's budget.

    Raises :class:`WrongOrientation` when class 1 is already ahead at equal
    budgets, unless ``auto_orient`` swaps the labels (reported via
    ``flipped``; the returned market and solution use the swapped labels).
    Raises :class:`BracketFailure` if the budget cap ``n * sum_j s_j * vbar``
    is reached with class 1 still behind.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    _check_groups(market)
    evaluate = _Evaluator(market, solver_config, relative)
    d = evaluate(1.0)
    flipped = False
    if d > epsilon:
        if not auto_orient:
            raise WrongOrientation(d)
        flipped = True
        market = market.replace(groups=1 - market.groups)
        evaluate.market = market
        evaluate.trace = [(1.0, -d)]
        evaluate.solutions = {1.0: (market.group_budgets(1.0), evaluate.solutions[1.0][1])}
        d = -d

    def finish(b):
        priced, sol = evaluate.solutions[float(b)]
        return CeeqiResult(
            b_bar=float(b),
            solution=sol,
            disparity=abs(dict(evaluate.trace)[float(b)]),
            trace=list(evaluate.trace),
            solves_used=len(evaluate.trace),
            flipped=flipped,
            market=priced,
        )

    if abs(d) < epsilon:
        return finish(1.0)

    cap = market.n * float(np.sum(market.supplies)) * market.max_valuation
    lo, hi = 1.0, 1.0
    while True:
        nxt = min(2.0 * hi, cap)
        if nxt <= hi:
            raise BracketFailure(f"class 1 still behind at the budget cap {cap:.6g}")
        lo, hi = hi, nxt
        d = evaluate(hi)
        if abs(d) < epsilon:
            return finish(hi)
        if d > 0:
            break
        if hi >= cap:
            raise BracketFailure(f"class 1 still behind at the budget cap {cap:.6g}")

    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        d = evaluate(mid)
        if abs(d) < epsilon:
            result = finish(mid)
            if not result.monotone:
                log.warning("disparity is not monotone in b1 along the bisection trace")
            return result
        if d < 0:
            lo = mid
        else:
            hi = mid
    raise BracketFailure(f"bisection stalled on [{lo:.17g}, {hi:.17g}] with disparity {d:.3g}")


class CEEqI(BaseEstimator):
    """Estimator form of :func:`solve_ceeqi`."""

    def __init__(self, epsilon=1e-4, relative=False, auto_orient=False, max_iterations=10_000,
                 verification_tol=1e-6):
        self.epsilon = epsilon
        self.relative = relative
        self.auto_orient = auto_orient
        self.max_iterations = max_iterations
        self.verification_tol = verification_tol

    def fit(self, market: MarketInstance, y=None):
        res = solve_ceeqi(
            market,
            self.epsilon,
            SolverConfig(max_iterations=self.max_iterations, verification_tol=self.verification_tol),
            relative=self.relative,
            auto_orient=self.auto_orient,
        )
        self.result_ = res
        self.b_bar_ = res.b_bar
        self.allocation_ = res.solution.allocation
        self.prices_ = res.solution.prices
        return self
