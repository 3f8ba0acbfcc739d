"""Allocation-quality and disparate-impact metrics.

Per-buyer metrics (regret, envy, scaled envy) are returned as magnitudes or
signed values exactly as defined below; sign conventions for reporting
live in the CLI.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .exceptions import (
    DegenerateAllocation,
    DimensionMismatch,
    EmptyGroup,
    InvalidMatching,
    LpInfeasible,
    ZeroDemandUtility,
    ZeroReferenceWelfare,
    ZeroUtility,
)
from .market import MarketInstance, check_allocation, demand, utilities
from .simplex import solve_lp


def regret(market: MarketInstance, i: int, allocation, prices, budget: Optional[float] = None) -> float:
    """``(v_i . x_i - d_i) / d_i`` where ``d_i`` is the demand utility at ``prices``.

    Nonpositive; zero when ``x_i`` is a demanded bundle.
    """
    _, best = demand(market, i, prices, budget)
    if not best > 0:
        raise ZeroDemandUtility(i)
    x_i = np.asarray(allocation, dtype=float)[i]
    return float((market.valuations[i] @ x_i - best) / best)


def _envy(market, i, allocation, weights):
    x = np.asarray(allocation, dtype=float)
    if x.shape != (market.n, market.m):
        raise DimensionMismatch("allocation shape does not match the market")
    values = (x @ market.valuations[i]) * weights
    top = values.max()
    if not top > 0:
        raise DegenerateAllocation(i)
    return float(min(max((top - values[i]) / top, 0.0), 1.0))


def envy(market: MarketInstance, i: int, allocation) -> float:
    """Normalised envy of ``i`` toward the bundle it values most, in [0, 1]."""
    return _envy(market, i, allocation, np.ones(market.n))


def scaled_envy(market: MarketInstance, i: int, allocation, budgets=None) -> float:
    """Envy with each other bundle's value scaled by ``B_i / B_i'``."""
    B = market.budgets if budgets is None else np.asarray(budgets, dtype=float)
    return _envy(market, i, allocation, B[i] / B)


def pareto_improvement(market: MarketInstance, allocation, tol: float = 1e-9):
    """Welfare-maximising allocation that weakly improves every buyer.

    Solves ``max sum_i v_i . x_i`` s.t. ``v_i . x_i >= v_i . xhat_i`` and
    supply caps with the in-house simplex. Returns ``(x_improved, welfare)``.
    """
    x_hat = check_allocation(market, allocation)
    n, m = market.n, market.m
    v = market.valuations
    floor = utilities(market, x_hat) * (1 - 1e-10)
    c = v.ravel()
    A_ub = np.zeros((n + m, n * m))
    for i in range(n):
        A_ub[i, i * m : (i + 1) * m] = -v[i]
    for j in range(m):
        A_ub[n + j, j::m] = 1.0
    b_ub = np.concatenate([-floor, market.supplies])
    try:
        res = solve_lp(c, A_ub=A_ub, b_ub=b_ub, maximize=True, tol=tol)
    except LpInfeasible as exc:
        raise LpInfeasible(f"Pareto-improvement LP failed numerically: {exc}") from None
    return res.x.reshape(n, m), res.fun


def pareto_gap(market: MarketInstance, allocation) -> float:
    """Welfare of ``allocation`` over the welfare of its best Pareto improvement."""
    x_hat = np.asarray(allocation, dtype=float)
    welfare = float(np.sum(utilities(market, x_hat)))
    _, best = pareto_improvement(market, x_hat)
    return float(min(welfare / max(best, welfare), 1.0))


def geometric_mean_gap(market: MarketInstance, allocation, reference) -> float:
    """Ratio of geometric-mean utilities, computed in log space."""
    u = utilities(market, allocation)
    u_ref = utilities(market, reference)
    for vec in (u, u_ref):
        bad = np.flatnonzero(~(vec > 0))
        if bad.size:
            raise ZeroUtility(bad[0])
    return float(np.exp(np.mean(np.log(u)) - np.mean(np.log(u_ref))))


def efficiency_gap(market: MarketInstance, allocation, reference) -> float:
    ref = float(np.sum(utilities(market, reference)))
    if not ref > 0:
        raise ZeroReferenceWelfare("reference allocation has zero social welfare")
    return float(np.sum(utilities(market, allocation)) / ref)


def group_utilities(market: MarketInstance, allocation, valuations=None):
    """Mean utility of class 0 and class 1 members."""
    v = market.valuations if valuations is None else valuations
    u = np.einsum("ij,ij->i", v, np.asarray(allocation, dtype=float))
    out = []
    for z in (0, 1):
        members = market.groups == z
        if not members.any():
            raise EmptyGroup(z)
        out.append(float(u[members].mean()))
    return out[0], out[1]


def allocation_distribution_distance(market: MarketInstance, allocation, matching) -> float:
    """Largest max-norm gap between the bundles of matched cross-class pairs.

    Zero certifies that the two classes' empirical allocation distributions
    coincide under the pairing.
    """
    x = np.asarray(allocation, dtype=float)
    pairs = np.asarray(matching, dtype=int).reshape(-1, 2)
    g0, g1 = market.members(0), market.members(1)
    if (
        len(pairs) != len(g0)
        or len(pairs) != len(g1)
        or sorted(pairs[:, 0].tolist()) != g0.tolist()
        or sorted(pairs[:, 1].tolist()) != g1.tolist()
    ):
        raise InvalidMatching("matching must pair every class-0 buyer with a distinct class-1 buyer")
    if len(pairs) == 0:
        return 0.0
    return float(np.max(np.abs(x[pairs[:, 0]] - x[pairs[:, 1]])))


@dataclass
class MetricsReport:
    regret: np.ndarray
    envy: np.ndarray
    scaled_envy: np.ndarray
    pareto_gap: float
    geometric_mean_gap: float
    efficiency_gap: float
    group_utilities: Optional[tuple]
    utility_disparity: Optional[float]
    allocation_distribution_distance: Optional[float] = None

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("regret", "envy", "scaled_envy"):
            out[key] = np.asarray(getattr(self, key)).tolist()
        if self.group_utilities is not None:
            out["group_utilities"] = list(self.group_utilities)
        if out["allocation_distribution_distance"] is None:
            del out["allocation_distribution_distance"]
        return out

    def summary(self) -> dict:
        """Buyer-averaged scalars with the loss-sign convention used in reports."""
        return {
            "regret": float(np.mean(self.regret)),
            "envy": 0.0 - float(np.mean(self.envy)) + 0.0,
            "scaled_envy": 0.0 - float(np.mean(self.scaled_envy)) + 0.0,
            "pareto_gap": self.pareto_gap,
            "geometric_mean_gap": self.geometric_mean_gap,
            "efficiency_gap": self.efficiency_gap,
            "utility_disparity": self.utility_disparity,
        }


def compute_metrics(
    market: MarketInstance,
    allocation,
    prices,
    reference=None,
    budgets=None,
    matching=None,
) -> MetricsReport:
    """Full metric suite for ``allocation`` evaluated under ``market``'s valuations.

    ``reference`` (defaults to ``allocation``) is the allocation the gap
    metrics compare against, normally the CEEI of the true market.
    """
    x = np.asarray(allocation, dtype=float)
    ref = x if reference is None else np.asarray(reference, dtype=float)
    B = market.budgets if budgets is None else np.asarray(budgets, dtype=float)
    n = market.n
    reg = np.array([regret(market, i, x, prices, B[i]) for i in range(n)])
    env = np.array([envy(market, i, x) for i in range(n)])
    senv = np.array([scaled_envy(market, i, x, B) for i in range(n)])
    try:
        groups = group_utilities(market, x)
        disparity = abs(groups[1] - groups[0])
    except EmptyGroup:
        groups, disparity = None, None
    add = None if matching is None else allocation_distribution_distance(market, x, matching)
    return MetricsReport(
        regret=reg,
        envy=env,
        scaled_envy=senv,
        pareto_gap=pareto_gap(market, x),
        geometric_mean_gap=geometric_mean_gap(market, x, ref),
        efficiency_gap=efficiency_gap(market, x, ref),
        group_utilities=groups,
        utility_disparity=disparity,
        allocation_distribution_distance=add,
    )
