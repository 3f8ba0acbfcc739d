"""Eisenberg-Gale equilibria and utility-price machinery.

:func:`solve_eg` starts with proportional-response bidding. Its iterates
only approach the equilibrium (slowly near ties), so candidates are
*polished* into an exact equilibrium: fix the support suggested by the bids,
read prices off a spanning forest of that support, and route the money with
a max-flow. After a short warm-up the bids are sharpened by a Newton
homotopy on the smoothed dual before polishing. A polished point is accepted
only if it passes :func:`~fairmarkets.market.verify_equilibrium`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.special import logsumexp
from sklearn.base import BaseEstimator

from .exceptions import DimensionMismatch, NotConverged, OracleScaleExceeded, ZeroUtility
from .flow import bipartite_max_flow, forest_flows
from .market import (
    EquilibriumSolution,
    MarketInstance,
    Residuals,
    equilibrium_residuals,
    utilities,
    verify_equilibrium,
)

log = logging.getLogger(__name__)

PRICE_FLOOR = 1e-30
_TIGHT_RTOL = 1e-10
_POLISH_THRESHOLDS = (1e-3, 1e-5, 1e-7, 1e-9, 1e-11)
_TEMPERATURES = tuple(10.0 ** -k for k in range(1, 11))


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 10_000
    convergence_tol: float = 1e-8
    verification_tol: float = 1e-6
    seed: int = 0
    warmup_iterations: int = 50
    refine: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (self.convergence_tol > 0 and self.verification_tol > 0):
            raise ValueError("tolerances must be positive")


def _solution(market, x, p, iterations):
    u = utilities(market, x)
    with np.errstate(divide="ignore"):
        beta = market.budgets / u
    return EquilibriumSolution(
        allocation=x,
        prices=p,
        utility_prices=beta,
        utilities=u,
        residuals=equilibrium_residuals(market, x, p),
        iterations=iterations,
    )


def _max_spanning_forest(weight, mask):
    """Buyer-item edges of a maximum-weight spanning forest over ``mask``."""
    n, m = weight.shape
    rows, cols = np.nonzero(mask)
    # MST on a positive cost that decreases with weight; zero would mean "no edge"
    cost = 1.0 + np.log(weight.max()) - np.log(np.maximum(weight[rows, cols], 1e-300))
    graph = coo_matrix((cost, (rows, n + cols)), shape=(n + m, n + m)).tocsr()
    tree = minimum_spanning_tree(graph).tocoo()
    a, b = np.minimum(tree.row, tree.col), np.maximum(tree.row, tree.col)
    return list(zip(a.tolist(), (b - n).tolist()))


def _forest_prices(market, edges):
    """Log-prices implied by ``p_j = beta_i v_ij`` on a forest, scaled per tree.

    Nodes ``0..n-1`` are buyers and ``n..n+m-1`` items. Each tree's prices are
    scaled so that its items' value equals its buyers' budgets.
    """
    n, m = market.n, market.m
    logv = np.log(market.valuations)
    adj = [[] for _ in range(n + m)]
    for i, j in edges:
        adj[i].append(n + j)
        adj[n + j].append(i)
    log_beta = np.full(n, np.nan)
    log_p = np.full(m, np.nan)
    for root in range(n + m):
        seen = log_beta[root] if root < n else log_p[root - n]
        if not np.isnan(seen):
            continue
        comp_buyers, comp_items = [], []
        if root < n:
            log_beta[root] = 0.0
        else:
            log_p[root - n] = 0.0
        stack = [root]
        while stack:
            node = stack.pop()
            if node < n:
                comp_buyers.append(node)
            else:
                comp_items.append(node - n)
            for nb in adj[node]:
                if nb < n and np.isnan(log_beta[nb]):
                    log_beta[nb] = log_p[node - n] - logv[nb, node - n]
                    stack.append(nb)
                elif nb >= n and np.isnan(log_p[nb - n]):
                    log_p[nb - n] = log_beta[node] + logv[node, nb - n]
                    stack.append(nb)
        if not comp_buyers or not comp_items:
            return None
        lp = log_p[comp_items]
        shift = lp.max()
        value = np.sum(np.exp(lp - shift) * market.supplies[comp_items])
        money = market.budgets[comp_buyers].sum()
        t = np.log(money) - np.log(value) - shift
        log_p[comp_items] += t
        log_beta[comp_buyers] += t
    return log_beta, log_p


def _polish(market, bids, tol):
    n, m = market.n, market.m
    B = market.budgets
    share = bids / B[:, None]
    for delta in _POLISH_THRESHOLDS:
        mask = share >= delta
        mask[np.arange(n), np.argmax(bids, axis=1)] = True
        mask[np.argmax(bids, axis=0), np.arange(m)] = True
        forest = _max_spanning_forest(share, mask)
        implied = _forest_prices(market, forest)
        if implied is None:
            continue
        log_beta, log_p = implied
        p = np.exp(log_p)
        # beta_i must be buyer i's best utility price over all items
        best_beta = np.min(p[None, :] / market.valuations, axis=1)
        beta = np.exp(log_beta)
        if np.any(best_beta < beta * (1 - _TIGHT_RTOL)):
            continue
        tight = np.argwhere(p[None, :] <= beta[:, None] * market.valuations * (1 + _TIGHT_RTOL))
        if len(tight) == len(forest):
            flows = forest_flows(tight, B, p * market.supplies)
            if flows is None:
                continue
        else:
            flows, total = bipartite_max_flow(tight, B, p * market.supplies)
            if total < B.sum() * (1 - 1e-12):
                continue
        x = np.zeros((n, m))
        x[tight[:, 0], tight[:, 1]] = flows / p[tight[:, 1]]
        if verify_equilibrium(market, (x, p), tol):
            return x, p
    return None


def _polish_schedule(max_iterations):
    k, out = 8, []
    while k < max_iterations:
        out.append(k)
        k = int(k * 1.5) + 1
    return set(out)


def _soft_market(gamma, logv, tau):
    """Soft-max winners per item and log of the smoothed prices."""
    a = (gamma[:, None] + logv) / tau
    lse = logsumexp(a, axis=0)
    return np.exp(a - lse), tau * lse


def _refine(market, gamma, tol, max_steps=60):
    """Newton homotopy on the smoothed dual, polishing after every stage.

    The dual of the EG program in log utility prices ``gamma`` is
    ``sum_j s_j max_i exp(gamma_i + log v_ij) - sum_i B_i gamma_i``. Replacing
    the max by a soft-max at temperature ``tau`` makes it smooth; each stage
    warm-starts the next, colder one. The soft winner weights times item
    revenue are bids whose support sharpens as ``tau`` shrinks.

    Returns ``(polished_or_None, newton_steps)``.
    """
    logv = np.log(market.valuations)
    B, s = market.budgets, market.supplies
    n = B.size
    eye = np.eye(n)
    steps = 0
    for tau in _TEMPERATURES:
        def dual(g):
            w, logf = _soft_market(g, logv, tau)
            return float(s @ np.exp(logf) - B @ g), w, logf

        D, w, logf = dual(gamma)
        for _ in range(max_steps):
            revenue = s * np.exp(logf)
            spend = w @ revenue
            grad = spend - B
            if np.max(np.abs(grad)) < 1e-14 * B.sum():
                break
            H = (w * revenue) @ w.T * (1.0 - 1.0 / tau) + np.diag(spend) / tau
            # Levenberg damping keeps log-price moves within a factor e
            mu = 1e-12 * np.trace(H) / n
            while True:
                d = np.linalg.solve(H + mu * eye, -grad)
                if np.max(np.abs(d)) <= 1.0:
                    break
                mu = max(4.0 * mu, 1e-6 * np.max(np.abs(grad)))
            decrement = -grad @ d
            if decrement < 1e-24 * n:
                break
            step = 1.0
            while True:
                Dn, wn, lfn = dual(gamma + step * d)
                if Dn <= D - 1e-4 * step * decrement or step < 1e-4:
                    break
                step *= 0.5
            gamma, D, w, logf = gamma + step * d, Dn, wn, lfn
            steps += 1
        polished = _polish(market, w * (s * np.exp(logf)), tol)
        if polished is not None:
            return polished, steps
    return None, steps


def solve_eg(
    market: MarketInstance,
    config: Optional[SolverConfig] = None,
    initial_bids: Optional[np.ndarray] = None,
    return_bids: bool = False,
):
    """Fisher-market equilibrium maximising ``sum_i B_i log(v_i . x_i)``.

    Runs proportional response (prices are aggregate bids over supply; each
    buyer re-splits the budget in proportion to the utility each item
    delivered) for ``config.warmup_iterations`` rounds, then refines with the
    smoothed-dual Newton homotopy, and finally falls back to plain
    proportional response up to ``config.max_iterations``. Every candidate is
    polished to an exact equilibrium and verified before it is returned.

    ``initial_bids`` warm-starts the dynamics (rows are rescaled to the
    budgets). With ``return_bids`` the equilibrium spending matrix is
    returned alongside the solution.

    Raises :class:`NotConverged` if no verified equilibrium is reached.
    """
    config = config or SolverConfig()
    v, B, s = market.valuations, market.budgets, market.supplies
    if initial_bids is None:
        bids = B[:, None] * v / v.sum(axis=1, keepdims=True)
    else:
        bids = np.maximum(np.asarray(initial_bids, dtype=float), 0.0) + 1e-12 * v
        bids = B[:, None] * bids / bids.sum(axis=1, keepdims=True)

    def done(polished, iterations):
        sol = _solution(market, polished[0], polished[1], iterations)
        spend = sol.allocation * sol.prices[None, :]
        return (sol, spend) if return_bids else sol

    checkpoints = _polish_schedule(config.max_iterations)
    warmup = min(config.warmup_iterations, config.max_iterations)
    refined = not config.refine
    change = np.inf
    extra = 0
    it = 0
    while it < config.max_iterations:
        it += 1
        p = np.maximum(bids.sum(axis=0), PRICE_FLOOR) / s
        gain = bids * (v / p)
        new = B[:, None] * gain / gain.sum(axis=1, keepdims=True)
        change = np.max(np.abs(new - bids) / B[:, None])
        bids = new
        converged = change < config.convergence_tol
        if converged or it in checkpoints or it == config.max_iterations:
            polished = _polish(market, bids, config.verification_tol)
            if polished is not None:
                return done(polished, it + extra)
        if not refined and (it >= warmup or converged):
            refined = True
            p = np.maximum(bids.sum(axis=0), PRICE_FLOOR) / s
            gamma = np.log(np.min(p[None, :] / v, axis=1))
            polished, extra = _refine(market, gamma, config.verification_tol)
            if polished is not None:
                return done(polished, it + extra)
            log.debug("newton refinement failed; continuing proportional response")
        if converged:
            break
    p = np.maximum(bids.sum(axis=0), PRICE_FLOOR) / s
    sol = _solution(market, bids / p, p, it + extra)
    if change < config.convergence_tol and verify_equilibrium(market, sol, config.verification_tol):
        return (sol, bids) if return_bids else sol
    raise NotConverged(
        f"no verified equilibrium after {it} iterations (last bid change {change:.3g})",
        residuals=sol.residuals,
        iterations=it + extra,
    )


def eg_objective(market: MarketInstance, allocation) -> float:
    """``sum_i B_i log(v_i . x_i)``; raises :class:`ZeroUtility` on empty bundles."""
    u = utilities(market, allocation)
    bad = np.flatnonzero(~(u > 0))
    if bad.size:
        raise ZeroUtility(bad[0])
    return float(market.budgets @ np.log(u))


def _project_columns(x, supplies):
    """Euclidean projection of each column onto ``{y >= 0, sum(y) <= s_j}``."""
    out = np.maximum(x, 0.0)
    for j in range(x.shape[1]):
        if out[:, j].sum() <= supplies[j]:
            continue
        y = x[:, j]
        srt = np.sort(y)[::-1]
        css = np.cumsum(srt) - supplies[j]
        k = np.arange(1, y.size + 1)
        rho = np.flatnonzero(srt - css / k > 0)[-1]
        theta = css[rho] / (rho + 1)
        out[:, j] = np.maximum(y - theta, 0.0)
    return out


def brute_force_eg(
    market: MarketInstance,
    grid_resolution: int = 16,
    iterations: int = 4000,
    seed: int = 0,
) -> EquilibriumSolution:
    """Independent EG oracle for tiny markets (``n * m <= 6``).

    Projected gradient ascent with backtracking from ``grid_resolution``
    random starting allocations; prices are recovered from the optimal
    gradient as ``p_j = max_i B_i v_ij / u_i``.
    """
    n, m = market.n, market.m
    if n * m > 6:
        raise OracleScaleExceeded(f"brute_force_eg supports n*m <= 6, got {n}x{m}")
    rng = np.random.default_rng(seed)
    v, B, s = market.valuations, market.budgets, market.supplies

    def objective(x):
        u = np.einsum("ij,ij->i", v, x)
        return -np.inf if np.any(u <= 0) else float(B @ np.log(u))

    best_x, best_f = None, -np.inf
    starts = [np.tile(s / n, (n, 1))]
    starts += [rng.dirichlet(np.ones(n), size=m).T * s for _ in range(max(grid_resolution - 1, 0))]
    for x in starts:
        f = objective(x)
        step = 1.0
        for _ in range(iterations):
            u = np.einsum("ij,ij->i", v, x)
            grad = (B / u)[:, None] * v
            while True:
                cand = _project_columns(x + step * grad, s)
                fc = objective(cand)
                if fc >= f + 1e-4 * np.sum(grad * (cand - x)) or step < 1e-14:
                    break
                step *= 0.5
            if fc <= f or not np.isfinite(fc):
                break
            moved = np.max(np.abs(cand - x))
            x, f = cand, fc
            step *= 2.0
            if moved < 1e-13:
                break
        if f > best_f:
            best_x, best_f = x, f
    u = np.einsum("ij,ij->i", v, best_x)
    p = np.max((B / u)[:, None] * v, axis=0)
    return _solution(market, best_x, p, iterations)


def prices_from_utility_prices(market: MarketInstance, beta) -> np.ndarray:
    """``p_j = max_i beta_i v_ij``."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (market.n,):
        raise DimensionMismatch(f"beta has shape {beta.shape}, expected ({market.n},)")
    if np.any(~(beta > 0)):
        raise ValueError("utility prices must be strictly positive")
    return np.max(beta[:, None] * market.valuations, axis=0)


def is_budget_feasible(market: MarketInstance, beta, rtol: float = 1e-9):
    """Whether ``beta`` are budget-feasible utility prices.

    Items carry prices ``max_i beta_i v_ij`` and must be fully sold to buyers
    attaining that max, with nobody spending beyond their budget. Decided by
    a max-flow of spending from items to their argmax buyers. Returns
    ``(feasible, witness_allocation_or_None)``.
    """
    p = prices_from_utility_prices(market, beta)
    beta = np.asarray(beta, dtype=float)
    bids = beta[:, None] * market.valuations
    edges = np.argwhere(bids >= p[None, :] * (1 - rtol))
    need = p * market.supplies
    flows, total = bipartite_max_flow(edges, market.budgets, need)
    if total < need.sum() * (1 - rtol):
        return False, None
    x = np.zeros((market.n, market.m))
    x[edges[:, 0], edges[:, 1]] = flows / p[edges[:, 1]]
    return True, x


def elementwise_max_beta(b1, b2) -> np.ndarray:
    b1, b2 = np.asarray(b1, dtype=float), np.asarray(b2, dtype=float)
    if b1.shape != b2.shape:
        raise DimensionMismatch(f"utility price vectors differ in shape: {b1.shape} vs {b2.shape}")
    return np.maximum(b1, b2)


class EisenbergGaleSolver(BaseEstimator):
    """Estimator wrapper around :func:`solve_eg`.

    ``fit(market)`` stores ``solution_``, ``allocation_``, ``prices_`` and
    ``utility_prices_``.
    """

    def __init__(self, max_iterations=10_000, convergence_tol=1e-8, verification_tol=1e-6, seed=0):
        self.max_iterations = max_iterations
        self.convergence_tol = convergence_tol
        self.verification_tol = verification_tol
        self.seed = seed

    def _config(self):
        return SolverConfig(
            max_iterations=self.max_iterations,
            convergence_tol=self.convergence_tol,
            verification_tol=self.verification_tol,
            seed=self.seed,
        )

    def fit(self, market: MarketInstance, y=None):
        self.solution_ = solve_eg(market, self._config())
        self.allocation_ = self.solution_.allocation
        self.prices_ = self.solution_.prices
        self.utility_prices_ = self.solution_.utility_prices
        return self

    def predict(self, market: MarketInstance) -> np.ndarray:
        """Allocation for ``market`` (refits; equilibria are per-market)."""
        return solve_eg(market, self._config()).allocation
