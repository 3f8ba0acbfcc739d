"""Class-indistinguishable valuations and the EqEEI mechanism.

Debiasing runs in three phases:

1. gradient descent on ``Vhat`` for ``||V - Vhat||_F^2 + lam * MMD^2`` between
   the class-0 and class-1 rows (Gaussian kernel, V-statistic);
2. a minimum-cost perfect matching between class-0 and class-1 rows;
3. each matched pair is snapped to its midpoint, so the two classes hold
   identical multisets of rows.

EqEEI then clears the market on ``Vhat`` and pools every matched pair's
bundles, splitting each pooled item evenly between the pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist, pdist
from sklearn.base import BaseEstimator, TransformerMixin

from .eg import SolverConfig, solve_eg
from .exceptions import DimensionMismatch, EmptyGroup, EmptySample, UnbalancedGroups
from .market import EquilibriumSolution, MarketInstance

POSITIVITY_FLOOR = 0.01


@dataclass(frozen=True)
class DebiasConfig:
    lam: float = 100.0
    kernel_bandwidth: Union[float, str] = "median"
    learning_rate: float = 1e-3
    steps: int = 2000
    seed: int = 0
    match_tolerance: float = 0.0
    floor: float = POSITIVITY_FLOOR

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.match_tolerance < 0:
            raise ValueError("match_tolerance must be >= 0")
        if isinstance(self.kernel_bandwidth, str):
            if self.kernel_bandwidth != "median":
                raise ValueError("kernel_bandwidth must be a positive number or 'median'")
        elif not self.kernel_bandwidth > 0:
            raise ValueError("kernel_bandwidth must be > 0")


@dataclass
class DebiasResult:
    v_hat: np.ndarray
    matching: np.ndarray  # (k, 2) global indices: class-0 buyer, class-1 buyer
    mmd_final: float  # before the snap
    frobenius_distance: float
    one_inf_distance: float
    bandwidth: float
    objective_trace: list = field(default_factory=list, repr=False)
    pairs_moved: int = 0

    def to_dict(self) -> dict:
        return {
            "v_hat": self.v_hat.tolist(),
            "matching": self.matching.tolist(),
            "mmd_final": self.mmd_final,
            "frobenius_distance": self.frobenius_distance,
            "one_inf_distance": self.one_inf_distance,
            "bandwidth": self.bandwidth,
            "pairs_moved": self.pairs_moved,
        }


def _gaussian(a, b, bandwidth):
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * bandwidth**2))


def mmd_squared(sample_a, sample_b, bandwidth: float) -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel."""
    a = np.atleast_2d(np.asarray(sample_a, dtype=float))
    b = np.atleast_2d(np.asarray(sample_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise EmptySample("both samples must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"samples have dimensions {a.shape[1]} and {b.shape[1]}")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be > 0")
    value = (
        _gaussian(a, a, bandwidth).mean()
        - 2.0 * _gaussian(a, b, bandwidth).mean()
        + _gaussian(b, b, bandwidth).mean()
    )
    return float(max(value, 0.0))


def median_bandwidth(x) -> float:
    """Median pairwise Euclidean distance between rows (1.0 if degenerate)."""
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return 1.0
    med = float(np.median(pdist(x)))
    return med if med > 0 else 1.0


def _mmd_grad(a, b, h):
    """Squared MMD between row sets ``a``, ``b`` and its gradients."""
    na, nb = len(a), len(b)
    kaa, kab, kbb = _gaussian(a, a, h), _gaussian(a, b, h), _gaussian(b, b, h)
    value = kaa.sum() / na**2 - 2.0 * kab.sum() / (na * nb) + kbb.sum() / nb**2
    # d k(x, y) / dx = -k(x, y) (x - y) / h^2
    ga = (
        -2.0 / (na**2 * h**2) * (kaa.sum(1)[:, None] * a - kaa @ a)
        + 2.0 / (na * nb * h**2) * (kab.sum(1)[:, None] * a - kab @ b)
    )
    gb = (
        -2.0 / (nb**2 * h**2) * (kbb.sum(1)[:, None] * b - kbb @ b)
        + 2.0 / (na * nb * h**2) * (kab.sum(0)[:, None] * b - kab.T @ a)
    )
    return value, ga, gb


def debias_objective(v_hat, v, groups, lam: float, bandwidth: float):
    """Phase-1 objective ``||V - Vhat||_F^2 + lam * MMD^2`` and its gradient."""
    v_hat = np.asarray(v_hat, dtype=float)
    groups = np.asarray(groups)
    g0, g1 = groups == 0, groups == 1
    diff = v_hat - np.asarray(v, dtype=float)
    mmd, ga, gb = _mmd_grad(v_hat[g0], v_hat[g1], bandwidth)
    grad = 2.0 * diff
    grad[g0] += lam * ga
    grad[g1] += lam * gb
    return float(np.sum(diff**2) + lam * mmd), grad, mmd


def _descend(v, groups, config, bandwidth):
    """Projected gradient descent; halves the step whenever the objective rises."""
    v_hat = np.maximum(v, config.floor)
    lr = config.learning_rate
    obj, grad, mmd = debias_objective(v_hat, v, groups, config.lam, bandwidth)
    trace = [obj]
    if config.lam == 0:
        return v_hat, mmd, trace
    for _ in range(config.steps):
        cand = np.maximum(v_hat - lr * grad, config.floor)
        c_obj, c_grad, c_mmd = debias_objective(cand, v, groups, config.lam, bandwidth)
        if c_obj > obj:
            lr *= 0.5
            if lr < 1e-16:
                break
            continue
        v_hat, obj, grad, mmd = cand, c_obj, c_grad, c_mmd
        trace.append(obj)
    return v_hat, mmd, trace


def debias_matrix(x, groups, config: Optional[DebiasConfig] = None) -> DebiasResult:
    """Debias an arbitrary row matrix ``x`` (valuations or embedding vectors)."""
    config = config or DebiasConfig()
    x = np.asarray(x, dtype=float)
    groups = np.asarray(groups).astype(int)
    if groups.shape != (len(x),):
        raise DimensionMismatch("groups must have one label per row")
    g0, g1 = np.flatnonzero(groups == 0), np.flatnonzero(groups == 1)
    for z, members in ((0, g0), (1, g1)):
        if members.size == 0:
            raise EmptyGroup(z)
    if g0.size != g1.size:
        raise UnbalancedGroups(
            f"exact matching needs equal class sizes, got {g0.size} and {g1.size}; subsample first"
        )
    bandwidth = (
        median_bandwidth(x) if config.kernel_bandwidth == "median" else float(config.kernel_bandwidth)
    )
    phase1, mmd, trace = _descend(x, groups, config, bandwidth)

    rows, cols = linear_sum_assignment(cdist(phase1[g0], phase1[g1], "sqeuclidean"))
    matching = np.column_stack([g0[rows], g1[cols]])
    v_hat = phase1.copy()
    moved = 0
    for a, b in matching:
        mid = np.maximum(0.5 * (phase1[a] + phase1[b]), config.floor)
        if np.max(np.abs(phase1[a] - phase1[b])) > config.match_tolerance:
            moved += 1
        v_hat[a] = mid
        v_hat[b] = mid
    delta = x - v_hat
    return DebiasResult(
        v_hat=v_hat,
        matching=matching,
        mmd_final=float(mmd),
        frobenius_distance=float(np.linalg.norm(delta)),
        one_inf_distance=float(np.max(np.abs(delta).sum(axis=1))),
        bandwidth=bandwidth,
        objective_trace=trace,
        pairs_moved=moved,
    )


def debias_valuations(market: MarketInstance, config: Optional[DebiasConfig] = None) -> DebiasResult:
    """Class-indistinguishable valuations ``Vhat`` close to the market's ``V``.

    ``one_inf_distance`` is ``max_i sum_j |v_ij - vhat_ij|``.
    """
    return debias_matrix(market.valuations, market.groups, config)


def pool_pairs(allocation, matching) -> np.ndarray:
    """Give both members of every matched pair half of the pair's pooled bundle."""
    x = np.array(allocation, dtype=float)
    for a, b in np.asarray(matching, dtype=int).reshape(-1, 2):
        pooled = 0.5 * (x[a] + x[b])
        x[a] = pooled
        x[b] = pooled
    return x


@dataclass
class EqeeiResult:
    solution: EquilibriumSolution  # CEEI on the debiased market, before pooling
    allocation: np.ndarray  # pooled allocation
    debias: DebiasResult
    market_hat: MarketInstance

    def __iter__(self):
        return iter((self.solution, self.allocation, self.debias))


def eqeei(
    market: MarketInstance,
    config: Optional[DebiasConfig] = None,
    solver_config: Optional[SolverConfig] = None,
) -> EqeeiResult:
    """Equitable equilibrium from equal incomes.

    Every buyer gets a unit budget; prices are the CEEI prices of the
    debiased market. Unpacks as ``(solution, pooled_allocation, debias)``.
    """
    result = debias_valuations(market, config)
    market_hat = market.replace(
        valuations=result.v_hat,
        budgets=np.ones(market.n),
        max_valuation=max(market.max_valuation, float(result.v_hat.max())),
    )
    solution = solve_eg(market_hat, solver_config)
    pooled = pool_pairs(solution.allocation, result.matching)
    return EqeeiResult(solution=solution, allocation=pooled, debias=result, market_hat=market_hat)


class ValuationDebiaser(TransformerMixin, BaseEstimator):
    """Transductive transformer mapping a row matrix to class-indistinguishable rows.

    ``fit(X, groups)`` computes ``v_hat_`` and ``matching_``; ``transform``
    only accepts the matrix it was fitted on.
    """

    def __init__(self, lam=100.0, kernel_bandwidth="median", learning_rate=1e-3, steps=2000, seed=0,
                 floor=POSITIVITY_FLOOR):
        self.lam = lam
        self.kernel_bandwidth = kernel_bandwidth
        self.learning_rate = learning_rate
        self.steps = steps
        self.seed = seed
        self.floor = floor

    def fit(self, X, y):
        config = DebiasConfig(
            lam=self.lam,
            kernel_bandwidth=self.kernel_bandwidth,
            learning_rate=self.learning_rate,
            steps=self.steps,
            seed=self.seed,
            floor=self.floor,
        )
        self._X_fit = np.array(X, dtype=float)
        self.result_ = debias_matrix(self._X_fit, y, config)
        self.v_hat_ = self.result_.v_hat
        self.matching_ = self.result_.matching
        return self

    def transform(self, X):
        if not hasattr(self, "result_"):
            raise ValueError("ValuationDebiaser is not fitted")
        X = np.asarray(X, dtype=float)
        if X.shape != self._X_fit.shape or not np.array_equal(X, self._X_fit):
            raise ValueError("debiasing is transductive: transform the matrix passed to fit")
        return self.v_hat_.copy()


class EqEEI(BaseEstimator):
    """Estimator form of :func:`eqeei`; ``fit(market)`` sets ``allocation_``, ``prices_``."""

    def __init__(self, lam=100.0, kernel_bandwidth="median", learning_rate=1e-3, steps=2000, seed=0,
                 max_iterations=10_000, verification_tol=1e-6):
        self.lam = lam
        self.kernel_bandwidth = kernel_bandwidth
        self.learning_rate = learning_rate
        self.steps = steps
        self.seed = seed
        self.max_iterations = max_iterations
        self.verification_tol = verification_tol

    def fit(self, market: MarketInstance, y=None):
        res = eqeei(
            market,
            DebiasConfig(
                lam=self.lam,
                kernel_bandwidth=self.kernel_bandwidth,
                learning_rate=self.learning_rate,
                steps=self.steps,
                seed=self.seed,
            ),
            SolverConfig(max_iterations=self.max_iterations, verification_tol=self.verification_tol),
        )
        self.result_ = res
        self.allocation_ = res.allocation
        self.prices_ = res.solution.prices
        self.matching_ = res.debias.matching
        self.v_hat_ = res.debias.v_hat
        return self
