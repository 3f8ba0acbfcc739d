"""Incentive audits: misreport gains, price impact of one buyer, EqEEI manipulation.

Every experiment derives its randomness from ``numpy.random.default_rng``
seeded with ``(seed, n, trial)`` so single trials can be replayed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .ceeqi import solve_ceeqi
from .debias import DebiasConfig, eqeei
from .eg import SolverConfig, solve_eg
from .exceptions import (
    BoundViolation,
    ConfigError,
    FairMarketsError,
    ScenarioDegenerate,
)
from .market import MarketInstance, make_market
from .metrics import regret

log = logging.getLogger(__name__)

SCALARS = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0)
MAGNITUDES = (0.05, 0.1, 0.25, 0.5)
VALUATION_FLOOR = 0.01


# -- misreport search ----------------------------------------------------------------


def misreport_grid(v_i, rng, scalars=SCALARS, n_directions: int = 32, magnitudes=MAGNITUDES,
                   floor: float = VALUATION_FLOOR) -> list:
    """Truth, scalar multiples of it, and random multiplicative perturbations.

    Direction ``k`` is ``v_i * (1 + magnitudes[k % len(magnitudes)] * u)``
    with ``u`` uniform on ``[-1, 1]^m``, floored at ``floor``.
    """
    v_i = np.asarray(v_i, dtype=float)
    magnitudes = np.atleast_1d(np.asarray(magnitudes, dtype=float))
    grid = [v_i.copy()]
    grid += [a * v_i for a in scalars if a != 1.0]
    for k in range(n_directions):
        u = rng.uniform(-1.0, 1.0, v_i.size)
        grid.append(np.maximum(v_i * (1.0 + magnitudes[k % magnitudes.size] * u), floor))
    return grid


def _allocate(market, mechanism, solver_config, epsilon):
    if mechanism == "ceei":
        return solve_eg(market, solver_config).allocation
    if mechanism == "ceeqi":
        return solve_ceeqi(market, epsilon, solver_config, auto_orient=True).solution.allocation
    raise ValueError(f"unknown mechanism {mechanism!r}; expected 'ceei' or 'ceeqi'")


def max_misreport_gain(
    market: MarketInstance,
    i: int,
    mechanism: str = "ceei",
    grid: Optional[Sequence] = None,
    epsilon: float = 1e-4,
    solver_config: Optional[SolverConfig] = None,
    seed: int = 0,
):
    """Largest gain in true utility buyer ``i`` gets from a report in ``grid``.

    ``grid`` defaults to :func:`misreport_grid`; the first entry is taken as
    the truthful report. Returns ``(gain, best_report)``; ``gain >= 0``.
    """
    v_true = market.valuations[i]
    if grid is None:
        grid = misreport_grid(v_true, np.random.default_rng(seed))
    truthful = _allocate(market, mechanism, solver_config, epsilon)
    base = float(v_true @ truthful[i])
    best_gain, best_report = 0.0, np.array(v_true)
    for report in grid:
        report = np.asarray(report, dtype=float)
        if np.array_equal(report, v_true):
            continue
        v = market.valuations.copy()
        v[i] = report
        alloc = _allocate(market.replace(valuations=v), mechanism, solver_config, epsilon)
        gain = float(v_true @ alloc[i]) - base
        if gain > best_gain:
            best_gain, best_report = gain, report
    return best_gain, best_report


# -- SP-L curves -------------------------------------------------------------------------


@dataclass
class SplExperimentConfig:
    sizes: tuple = (10, 20, 40, 80)
    m: int = 5
    supply_rate: object = 0.2  # c_j, scalar or per item; s_j = c_j * n
    max_valuation: float = 1.0
    trials: int = 30
    scalars: tuple = SCALARS
    n_directions: int = 32
    magnitudes: tuple = MAGNITUDES
    epsilon: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if not self.sizes or any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ConfigError("sizes must be non-empty and strictly increasing")
        if self.sizes[0] < 2:
            raise ConfigError("sizes must be >= 2")
        self.scalars = tuple(float(a) for a in self.scalars)
        self.magnitudes = tuple(float(a) for a in np.atleast_1d(self.magnitudes))
        if 1.0 not in self.scalars:
            self.scalars += (1.0,)
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        rate = np.broadcast_to(np.asarray(self.supply_rate, dtype=float), (self.m,))
        if np.any(rate <= 0):
            raise ConfigError("supply_rate must be positive")
        if not self.max_valuation > VALUATION_FLOOR:
            raise ConfigError(f"max_valuation must exceed {VALUATION_FLOOR}")

    @classmethod
    def from_dict(cls, doc: dict) -> "SplExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown SP-L config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def supplies(self, n: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.supply_rate, dtype=float), (self.m,)) * n

    def sample_market(self, n: int, rng) -> MarketInstance:
        """Uniform valuations on [floor, vbar]^m and alternating class labels."""
        v = rng.uniform(VALUATION_FLOOR, self.max_valuation, (n, self.m))
        return make_market(v, supplies=self.supplies(n), groups=np.arange(n) % 2,
                           max_valuation=self.max_valuation)


@dataclass
class SplCurve:
    mechanism: str
    records: list  # per size: n, mean_gain, max_gain, stderr, trials, failures
    slope: float  # least-squares slope of log(mean gain) against log(n)
    trials: list = field(default_factory=list, repr=False)

    def means(self) -> np.ndarray:
        return np.array([r["mean_gain"] for r in self.records])

    def stderrs(self) -> np.ndarray:
        return np.array([r["stderr"] for r in self.records])

    def stochastically_decreasing(self, k: float = 2.0) -> bool:
        """``mean(n_next) <= mean(n) + k * stderr`` for each consecutive size pair."""
        mu, se = self.means(), self.stderrs()
        return all(mu[t + 1] <= mu[t] + k * max(se[t], se[t + 1]) for t in range(len(mu) - 1))

    def to_dict(self) -> dict:
        slope = None if np.isnan(self.slope) else self.slope
        return {"mechanism": self.mechanism, "slope": slope, "records": self.records}


def _fit_slope(sizes, means) -> float:
    sizes, means = np.asarray(sizes, dtype=float), np.asarray(means, dtype=float)
    ok = means > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(sizes[ok]), np.log(means[ok]), 1)[0])


def spl_curve(
    config: SplExperimentConfig,
    mechanism: str = "ceei",
    solver_config: Optional[SolverConfig] = None,
    on_trial: Optional[Callable[[dict], None]] = None,
) -> SplCurve:
    """Misreport gain of one sampled buyer per trial, aggregated per market size."""
    records, trials = [], []
    for n in config.sizes:
        gains, failures = [], 0
        for t in range(config.trials):
            rng = np.random.default_rng([config.seed, n, t])
            market = config.sample_market(n, rng)
            i = int(rng.integers(n))
            grid = misreport_grid(market.valuations[i], rng, config.scalars, config.n_directions,
                                  config.magnitudes)
            rec = {"mechanism": mechanism, "n": n, "trial": t, "buyer": i}
            try:
                gain, _ = max_misreport_gain(market, i, mechanism, grid, config.epsilon, solver_config)
                gains.append(gain)
                rec["gain"] = gain
            except FairMarketsError as exc:
                failures += 1
                rec["error"] = f"{type(exc).__name__}: {exc}"
                log.warning("trial n=%d t=%d failed: %s", n, t, exc)
            trials.append(rec)
            if on_trial is not None:
                on_trial(rec)
        g = np.array(gains)
        records.append({
            "n": n,
            "mean_gain": float(g.mean()) if g.size else float("nan"),
            "max_gain": float(g.max()) if g.size else float("nan"),
            "stderr": float(g.std(ddof=1) / np.sqrt(g.size)) if g.size > 1 else 0.0,
            "trials": int(g.size),
            "failures": failures,
        })
    slope = _fit_slope([r["n"] for r in records], [r["mean_gain"] for r in records])
    return SplCurve(mechanism=mechanism, records=records, slope=slope, trials=trials)


# -- price impact -----------------------------------------------------------------------


@dataclass
class PriceImpactReport:
    buyer: int
    base_prices: np.ndarray  # CEEI prices without the buyer
    bound: np.ndarray  # B_i / s_j
    n_reports: int
    violations: list  # (report index, item, excess)
    max_excess: float  # worst signed excursion outside the interval (<= 0 when clean)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        out = asdict(self)
        out["base_prices"] = self.base_prices.tolist()
        out["bound"] = self.bound.tolist()
        out["passed"] = self.passed
        return out


def price_impact_bound_check(
    market: MarketInstance,
    i: int,
    reports: Optional[Sequence] = None,
    n_reports: int = 50,
    tol: float = 1e-6,
    seed: int = 0,
    solver_config: Optional[SolverConfig] = None,
    raise_on_violation: bool = True,
) -> PriceImpactReport:
    """Check ``p_j <= p'_j <= p_j + B_i / s_j`` for every report of buyer ``i``.

    ``p`` are the CEEI prices without ``i``; ``p'`` the prices with ``i``
    reporting each candidate. Reports default to ``n_reports`` uniform draws
    on ``[floor, vbar]^m``. Raises :class:`BoundViolation` on the first
    violating item unless ``raise_on_violation`` is false.
    """
    if market.n < 2:
        raise ValueError("price impact needs at least two buyers")
    base = solve_eg(market.drop_buyer(i), solver_config).prices
    bound = market.budgets[i] / market.supplies
    if reports is None:
        rng = np.random.default_rng(seed)
        reports = rng.uniform(VALUATION_FLOOR, market.max_valuation, (n_reports, market.m))
    violations, worst = [], -np.inf
    for k, report in enumerate(reports):
        v = market.valuations.copy()
        v[i] = report
        p = solve_eg(market.replace(valuations=v), solver_config).prices
        below = base - p
        above = p - (base + bound)
        excess = np.maximum(below, above)
        worst = max(worst, float(excess.max()))
        for j in np.flatnonzero(excess > tol):
            violations.append((k, int(j), float(excess[j])))
            if raise_on_violation:
                raise BoundViolation(int(j), float(excess[j]))
    return PriceImpactReport(
        buyer=i,
        base_prices=base,
        bound=bound,
        n_reports=len(reports),
        violations=violations,
        max_excess=worst,
    )


# -- EqEEI manipulation scenario -----------------------------------------------------------


@dataclass
class TwoItemConfig:
    """Item A is worth 1 to everyone; item B's value is uniform per class."""

    n_per_group: int = 20
    low: tuple = (0.0, 0.9)
    high: tuple = (1.1, 2.0)
    seed: int = 0
    lam: float = 100.0
    report_grid: tuple = tuple(np.round(np.linspace(0.1, 2.0, 20), 10))
    max_buyers: int = 3  # wrong-item buyers searched, largest regret first
    symmetric: bool = False  # class 1 copies class 0's B values

    def market(self) -> MarketInstance:
        rng = np.random.default_rng(self.seed)
        k = self.n_per_group
        b0 = rng.uniform(*self.low, k)
        b1 = b0.copy() if self.symmetric else rng.uniform(*self.high, k)
        b = np.maximum(np.concatenate([b0, b1]), VALUATION_FLOOR)
        v = np.column_stack([np.ones(2 * k), b])
        return make_market(
            v,
            supplies=np.full(2, float(k)),
            groups=np.repeat([0, 1], k),
            max_valuation=max(2.0, float(b.max())),
        )


@dataclass
class ScenarioReport:
    wrong_item_buyers: list
    regrets: list  # true-valuation regret of each wrong-item buyer
    best_buyer: Optional[int]
    best_gain: float
    best_report: Optional[list]
    truthful_utility: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


def _eqeei_true_utility(market, i, report, debias_config, solver_config):
    v = market.valuations.copy()
    v[i] = report
    res = eqeei(market.replace(valuations=v), debias_config, solver_config)
    return float(market.valuations[i] @ res.allocation[i])


def eqeei_misreport_scenario(
    config: Optional[TwoItemConfig] = None,
    solver_config: Optional[SolverConfig] = None,
    require_wrong_item: bool = True,
) -> ScenarioReport:
    """Find buyers EqEEI hands the wrong item and search their best misreport.

    A buyer holds the wrong item when its pooled bundle is not a demanded
    bundle under its true valuation at the EqEEI prices (regret below
    ``-1e-6``). For the ``config.max_buyers`` worst-off such buyers, reports ``(1, b)`` over
    ``config.report_grid`` are tried and the largest gain in true utility is
    kept. Raises :class:`ScenarioDegenerate` when no buyer is misallocated,
    unless ``require_wrong_item`` is false.
    """
    config = config or TwoItemConfig()
    market = config.market()
    dc = DebiasConfig(lam=config.lam)
    res = eqeei(market, dc, solver_config)
    prices = res.solution.prices
    regrets = np.array([regret(market, i, res.allocation, prices, 1.0) for i in range(market.n)])
    wrong = np.flatnonzero(regrets < -1e-6)
    if wrong.size == 0:
        if require_wrong_item:
            raise ScenarioDegenerate("no buyer received the wrong item; re-seed the construction")
        return ScenarioReport([], [], None, 0.0, None, None)
    best = (None, 0.0, None, None)
    for i in wrong[np.argsort(regrets[wrong], kind="stable")][: config.max_buyers]:
        truthful = float(market.valuations[i] @ res.allocation[i])
        for b in config.report_grid:
            report = np.array([1.0, max(float(b), VALUATION_FLOOR)])
            gain = _eqeei_true_utility(market, i, report, dc, solver_config) - truthful
            if gain > best[1]:
                best = (int(i), gain, report.tolist(), truthful)
    return ScenarioReport(
        wrong_item_buyers=wrong.tolist(),
        regrets=regrets[wrong].tolist(),
        best_buyer=best[0],
        best_gain=float(best[1]),
        best_report=best[2],
        truthful_utility=best[3],
    )


def write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
