"""Market data types, validation, demand and equilibrium verification."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import (
    DimensionMismatch,
    InvalidGroupLabel,
    MarketFileError,
    NonPositiveBudget,
    NonPositiveSupply,
    NonPositiveValuation,
    UnboundedDemand,
    ValuationAboveMax,
)

FEAS_TOL = 1e-6
VERIFY_TOL = 1e-6


def _as_float_array(a, ndim, name):
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise DimensionMismatch(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MarketInstance:
    """A linear Fisher market with binary protected-class labels.

    Arrays are copied and frozen on construction. Use :func:`validate_market`
    (or :func:`make_market`) to enforce positivity and label invariants.
    """

    valuations: np.ndarray
    budgets: np.ndarray
    supplies: np.ndarray
    groups: np.ndarray
    max_valuation: float
    buyer_ids: Optional[tuple] = field(default=None)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "valuations", _as_float_array(self.valuations, 2, "valuations"))
        set_(self, "budgets", _as_float_array(self.budgets, 1, "budgets"))
        set_(self, "supplies", _as_float_array(self.supplies, 1, "supplies"))
        groups = np.array(self.groups)
        if groups.ndim != 1:
            raise DimensionMismatch(f"groups must be 1-dimensional, got shape {groups.shape}")
        groups.setflags(write=False)
        set_(self, "groups", groups)
        set_(self, "max_valuation", float(self.max_valuation))
        if self.buyer_ids is not None:
            set_(self, "buyer_ids", tuple(str(b) for b in self.buyer_ids))

    @property
    def n(self) -> int:
        return self.valuations.shape[0]

    @property
    def m(self) -> int:
        return self.valuations.shape[1]

    def replace(self, **changes) -> "MarketInstance":
        """Copy with some fields swapped; ``max_valuation`` follows new valuations."""
        if "valuations" in changes and "max_valuation" not in changes:
            changes["max_valuation"] = max(self.max_valuation, float(np.max(changes["valuations"])))
        return dataclasses.replace(self, **changes)

    def with_budgets(self, budgets) -> "MarketInstance":
        return self.replace(budgets=budgets)

    def with_valuations(self, valuations) -> "MarketInstance":
        return self.replace(valuations=valuations)

    def group_budgets(self, b1: float, b0: float = 1.0) -> "MarketInstance":
        """Budget ``b0`` for class 0 and ``b1`` for class 1."""
        return self.with_budgets(np.where(self.groups == 1, float(b1), float(b0)))

    def drop_buyer(self, i: int) -> "MarketInstance":
        keep = np.arange(self.n) != i
        ids = None if self.buyer_ids is None else tuple(np.array(self.buyer_ids)[keep])
        return dataclasses.replace(
            self,
            valuations=self.valuations[keep],
            budgets=self.budgets[keep],
            groups=self.groups[keep],
            buyer_ids=ids,
        )

    def members(self, z: int) -> np.ndarray:
        return np.flatnonzero(self.groups == z)


def validate_market(market: MarketInstance) -> MarketInstance:
    """Check every market invariant and return the instance unchanged.

    Raises the most specific :class:`~fairmarkets.exceptions.ValidationError`
    subclass for the first violation found (row-major for valuations).
    """
    v, B, s, z = market.valuations, market.budgets, market.supplies, market.groups
    n, m = v.shape
    if B.shape != (n,):
        raise DimensionMismatch(f"budgets has length {B.shape[0]}, expected n={n}")
    if s.shape != (m,):
        raise DimensionMismatch(f"supplies has length {s.shape[0]}, expected m={m}")
    if z.shape != (n,):
        raise DimensionMismatch(f"groups has length {z.shape[0]}, expected n={n}")
    if n == 0 or m == 0:
        raise DimensionMismatch("market needs at least one buyer and one item")

    bad = np.argwhere(~(v > 0))
    if bad.size:
        i, j = bad[0]
        raise NonPositiveValuation(i, j, float(v[i, j]))
    if not np.isfinite(market.max_valuation) or market.max_valuation <= 0:
        raise ValueError(f"max_valuation must be a positive finite number, got {market.max_valuation}")
    over = np.argwhere(~(v <= market.max_valuation))
    if over.size:
        i, j = over[0]
        raise ValuationAboveMax(i, j, float(v[i, j]), market.max_valuation)
    bad = np.flatnonzero(~((B > 0) & np.isfinite(B)))
    if bad.size:
        raise NonPositiveBudget(bad[0], float(B[bad[0]]))
    bad = np.flatnonzero(~((s > 0) & np.isfinite(s)))
    if bad.size:
        raise NonPositiveSupply(bad[0], float(s[bad[0]]))
    for i, label in enumerate(z.tolist()):
        if isinstance(label, bool) or label not in (0, 1):
            raise InvalidGroupLabel(i, label)
    return market


def make_market(
    valuations,
    budgets=None,
    supplies=None,
    groups=None,
    max_valuation: Optional[float] = None,
    buyer_ids: Optional[Sequence[str]] = None,
) -> MarketInstance:
    """Build and validate a market; budgets, supplies default to 1, groups to 0."""
    v = np.asarray(valuations, dtype=float)
    if v.ndim != 2:
        raise DimensionMismatch(f"valuations must be 2-dimensional, got shape {v.shape}")
    n, m = v.shape
    if max_valuation is None:
        max_valuation = float(np.max(v)) if v.size else 1.0
    market = MarketInstance(
        valuations=v,
        budgets=np.ones(n) if budgets is None else budgets,
        supplies=np.ones(m) if supplies is None else supplies,
        groups=np.zeros(n, dtype=int) if groups is None else np.asarray(groups),
        max_valuation=max_valuation,
        buyer_ids=buyer_ids,
    )
    validate_market(market)
    if market.groups.dtype.kind != "i":
        market = dataclasses.replace(market, groups=market.groups.astype(int))
    return market


# -- JSON market files ---------------------------------------------------------

_TOP_KEYS = {"supplies", "buyers", "max_valuation"}
_BUYER_KEYS = {"id", "group", "budget", "valuations"}


def market_from_dict(doc: dict) -> MarketInstance:
    if not isinstance(doc, dict):
        raise MarketFileError("market document must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise MarketFileError(f"unknown top-level keys: {sorted(unknown)}")
    for key in ("supplies", "buyers"):
        if key not in doc:
            raise MarketFileError(f"missing key {key!r}")
    buyers = doc["buyers"]
    if not isinstance(buyers, list) or not isinstance(doc["supplies"], list):
        raise MarketFileError("'supplies' and 'buyers' must be arrays")
    rows, budgets, groups, ids = [], [], [], []
    for k, b in enumerate(buyers):
        if not isinstance(b, dict):
            raise MarketFileError(f"buyer {k} must be an object")
        unknown = set(b) - _BUYER_KEYS
        if unknown:
            raise MarketFileError(f"buyer {k}: unknown keys {sorted(unknown)}")
        missing = _BUYER_KEYS - set(b)
        if missing:
            raise MarketFileError(f"buyer {k}: missing keys {sorted(missing)}")
        if not isinstance(b["valuations"], list) or len(b["valuations"]) != len(doc["supplies"]):
            raise DimensionMismatch(
                f"buyer {k}: expected {len(doc['supplies'])} valuations"
            )
        rows.append(b["valuations"])
        budgets.append(b["budget"])
        groups.append(b["group"])
        ids.append(str(b["id"]))
    if len(set(ids)) != len(ids):
        raise MarketFileError("buyer ids must be unique")
    try:
        v = np.array(rows, dtype=float).reshape(len(rows), len(doc["supplies"]))
        budgets = np.array(budgets, dtype=float)
        supplies = np.array(doc["supplies"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise MarketFileError(f"non-numeric entry: {exc}") from None
    return make_market(
        v,
        budgets=budgets,
        supplies=supplies,
        groups=np.array(groups, dtype=object),
        max_valuation=doc.get("max_valuation"),
        buyer_ids=ids,
    )


def market_to_dict(market: MarketInstance) -> dict:
    ids = market.buyer_ids or tuple(str(i) for i in range(market.n))
    return {
        "supplies": market.supplies.tolist(),
        "max_valuation": market.max_valuation,
        "buyers": [
            {
                "id": ids[i],
                "group": int(market.groups[i]),
                "budget": float(market.budgets[i]),
                "valuations": market.valuations[i].tolist(),
            }
            for i in range(market.n)
        ],
    }


def load_market(path) -> MarketInstance:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MarketFileError(f"{path}: invalid JSON ({exc})") from None
    return market_from_dict(doc)


def save_market(market: MarketInstance, path) -> None:
    Path(path).write_text(json.dumps(market_to_dict(market), indent=2) + "\n")


# -- equilibrium containers ----------------------------------------------------


@dataclass(frozen=True)
class Residuals:
    clearing: float
    budget: float
    bang_per_buck: float
    feasibility: float = 0.0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(eq=False)
class EquilibriumSolution:
    allocation: np.ndarray
    prices: np.ndarray
    utility_prices: np.ndarray
    utilities: np.ndarray
    residuals: Residuals
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "allocation": self.allocation.tolist(),
            "prices": self.prices.tolist(),
            "utility_prices": self.utility_prices.tolist(),
            "utilities": self.utilities.tolist(),
            "residuals": self.residuals.as_dict(),
            "iterations": int(self.iterations),
        }


@dataclass(frozen=True)
class VerificationReport:
    passed: bool
    residuals: Residuals
    tol: float
    failures: tuple = ()

    def __bool__(self):
        return self.passed


def check_allocation(market: MarketInstance, allocation, feas_tol: float = FEAS_TOL) -> np.ndarray:
    """Coerce ``allocation`` to an n x m array and enforce x >= 0 and supply caps."""
    x = np.asarray(allocation, dtype=float)
    if x.shape != (market.n, market.m):
        raise DimensionMismatch(f"allocation has shape {x.shape}, expected {(market.n, market.m)}")
    if np.any(x < -feas_tol):
        raise ValueError("allocation has negative entries")
    over = x.sum(axis=0) - market.supplies
    if np.any(over > feas_tol):
        j = int(np.argmax(over))
        raise ValueError(f"allocation over-assigns item {j} by {over[j]:.3g}")
    return x


def check_prices(market: MarketInstance, prices) -> np.ndarray:
    p = np.asarray(prices, dtype=float)
    if p.shape != (market.m,):
        raise DimensionMismatch(f"prices has shape {p.shape}, expected ({market.m},)")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("prices must be finite and nonnegative")
    return p


def utilities(market: MarketInstance, allocation) -> np.ndarray:
    return np.einsum("ij,ij->i", market.valuations, np.asarray(allocation, dtype=float))


def demand(market: MarketInstance, i: int, prices, budget: Optional[float] = None):
    """Utility-maximising affordable bundle for buyer ``i``.

    Spends greedily by descending bang-per-buck, capping each item at its
    supply; ties go to the lower item index. Returns ``(bundle, utility)``.
    """
    p = check_prices(market, prices)
    budget = float(market.budgets[i] if budget is None else budget)
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    v = market.valuations[i]
    zero = np.flatnonzero((p <= 0) & (v > 0))
    if zero.size:
        raise UnboundedDemand(i, zero[0])
    order = np.argsort(-(v / p), kind="stable")
    bundle = np.zeros(market.m)
    left = budget
    for j in order:
        if left <= 0:
            break
        cost = p[j] * market.supplies[j]
        if cost <= left:
            bundle[j] = market.supplies[j]
            left -= cost
        else:
            bundle[j] = left / p[j]
            left = 0.0
    return bundle, float(v @ bundle)


def equilibrium_residuals(market: MarketInstance, allocation, prices) -> Residuals:
    x = np.asarray(allocation, dtype=float)
    p = np.asarray(prices, dtype=float)
    sold = x.sum(axis=0)
    s = market.supplies
    clearing = np.where(p > 0, np.abs(sold - s), np.maximum(sold - s, 0.0))
    spend = x @ p
    budget = np.abs(spend - market.budgets)
    with np.errstate(divide="ignore", invalid="ignore"):
        bpb = market.valuations / p
    best = bpb.max(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        slack = np.where(x > 0, (best - bpb) / best, 0.0)
    slack = np.nan_to_num(slack, nan=np.inf)
    feas = max(float(np.max(-x, initial=0.0)), 0.0)
    return Residuals(
        clearing=float(np.max(clearing, initial=0.0)),
        budget=float(np.max(budget, initial=0.0)),
        bang_per_buck=float(np.max(slack, initial=0.0)),
        feasibility=feas,
    )


def verify_equilibrium(market: MarketInstance, solution, tol: float = VERIFY_TOL) -> VerificationReport:
    """Check clearing, budget exhaustion and bang-per-buck optimality.

    ``solution`` is an :class:`EquilibriumSolution` or an ``(allocation,
    prices)`` pair. Never raises on a failing check.
    """
    if isinstance(solution, EquilibriumSolution):
        x, p = solution.allocation, solution.prices
    else:
        x, p = solution
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if x.shape != (market.n, market.m) or p.shape != (market.m,):
        raise DimensionMismatch("solution dimensions do not match the market")
    r = equilibrium_residuals(market, x, p)
    failures = tuple(
        name
        for name, value in (
            ("clearing", r.clearing),
            ("budget", r.budget),
            ("bang_per_buck", r.bang_per_buck),
            ("feasibility", r.feasibility),
        )
        if not value <= tol
    )
    return VerificationReport(passed=not failures, residuals=r, tol=tol, failures=failures)
