import numpy as np
import pytest

from fairmarkets import (
    EmptyGroup,
    allocation_distribution_distance,
    compute_metrics,
    efficiency_gap,
    envy,
    geometric_mean_gap,
    group_utilities,
    make_market,
    pareto_gap,
    regret,
    scaled_envy,
    solve_eg,
)
from fairmarkets.exceptions import DegenerateAllocation, InvalidMatching, ZeroDemandUtility, ZeroReferenceWelfare

from conftest import random_market

SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])


def grid_pareto_gap(market, x_hat, steps=100_000):
    """Improvement oracle for 2x2 markets: grid over buyer 0's share of item 1.

    For a fixed share the welfare is linear in buyer 0's share of item 2, so
    the best value sits at an end of the interval the utility floors allow.
    """
    v, s = market.valuations, market.supplies
    u_hat = np.einsum("ij,ij->i", v, x_hat)
    a = np.linspace(0.0, s[0], steps + 1)
    lo = np.maximum((u_hat[0] - v[0, 0] * a) / v[0, 1], 0.0)
    hi = np.minimum(s[1] - (u_hat[1] - v[1, 0] * (s[0] - a)) / v[1, 1], s[1])
    ok = lo <= hi + 1e-12
    best = 0.0
    for b in (lo[ok], hi[ok]):
        sw = v[0, 0] * a[ok] + v[0, 1] * b + v[1, 0] * (s[0] - a[ok]) + v[1, 1] * (s[1] - b)
        best = max(best, sw.max())
    return u_hat.sum() / best


def test_regret_examples(kkt_market):
    p = np.ones(2)
    sol = solve_eg(kkt_market)
    assert regret(kkt_market, 0, sol.allocation, sol.prices) == pytest.approx(0, abs=1e-9)
    assert regret(kkt_market, 0, np.zeros((2, 2)), p) == pytest.approx(-1.0)
    x = np.array([[0.0, 1.0], [0.0, 0.0]])
    assert regret(kkt_market, 0, x, p) == pytest.approx(-0.5)
    with pytest.raises(ZeroDemandUtility):
        regret(kkt_market, 0, x, p, budget=0.0)


def test_envy_examples(kkt_market):
    sol = solve_eg(kkt_market)
    assert envy(kkt_market, 0, sol.allocation) == pytest.approx(0, abs=1e-9)
    assert envy(kkt_market, 0, SWAP) == pytest.approx(0.5)
    assert envy(make_market([[1.0, 2.0]]), 0, [[1.0, 1.0]]) == 0.0
    with pytest.raises(DegenerateAllocation):
        envy(kkt_market, 0, np.zeros((2, 2)))


def test_scaled_envy_examples(kkt_market):
    # buyer 0 owns item 2 (worth 1) and discounts buyer 1's item 1 (worth 2) by 0.5
    assert scaled_envy(kkt_market, 0, SWAP, budgets=[1.0, 2.0]) == pytest.approx(0.0)
    rng = np.random.default_rng(0)
    m = random_market(rng, 5, 3)
    x = rng.dirichlet(np.ones(5), size=3).T
    for i in range(5):
        assert scaled_envy(m, i, x) == pytest.approx(envy(m, i, x))


def test_pareto_gap_swapped_matches_grid_oracle(kkt_market):
    gap = pareto_gap(kkt_market, SWAP)
    assert gap == pytest.approx(grid_pareto_gap(kkt_market, SWAP), abs=1e-4)
    assert gap == pytest.approx(0.5, abs=1e-9)  # swapped welfare 2 against 4


@pytest.mark.parametrize("seed", range(15))
def test_pareto_gap_random_2x2(seed):
    rng = np.random.default_rng(seed)
    market = random_market(rng, 2, 2, supplies=True)
    share = rng.uniform(0.05, 0.95, 2)
    x = np.vstack([share, 1 - share]) * market.supplies
    assert pareto_gap(market, x) == pytest.approx(grid_pareto_gap(market, x), abs=1e-4)


def test_pareto_gap_ceei_is_one():
    rng = np.random.default_rng(1)
    market = random_market(rng, 8, 6, budgets=True, supplies=True)
    sol = solve_eg(market)
    assert pareto_gap(market, sol.allocation) == pytest.approx(1.0, abs=1e-6)


def test_geometric_mean_gap_examples(kkt_market):
    x = np.eye(2)
    assert geometric_mean_gap(kkt_market, x, x) == 1.0
    m = make_market([[1.0], [1.0]], supplies=[10.0])
    assert geometric_mean_gap(m, [[1.0], [4.0]], [[2.0], [2.0]]) == pytest.approx(1.0)
    assert geometric_mean_gap(m, [[1.0], [2.0]], [[2.0], [2.0]]) == pytest.approx(np.sqrt(0.5))


def test_efficiency_gap_examples():
    m = make_market([[1.0], [1.0]], supplies=[10.0])
    assert efficiency_gap(m, [[1.0], [2.0]], [[1.0], [2.0]]) == 1.0
    assert efficiency_gap(m, [[1.0], [2.0]], [[2.0], [2.0]]) == pytest.approx(0.75)
    with pytest.raises(ZeroReferenceWelfare):
        efficiency_gap(m, [[1.0], [2.0]], np.zeros((2, 1)))


def test_group_utilities():
    m = make_market([[2.0], [4.0]], groups=[0, 1], supplies=[2.0])
    assert group_utilities(m, [[1.0], [1.0]]) == (2.0, 4.0)
    with pytest.raises(EmptyGroup):
        group_utilities(make_market([[1.0], [1.0]]), [[0.5], [0.5]])
    sym = make_market([[2.0, 1.0], [1.0, 2.0], [2.0, 1.0], [1.0, 2.0]], groups=[0, 0, 1, 1])
    u0, u1 = group_utilities(sym, solve_eg(sym).allocation)
    assert u0 == pytest.approx(u1, abs=1e-6)


def test_allocation_distribution_distance():
    m = make_market(np.ones((2, 2)), groups=[0, 1])
    assert allocation_distribution_distance(m, np.full((2, 2), 0.5), [(0, 1)]) == 0.0
    assert allocation_distribution_distance(m, np.eye(2), [(0, 1)]) == 1.0
    with pytest.raises(InvalidMatching):
        allocation_distribution_distance(m, np.eye(2), [(1, 0)])


def test_permutation_invariance():
    rng = np.random.default_rng(4)
    market = random_market(rng, 6, 4, groups=[0, 1] * 3)
    sol = solve_eg(market)
    x = sol.allocation * rng.uniform(0.5, 1.0, sol.allocation.shape)
    rep = compute_metrics(market, x, sol.prices, reference=sol.allocation)
    perm = rng.permutation(6)
    pm = make_market(market.valuations[perm], groups=market.groups[perm])
    prep = compute_metrics(pm, x[perm], sol.prices, reference=sol.allocation[perm])
    np.testing.assert_allclose(prep.regret, rep.regret[perm])
    np.testing.assert_allclose(prep.envy, rep.envy[perm])
    assert prep.pareto_gap == pytest.approx(rep.pareto_gap, abs=1e-9)
    assert prep.geometric_mean_gap == pytest.approx(rep.geometric_mean_gap)
    assert prep.utility_disparity == pytest.approx(rep.utility_disparity)


def test_report_serialization(kkt_market):
    sol = solve_eg(kkt_market)
    rep = compute_metrics(kkt_market, sol.allocation, sol.prices)
    d = rep.to_dict()
    for key in ("regret", "envy", "scaled_envy", "pareto_gap", "geometric_mean_gap",
                "efficiency_gap", "group_utilities", "utility_disparity"):
        assert key in d
    summary = rep.summary()
    assert summary["envy"] <= 0 and summary["regret"] <= 0
