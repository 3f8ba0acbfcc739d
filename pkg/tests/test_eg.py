import numpy as np
import pytest

from fairmarkets import (
    EisenbergGaleSolver,
    NotConverged,
    SolverConfig,
    ZeroUtility,
    brute_force_eg,
    eg_objective,
    elementwise_max_beta,
    is_budget_feasible,
    make_market,
    prices_from_utility_prices,
    solve_eg,
    verify_equilibrium,
)
from fairmarkets.exceptions import DimensionMismatch, OracleScaleExceeded

from conftest import random_market


def test_single_buyer():
    sol = solve_eg(make_market([[5.0]]))
    np.testing.assert_allclose(sol.allocation, [[1.0]])
    np.testing.assert_allclose(sol.prices, [1.0])
    np.testing.assert_allclose(sol.utilities, [5.0])
    np.testing.assert_allclose(sol.utility_prices, [0.2])


def test_kkt_example(kkt_market):
    sol = solve_eg(kkt_market)
    np.testing.assert_allclose(sol.allocation, np.eye(2), atol=1e-9)
    np.testing.assert_allclose(sol.prices, [1.0, 1.0], atol=1e-9)
    np.testing.assert_allclose(sol.utility_prices, [0.5, 0.5], atol=1e-9)


def test_shared_item():
    sol = solve_eg(make_market([[1.0], [1.0]]))
    np.testing.assert_allclose(sol.prices, [2.0])
    np.testing.assert_allclose(sol.allocation, [[0.5], [0.5]])
    np.testing.assert_allclose(sol.utilities, [0.5, 0.5])


def test_objective_examples():
    assert eg_objective(make_market([[5.0]]), [[1.0]]) == pytest.approx(np.log(5))
    assert eg_objective(make_market([[1.0], [1.0]]), [[0.5], [0.5]]) == pytest.approx(2 * np.log(0.5))
    with pytest.raises(ZeroUtility):
        eg_objective(make_market([[1.0], [1.0]]), np.zeros((2, 1)))


def test_brute_force_examples(kkt_market):
    assert eg_objective(kkt_market, brute_force_eg(kkt_market).allocation) == pytest.approx(
        eg_objective(kkt_market, solve_eg(kkt_market).allocation), abs=1e-6)
    np.testing.assert_allclose(brute_force_eg(make_market([[2.0]])).allocation, [[1.0]])
    shared = make_market([[1.0], [1.0]])
    assert eg_objective(shared, brute_force_eg(shared).allocation) == pytest.approx(2 * np.log(0.5), abs=1e-6)
    with pytest.raises(OracleScaleExceeded):
        brute_force_eg(make_market(np.ones((3, 3))))


@pytest.mark.parametrize("seed", range(30))
def test_random_markets_verify(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 21, size=2)
    market = random_market(rng, n, m, budgets=True, supplies=True)
    sol = solve_eg(market)
    assert verify_equilibrium(market, sol, 1e-6)
    # money conservation
    assert sol.prices @ market.supplies == pytest.approx(market.budgets.sum(), rel=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_budget_scale_equivariance(seed):
    rng = np.random.default_rng(100 + seed)
    market = random_market(rng, 5, 4, budgets=True)
    a = solve_eg(market)
    b = solve_eg(market.with_budgets(3.0 * market.budgets))
    np.testing.assert_allclose(b.prices, 3.0 * a.prices, rtol=1e-6)
    np.testing.assert_allclose(b.utilities, a.utilities, rtol=1e-6)


def test_warm_start_and_bids(kkt_market):
    sol, bids = solve_eg(kkt_market, return_bids=True)
    np.testing.assert_allclose(bids.sum(axis=1), kkt_market.budgets)
    again = solve_eg(kkt_market, initial_bids=bids)
    np.testing.assert_allclose(again.prices, sol.prices)


def test_not_converged_carries_diagnostics():
    rng = np.random.default_rng(3)
    market = random_market(rng, 30, 30)
    with pytest.raises(NotConverged) as info:
        solve_eg(market, SolverConfig(max_iterations=2, refine=False))
    assert info.value.iterations >= 1
    assert info.value.residuals is not None


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(max_iterations=0)
    with pytest.raises(ValueError):
        SolverConfig(convergence_tol=0.0)


def test_prices_from_utility_prices(kkt_market):
    np.testing.assert_allclose(prices_from_utility_prices(kkt_market, [0.5, 0.5]), [1, 1])
    np.testing.assert_allclose(prices_from_utility_prices(make_market([[3.0, 7.0]]), [1.0]), [3, 7])
    with pytest.raises(ValueError):
        prices_from_utility_prices(kkt_market, [0.0, 0.5])


def test_budget_feasibility_examples():
    rng = np.random.default_rng(7)
    market = random_market(rng, 4, 3, budgets=True)
    beta = solve_eg(market).utility_prices
    ok, witness = is_budget_feasible(market, beta)
    assert ok
    np.testing.assert_allclose(witness.sum(axis=0), market.supplies, rtol=1e-6)
    assert is_budget_feasible(market, 0.5 * beta)[0]
    assert not is_budget_feasible(market, 2.0 * beta)[0]


def test_elementwise_max():
    np.testing.assert_allclose(elementwise_max_beta([0.5, 0.2], [0.3, 0.4]), [0.5, 0.4])
    b = np.array([0.1, 0.7])
    np.testing.assert_array_equal(elementwise_max_beta(b, b), b)
    with pytest.raises(DimensionMismatch):
        elementwise_max_beta([1.0], [1.0, 2.0])


def test_estimator_api(kkt_market):
    est = EisenbergGaleSolver(verification_tol=1e-7)
    assert est.get_params()["verification_tol"] == 1e-7
    est.fit(kkt_market)
    np.testing.assert_allclose(est.prices_, [1, 1], atol=1e-9)
    np.testing.assert_allclose(est.predict(kkt_market), est.allocation_)
