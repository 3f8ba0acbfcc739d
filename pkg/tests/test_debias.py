import json

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from fairmarkets import (
    DebiasConfig,
    EqEEI,
    UnbalancedGroups,
    ValuationDebiaser,
    allocation_distribution_distance,
    compute_metrics,
    debias_valuations,
    eqeei,
    make_market,
    mmd_squared,
    solve_eg,
    synth_market,
    verify_equilibrium,
)
from fairmarkets.debias import debias_objective, median_bandwidth, pool_pairs
from fairmarkets.exceptions import DimensionMismatch, EmptySample

FAST = DebiasConfig(lam=100.0, steps=300)


def direct_mmd(a, b, h):
    k = lambda x, y: np.exp(-np.sum((np.asarray(x) - np.asarray(y)) ** 2) / (2 * h * h))
    kaa = np.mean([[k(x, y) for y in a] for x in a])
    kbb = np.mean([[k(x, y) for y in b] for x in b])
    kab = np.mean([[k(x, y) for y in b] for x in a])
    return kaa - 2 * kab + kbb


def test_mmd_examples():
    assert mmd_squared([[1, 0], [0, 1]], [[0, 1], [1, 0]], 1.0) == pytest.approx(0.0, abs=1e-15)
    assert mmd_squared([[0.0]], [[1.0]], 1.0) == pytest.approx(2 - 2 * np.exp(-0.5))
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
    assert mmd_squared(a, b, 0.7) == pytest.approx(mmd_squared(b, a, 0.7))
    assert mmd_squared(a, b, 0.7) == pytest.approx(direct_mmd(a, b, 0.7))


def test_mmd_errors():
    with pytest.raises(EmptySample):
        mmd_squared(np.zeros((0, 2)), [[1.0, 2.0]], 1.0)
    with pytest.raises(DimensionMismatch):
        mmd_squared([[1.0]], [[1.0, 2.0]], 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.1, 1.0, (5, 3))
    v_hat = v + rng.normal(0, 0.1, (5, 3))
    groups = np.array([0, 1, 0, 1, 1])
    lam, h = rng.uniform(0.5, 50), rng.uniform(0.3, 1.5)
    _, grad, _ = debias_objective(v_hat, v, groups, lam, h)
    num = np.zeros_like(v)
    eps = 1e-6
    for idx in np.ndindex(v.shape):
        e = np.zeros_like(v)
        e[idx] = eps
        num[idx] = (debias_objective(v_hat + e, v, groups, lam, h)[0]
                    - debias_objective(v_hat - e, v, groups, lam, h)[0]) / (2 * eps)
    assert np.max(np.abs(grad - num)) <= 1e-4 * np.max(np.abs(num))


def test_symmetric_market_is_fixed_point():
    market = synth_market(10, 4, 0.0, seed=3)
    res = debias_valuations(market)
    assert res.frobenius_distance == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_array_equal(res.v_hat, market.valuations)


def test_lambda_zero_snaps_raw_matching():
    rng = np.random.default_rng(1)
    v = rng.uniform(0.1, 1.0, (6, 3))
    groups = np.array([0, 0, 0, 1, 1, 1])
    res = debias_valuations(make_market(v, groups=groups), DebiasConfig(lam=0.0))
    cost = ((v[:3, None, :] - v[None, 3:, :]) ** 2).sum(-1)
    rows, cols = linear_sum_assignment(cost)
    for r, c in zip(rows, cols):
        np.testing.assert_allclose(res.v_hat[r], 0.5 * (v[r] + v[3 + c]))


def test_snap_invariants():
    market = synth_market(12, 5, 0.4, seed=2)
    res = debias_valuations(market, FAST)
    for a, b in res.matching:
        assert market.groups[a] == 0 and market.groups[b] == 1
        assert np.array_equal(res.v_hat[a], res.v_hat[b])
    assert res.v_hat.min() >= 0.01
    g = market.groups
    assert mmd_squared(res.v_hat[g == 0], res.v_hat[g == 1], res.bandwidth) == pytest.approx(0, abs=1e-12)
    delta = market.valuations - res.v_hat
    assert res.one_inf_distance == pytest.approx(np.abs(delta).sum(axis=1).max())
    json.dumps(res.to_dict())


def test_unbalanced_groups_rejected():
    with pytest.raises(UnbalancedGroups):
        debias_valuations(make_market(np.ones((3, 2)), groups=[0, 0, 1]))


def test_mmd_monotone_in_lambda():
    market = synth_market(16, 6, 0.3, seed=5)
    mmds = [debias_valuations(market, DebiasConfig(lam=lam, steps=500)).mmd_final
            for lam in (0.0, 1.0, 10.0, 100.0, 1000.0)]
    assert all(b <= a + 1e-8 for a, b in zip(mmds, mmds[1:]))


def test_median_bandwidth():
    assert median_bandwidth([[0.0], [1.0], [3.0]]) == pytest.approx(2.0)
    assert median_bandwidth([[1.0, 1.0]]) == 1.0


def test_pool_pairs_preserves_columns():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(4, 3))
    pooled = pool_pairs(x, [(0, 2), (1, 3)])
    np.testing.assert_allclose(pooled.sum(axis=0), x.sum(axis=0))
    np.testing.assert_array_equal(pooled[0], pooled[2])


def test_eqeei_guarantees():
    market = synth_market(16, 6, 0.4, seed=9)
    sol, pooled, res = eqeei(market, FAST)
    assert allocation_distribution_distance(market, pooled, res.matching) == 0.0
    np.testing.assert_allclose(pooled.sum(axis=0), sol.allocation.sum(axis=0))
    market_hat = market.replace(valuations=res.v_hat)
    assert verify_equilibrium(market_hat, (pooled, sol.prices), 1e-6)


def test_eqeei_on_symmetric_market_matches_ceei():
    market = synth_market(12, 5, 0.0, seed=4)
    out = eqeei(market, FAST)
    ceei = solve_eg(market)
    rep = compute_metrics(market, out.allocation, out.solution.prices, reference=ceei.allocation,
                          matching=out.debias.matching)
    base = compute_metrics(market, ceei.allocation, ceei.prices)
    for key in ("regret", "envy", "scaled_envy", "pareto_gap", "geometric_mean_gap", "efficiency_gap"):
        assert rep.summary()[key] == pytest.approx(base.summary()[key], abs=1e-6)
    for a, b in out.debias.matching:
        np.testing.assert_array_equal(out.allocation[a], out.allocation[b])


def test_transformer_and_estimator():
    market = synth_market(8, 4, 0.3, seed=1)
    tr = ValuationDebiaser(steps=200)
    v_hat = tr.fit_transform(market.valuations, market.groups)
    np.testing.assert_array_equal(v_hat, tr.v_hat_)
    with pytest.raises(ValueError):
        tr.transform(market.valuations + 1.0)
    est = EqEEI(steps=200).fit(market)
    assert allocation_distribution_distance(market, est.allocation_, est.matching_) == 0.0
    assert est.get_params()["steps"] == 200


def test_config_validation():
    with pytest.raises(ValueError):
        DebiasConfig(lam=-1.0)
    with pytest.raises(ValueError):
        DebiasConfig(kernel_bandwidth="silverman")
    with pytest.raises(ValueError):
        DebiasConfig(steps=0)
