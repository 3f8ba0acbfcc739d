"""Fair division through Fisher markets: CEEI, EqEEI and CEEqI."""

from .ceeqi import CEEqI, CeeqiResult, solve_ceeqi, utility_disparity_at
from .data import (
    FactorizationModel,
    LogisticProbe,
    MatrixFactorization,
    ProbeReport,
    RatingsDataset,
    complete_valuations,
    item_stereotype_scores,
    load_ratings,
    make_biased_market,
    probe_auc,
    select_top,
    synth_market,
    train_factorization,
)
from .debias import (
    DebiasConfig,
    DebiasResult,
    EqEEI,
    ValuationDebiaser,
    debias_valuations,
    eqeei,
    mmd_squared,
)
from .eg import (
    EisenbergGaleSolver,
    SolverConfig,
    brute_force_eg,
    eg_objective,
    elementwise_max_beta,
    is_budget_feasible,
    prices_from_utility_prices,
    solve_eg,
)
from .exceptions import *  # noqa: F401,F403
from .market import (
    EquilibriumSolution,
    MarketInstance,
    demand,
    equilibrium_residuals,
    load_market,
    make_market,
    save_market,
    validate_market,
    verify_equilibrium,
)
from .metrics import (
    MetricsReport,
    allocation_distribution_distance,
    compute_metrics,
    efficiency_gap,
    envy,
    geometric_mean_gap,
    group_utilities,
    pareto_gap,
    regret,
    scaled_envy,
)
from .simplex import solve_lp
from .spl import (
    SplCurve,
    SplExperimentConfig,
    TwoItemConfig,
    eqeei_misreport_scenario,
    max_misreport_gain,
    price_impact_bound_check,
    spl_curve,
)

__version__ = "0.1.0"
