"""Command-line front end: ``fairmarkets {solve,pipeline,sweep,spl,metrics}``.

Exit codes: 0 success, 1 other library error, 2 invalid input, 3 solver
non-convergence, 4 CEEqI orientation or bracket failure, 5 training
divergence. The error class name is printed to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .ceeqi import solve_ceeqi
from .data import (
    complete_valuations,
    item_stereotype_scores,
    load_ratings,
    probe_auc,
    select_top,
    train_factorization,
)
from .debias import DebiasConfig, debias_matrix, eqeei
from .eg import SolverConfig, solve_eg
from .exceptions import (
    BracketFailure,
    ConfigError,
    FairMarketsError,
    NotConverged,
    TrainingDiverged,
    ValidationError,
    WrongOrientation,
)
from .market import load_market, make_market, market_to_dict, save_market
from .metrics import compute_metrics
from .spl import (
    SplExperimentConfig,
    TwoItemConfig,
    eqeei_misreport_scenario,
    price_impact_bound_check,
    spl_curve,
    write_jsonl,
)

log = logging.getLogger("fairmarkets")

EXIT_CODES = (
    (ValidationError, 2),
    (NotConverged, 3),
    (WrongOrientation, 4),
    (BracketFailure, 4),
    (TrainingDiverged, 5),
    (FairMarketsError, 1),
)


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


class _Run:
    """Owns the output directory and the manifest, which is written up front."""

    def __init__(self, args, inputs):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        config = {k: v for k, v in vars(args).items() if k != "func"}
        self.manifest = {
            "command": args.command,
            "config": config,
            "inputs": {str(p): _sha256(p) for p in inputs},
            "version": _version(),
            "seed": args.seed,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "outputs": [],
        }
        self._write_manifest()

    def _write_manifest(self):
        _dump(self.out / "manifest.json", self.manifest)

    def write(self, name, obj) -> Path:
        path = _dump(self.out / name, obj)
        self.record(path)
        return path

    def record(self, path):
        self.manifest["outputs"].append(str(Path(path).relative_to(self.out)))
        self._write_manifest()


def _solver_config(args) -> SolverConfig:
    return SolverConfig(max_iterations=args.max_iterations, seed=args.seed)


def _balanced_indices(groups, seed):
    """Sorted row indices keeping all of the smaller class and an equal random share of the larger."""
    groups = np.asarray(groups)
    g0, g1 = np.flatnonzero(groups == 0), np.flatnonzero(groups == 1)
    if len(g0) == len(g1):
        return np.arange(len(groups))
    rng = np.random.default_rng(seed)
    small, big = (g0, g1) if len(g0) < len(g1) else (g1, g0)
    log.warning("subsampled the larger class from %d to %d rows", len(big), len(small))
    return np.sort(np.concatenate([small, rng.choice(big, size=len(small), replace=False)]))


def _balanced_subsample(market, seed):
    """Drop random members of the larger class so both classes have equal size."""
    keep = _balanced_indices(market.groups, seed)
    if len(keep) == market.n:
        return market
    ids = None if market.buyer_ids is None else [market.buyer_ids[k] for k in keep]
    return make_market(
        market.valuations[keep],
        budgets=market.budgets[keep],
        supplies=market.supplies,
        groups=market.groups[keep],
        max_valuation=market.max_valuation,
        buyer_ids=ids,
    )


# -- commands -------------------------------------------------------------------------


def cmd_solve(args) -> int:
    run = _Run(args, [args.market])
    market = load_market(args.market)
    solver = _solver_config(args)
    extra = {"mechanism": args.mechanism}
    if args.mechanism == "ceei":
        sol = solve_eg(market, solver)
        allocation, report = sol.allocation, compute_metrics(market, sol.allocation, sol.prices)
    elif args.mechanism == "eqeei":
        if args.balance:
            market = _balanced_subsample(market, args.seed)
        equal = market.with_budgets(np.ones(market.n))
        res = eqeei(equal, DebiasConfig(lam=args.lam, seed=args.seed), solver)
        sol, allocation = res.solution, res.allocation
        reference = solve_eg(equal, solver).allocation
        report = compute_metrics(equal, allocation, sol.prices, reference=reference,
                                 matching=res.debias.matching)
        extra["debias"] = res.debias.to_dict()
        extra["pooled_allocation"] = allocation.tolist()
        extra["kept_buyers"] = list(market.buyer_ids) if market.buyer_ids else None
    else:
        res = solve_ceeqi(market, args.epsilon, solver, relative=args.relative,
                          auto_orient=args.auto_orient)
        sol, allocation = res.solution, res.solution.allocation
        reference = solve_eg(market.with_budgets(np.ones(market.n)), solver).allocation
        report = compute_metrics(res.market, allocation, sol.prices, reference=reference)
        extra.update(b_bar=res.b_bar, disparity=res.disparity, trace=res.to_dict()["trace"],
                     solves_used=res.solves_used, flipped=res.flipped, monotone=res.monotone)
    run.write("equilibrium.json", {**sol.to_dict(), **extra})
    run.write("metrics.json", {**report.to_dict(), "summary": report.summary()})
    if not args.quiet:
        print(json.dumps(report.summary(), sort_keys=True))
    return 0


def cmd_pipeline(args) -> int:
    run = _Run(args, [args.ratings])
    data = load_ratings(args.ratings)
    if args.probe and data.groups is None:
        raise ConfigError("--probe needs a group column in the ratings file")
    if args.debias_vectors and not args.probe:
        raise ConfigError("--debias-vectors needs --probe")
    model, train_mse, val_mse = train_factorization(
        data, d=args.d, weight_decay=args.decay, epochs=args.epochs,
        learning_rate=args.learning_rate, seed=args.seed, holdout_fraction=args.holdout,
    )
    run.write("model.json", {**model.to_dict(), "train_mse": train_mse, "validation_mse": val_mse})
    users, items = select_top(data, args.top_users, args.top_items)
    v = complete_valuations(model, users, items)
    groups = np.zeros(len(users), dtype=int) if data.groups is None else data.groups[users]
    market = make_market(v, groups=groups, buyer_ids=[data.users[u] for u in users])
    save_market(market, run.out / "market.json")
    run.record(run.out / "market.json")
    if args.probe:
        report = probe_auc(model.user_vectors, data.groups, split_seed=args.seed)
        run.write("probe.json", report.to_dict())
        ranked = item_stereotype_scores(model, report)
        if args.debias_vectors:
            keep = _balanced_indices(data.groups, args.seed)
            res = debias_matrix(model.user_vectors[keep], data.groups[keep],
                                DebiasConfig(lam=args.lam, seed=args.seed, floor=-np.inf))
            after = probe_auc(res.v_hat, data.groups[keep], split_seed=args.seed,
                              pairs=res.matching)
            run.write("probe_debiased.json", {**after.to_dict(), "users": keep.tolist(),
                                              "mmd_final": res.mmd_final})
        run.write("stereotypes.json", [
            {"item": item, "score": score, "label": label} for item, score, label in ranked
        ])
    if not args.quiet:
        print(json.dumps({"train_mse": train_mse, "validation_mse": val_mse,
                          "users": len(users), "items": len(items)}))
    return 0


def _parse_grid(text: str) -> np.ndarray:
    """``a,b,c`` or ``start:stop:num`` (inclusive linspace)."""
    try:
        if ":" in text:
            start, stop, num = text.split(":")
            grid = np.linspace(float(start), float(stop), int(num))
        else:
            grid = np.array([float(t) for t in text.split(",") if t.strip()])
    except ValueError:
        raise ConfigError(f"cannot parse --b1-grid {text!r}") from None
    if grid.size == 0 or np.any(grid <= 0):
        raise ConfigError("--b1-grid needs positive budgets")
    return grid


def budget_sweep(market, grid, solver_config=None) -> list:
    """Rows ``(b1, U0, U1, disparity, geometric_mean)`` for each class-1 budget."""
    rows, bids = [], None
    for b1 in grid:
        priced = market.group_budgets(b1)
        sol, bids = solve_eg(priced, solver_config, initial_bids=bids, return_bids=True)
        u = sol.utilities
        u0, u1 = u[market.groups == 0].mean(), u[market.groups == 1].mean()
        rows.append({
            "b1": float(b1),
            "U0": float(u0),
            "U1": float(u1),
            "disparity": float(u1 - u0),
            "geometric_mean": float(np.exp(np.mean(np.log(u)))),
        })
    return rows


def cmd_sweep(args) -> int:
    run = _Run(args, [args.market])
    market = load_market(args.market)
    rows = budget_sweep(market, _parse_grid(args.b1_grid), _solver_config(args))
    path = run.out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    run.record(path)
    if args.plot:
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            log.warning("matplotlib is not installed; wrote CSV only")
        else:
            b = [r["b1"] for r in rows]
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.plot(b, [r["U0"] for r in rows], label="class 0")
            ax.plot(b, [r["U1"] for r in rows], label="class 1")
            ax.plot(b, [r["geometric_mean"] for r in rows], "--", label="geometric mean")
            ax.set_xlabel("class-1 budget")
            ax.set_ylabel("mean utility")
            ax.legend()
            fig.tight_layout()
            fig.savefig(run.out / "sweep.png", dpi=120)
            plt.close(fig)
            run.record(run.out / "sweep.png")
    if not args.quiet:
        print(f"{len(rows)} rows -> {path}")
    return 0


_SPL_EXTRA_KEYS = {"mechanisms", "price_bound", "eqeei_scenario"}


def cmd_spl(args) -> int:
    run = _Run(args, [args.config])
    try:
        doc = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError("SP-L config must be a JSON object")
    doc.setdefault("seed", args.seed)
    extras = {k: doc.pop(k) for k in list(doc) if k in _SPL_EXTRA_KEYS}
    config = SplExperimentConfig.from_dict(doc)
    mechanisms = extras.get("mechanisms", ["ceei"])
    if not isinstance(mechanisms, list) or not set(mechanisms) <= {"ceei", "ceeqi"}:
        raise ConfigError("mechanisms must be a list drawn from 'ceei', 'ceeqi'")
    pb = extras.get("price_bound")
    if pb and (not isinstance(pb, dict) or set(pb) - {"markets", "reports", "n", "tol"}):
        raise ConfigError("price_bound takes keys markets, reports, n, tol")
    sc = extras.get("eqeei_scenario")
    if sc:
        try:
            two = TwoItemConfig(**({} if sc is True else sc))
        except TypeError as exc:
            raise ConfigError(f"eqeei_scenario: {exc}") from None
    solver = _solver_config(args)
    summary, records = {"curves": []}, []
    for mech in mechanisms:
        curve = spl_curve(config, mech, solver)
        records += curve.trials
        summary["curves"].append({**curve.to_dict(),
                                  "stochastically_decreasing": curve.stochastically_decreasing()})
    if pb:
        n_viol, worst = 0, -np.inf
        n = int(pb.get("n", 3))
        for k in range(int(pb.get("markets", 10))):
            market = config.sample_market(n, np.random.default_rng([config.seed, 7919, k]))
            rep = price_impact_bound_check(market, 0, n_reports=int(pb.get("reports", 50)),
                                           tol=float(pb.get("tol", 1e-6)), seed=config.seed + k,
                                           solver_config=solver, raise_on_violation=False)
            n_viol += len(rep.violations)
            worst = max(worst, rep.max_excess)
            records.append({"check": "price_bound", "market": k, "violations": len(rep.violations),
                            "max_excess": rep.max_excess})
        summary["price_bound"] = {"violations": n_viol, "max_excess": worst}
    if sc:
        summary["eqeei_scenario"] = eqeei_misreport_scenario(two, solver).to_dict()
    write_jsonl(records, run.out / "trials.jsonl")
    run.record(run.out / "trials.jsonl")
    run.write("summary.json", summary)
    if not args.quiet:
        print(json.dumps({c["mechanism"]: c["slope"] for c in summary["curves"]}))
    return 0


def cmd_metrics(args) -> int:
    inputs = [args.market, args.allocation] + ([args.reference] if args.reference else [])
    run = _Run(args, inputs)
    market = load_market(args.market)
    doc = json.loads(Path(args.allocation).read_text())
    if doc.get("flipped"):
        market = market.replace(groups=1 - market.groups)
    if "b_bar" in doc:
        market = market.group_budgets(doc["b_bar"])
    elif doc.get("mechanism") == "eqeei":
        market = market.with_budgets(np.ones(market.n))
    allocation = np.array(doc.get("pooled_allocation", doc["allocation"]), dtype=float)
    if "prices" not in doc:
        raise ConfigError("allocation file needs a 'prices' entry")
    if args.reference:
        reference = np.array(json.loads(Path(args.reference).read_text())["allocation"], dtype=float)
    else:
        reference = solve_eg(market.with_budgets(np.ones(market.n)), _solver_config(args)).allocation
    matching = doc.get("debias", {}).get("matching")
    report = compute_metrics(market, allocation, np.array(doc["prices"], dtype=float),
                             reference=reference, matching=matching)
    run.write("metrics.json", {**report.to_dict(), "summary": report.summary()})
    if not args.quiet:
        print(json.dumps(report.summary(), sort_keys=True))
    return 0


# -- argument parsing -------------------------------------------------------------------


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name, "message": record.getMessage()})


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--json-logs", action="store_true", help="log as JSON lines on stderr")
    common.add_argument("--max-iterations", type=int, default=10_000)

    parser = argparse.ArgumentParser(prog="fairmarkets", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="solve a market with a mechanism")
    p.add_argument("market")
    p.add_argument("--mechanism", choices=["ceei", "eqeei", "ceeqi"], default="ceei")
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--lambda", dest="lam", type=float, default=100.0)
    p.add_argument("--relative", action="store_true", help="CEEqI: epsilon relative to max(U0, U1)")
    p.add_argument("--auto-orient", action="store_true", help="CEEqI: swap labels if class 1 is ahead")
    p.add_argument("--balance", action="store_true", help="EqEEI: subsample the larger class")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("pipeline", parents=[common], help="ratings CSV to market and probe audit")
    p.add_argument("ratings")
    p.add_argument("--top-users", type=int, default=100)
    p.add_argument("--top-items", type=int, default=100)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--decay", type=float, default=1e-5)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--probe", action="store_true", help="fit the class probe on user vectors")
    p.add_argument("--debias-vectors", action="store_true",
                   help="with --probe: also debias a class-balanced subsample of the user vectors and re-probe")
    p.add_argument("--lambda", dest="lam", type=float, default=100.0, help="MMD weight for --debias-vectors")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sweep", parents=[common], help="utilities as the class-1 budget varies")
    p.add_argument("market")
    p.add_argument("--b1-grid", default="1:2:11", help="a,b,c or start:stop:num")
    p.add_argument("--plot", action="store_true", help="also render sweep.png")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("spl", parents=[common], help="run incentive experiments from a JSON config")
    p.add_argument("config")
    p.set_defaults(func=cmd_spl)

    p = sub.add_parser("metrics", parents=[common], help="recompute metrics for an allocation")
    p.add_argument("market")
    p.add_argument("allocation", help="JSON with 'allocation' and 'prices' (e.g. equilibrium.json)")
    p.add_argument("--reference", help="JSON with the reference 'allocation' (default: equal-budget CEEI)")
    p.set_defaults(func=cmd_metrics)
    return parser


def _setup_logging(args):
    handler = logging.StreamHandler(sys.stderr)
    if args.json_logs:
        handler.setFormatter(_JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("fairmarkets")
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING if args.quiet else logging.INFO)
    root.propagate = False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args)
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"InputError: {exc}", file=sys.stderr)
        return 2
    except FairMarketsError as exc:
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
