"""Command-line interface.

Subcommands: optimize, rebalance, backtest, sweep, fetch, synth.
Exit codes: 0 success, 2 usage or validation problem, 1 internal failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import backtest as bt
from . import data as datamod
from .allocator import (
    Allocation,
    ProblemInstance,
    solve,
    verify_kkt,
    yield_breakdown,
)
from .errors import StakeloopError
from .irm import MarketState
from .rebalance import HOLD, FeeModel, solve_with_fees
from .units import SECONDS_PER_DAY, SECONDS_PER_HOUR


def _sig(value: float, digits: int = 6) -> str:
    return f"{value:.{digits}g}"


def _parse_duration(text: str) -> int:
    """Durations like 1h, 4h, 1d, or plain seconds."""
    text = text.strip().lower()
    if text.endswith("h"):
        return int(float(text[:-1]) * SECONDS_PER_HOUR)
    if text.endswith("d"):
        return int(float(text[:-1]) * SECONDS_PER_DAY)
    return int(text)


def _load_json_arg(text: str) -> dict:
    path = Path(text)
    if path.exists():
        return json.loads(path.read_text())
    return json.loads(text)


def _markets_from_args(args) -> list[MarketState]:
    raws: list[dict] = []
    if args.markets:
        loaded = _load_json_arg(args.markets)
        raws.extend(loaded if isinstance(loaded, list) else [loaded])
    for item in args.market or []:
        raws.append(json.loads(item))
    if args.dataset:
        series = datamod.load_snapshots(Path(args.dataset))
        if args.at is None:
            snap = series.snapshots[-1]
        else:
            matches = [s for s in series.snapshots if s.timestamp == args.at]
            if not matches:
                raise StakeloopError(f"no snapshot at timestamp {args.at}")
            snap = matches[0]
        if args.staking_rate is None:
            args.staking_rate = snap.staking_rate
        for meta in series.markets:
            raws.append(
                {
                    "id": meta.market_id,
                    "_state": bt.market_state_at(
                        meta, snap.markets[meta.market_id], snap.timestamp, None
                    ),
                }
            )
    markets = []
    for raw in raws:
        if "_state" in raw:
            markets.append(raw["_state"])
            continue
        markets.append(
            MarketState(
                market_id=str(raw["id"]),
                supplied=float(raw["supplied"]),
                borrowed=float(raw["borrowed"]),
                max_ltv=float(raw["max_ltv"]),
                irm=datamod.irm_from_dict(raw["irm"]),
            )
        )
    if not markets:
        raise StakeloopError("no markets given (use --markets, --market, or --dataset)")
    return markets


def _print_allocation(alloc: Allocation, p: ProblemInstance, args) -> None:
    base, carries = yield_breakdown(alloc, p)
    report = verify_kkt(alloc, p, tol=args.kkt_tol)
    if args.json:
        payload = {
            "regime": alloc.regime,
            "lambda_star": alloc.lambda_star,
            "expected_yield": alloc.expected_yield,
            "unleveraged": alloc.unleveraged,
            "exposures": dict(zip(alloc.market_ids, alloc.exposures)),
            "carry": dict(zip(alloc.market_ids, carries)),
            "kkt_passed": report.passed,
        }
        print(json.dumps(payload, indent=2))
        return
    print(f"regime          {alloc.regime}")
    print(f"lambda*         {_sig(alloc.lambda_star)}")
    print(f"expected yield  {_sig(alloc.expected_yield)} per year")
    print(f"unleveraged     {_sig(alloc.unleveraged)}")
    for mid, x, carry in zip(alloc.market_ids, alloc.exposures, carries):
        note = "" if carry > 0 or x > 0 else "  (carry non-positive)"
        print(f"  {mid}: exposure {_sig(x)}, carry {_sig(carry)}/year{note}")
    print(f"kkt             {'pass' if report.passed else 'FAIL'} (tol {report.tol:g})")


def _cmd_optimize(args) -> int:
    markets = _markets_from_args(args)
    if args.staking_rate is None:
        raise StakeloopError("--staking-rate is required")
    p = ProblemInstance.uniform(
        markets, args.l_max, args.staking_rate, budget=args.budget
    )
    wants_plan = args.current is not None
    if args.command == "rebalance" and not wants_plan:
        raise StakeloopError("rebalance requires --current")
    if wants_plan:
        raw = _load_json_arg(args.current)
        current = Allocation.from_position(
            market_ids=[m.market_id for m in markets],
            exposures=[float(raw["exposures"][m.market_id]) for m in markets],
            unleveraged=float(raw["unleveraged"]),
        )
        fees = FeeModel(args.gamma_plus, args.gamma_minus, args.horizon_days / 365.0)
        plan = solve_with_fees(p, current, fees)
        if args.json:
            print(
                json.dumps(
                    {
                        "direction": plan.direction,
                        "cost": plan.cost,
                        "net_gain_rate": plan.net_gain_rate,
                        "exposures": dict(zip(plan.target.market_ids, plan.target.exposures)),
                        "unleveraged": plan.target.unleveraged,
                    },
                    indent=2,
                )
            )
            return 0
        print(f"direction       {plan.direction}")
        print(f"cost            {_sig(plan.cost)}")
        print(f"net gain rate   {_sig(plan.net_gain_rate)} per year")
        if plan.direction != HOLD:
            _print_allocation(plan.target, p, args)
        return 0
    _print_allocation(solve(p), p, args)
    return 0


def _fees_from_args(args) -> FeeModel:
    return FeeModel(args.gamma_plus, args.gamma_minus, args.horizon_days / 365.0)


def _config_from_args(args) -> bt.BacktestConfig:
    irm = datamod.irm_from_dict(json.loads(args.irm)) if args.irm else None
    return bt.BacktestConfig(
        budget=args.budget,
        l_max=args.l_max,
        rebalance_frequency=_parse_duration(args.frequency),
        strategy=args.strategy,
        threshold=args.threshold_bps / 1e4,
        fees=_fees_from_args(args),
        smoothing_window=_parse_duration(args.smoothing),
        gate_net_of_costs=args.gate == "net",
        irm=irm,
    )


def _cmd_backtest(args) -> int:
    series = datamod.load_snapshots(Path(args.dataset))
    cfg = _config_from_args(args)
    result = bt.run_backtest(series, cfg)
    if args.out:
        paths = datamod.emit_report(result, Path(args.out))
        for path in paths:
            print(f"wrote {path}")
    summary = (
        f"apy {_sig(result.apy * 100)}% | rebalances {result.rebalance_count} | "
        f"fees {_sig(result.total_fees_paid)}"
    )
    if args.json:
        print(
            json.dumps(
                {
                    "apy": result.apy,
                    "rebalance_count": result.rebalance_count,
                    "total_fees_paid": result.total_fees_paid,
                }
            )
        )
    else:
        print(summary)
    return 0


def _parse_float_list(text: str) -> list[float]:
    values = [float(x) for x in text.split(",") if x.strip()]
    if not values:
        raise StakeloopError("empty list")
    return values


def _cmd_sweep(args) -> int:
    series = datamod.load_snapshots(Path(args.dataset))
    cfg = _config_from_args(args)
    budgets = _parse_float_list(args.budgets)
    out = Path(args.out) if args.out else None
    if args.l_max_list:
        levels = _parse_float_list(args.l_max_list)
        curves = bt.sweep_leverage(series, cfg, levels, budgets, max_workers=args.workers)
        for level, curve in curves.items():
            if out:
                datamod.emit_report(curve, out, label=f"lmax_{level:g}")
            for budget, value in curve:
                print(f"l_max {level:g} budget {_sig(budget)} apy {_sig(value * 100)}%")
        return 0
    curve = bt.sweep_budgets(series, cfg, budgets, max_workers=args.workers)
    if out:
        datamod.emit_report(curve, out, label="apy")
    for budget, value in curve:
        print(f"budget {_sig(budget)} apy {_sig(value * 100)}%")
    return 0


def _cmd_synth(args) -> int:
    if args.scenario:
        spec = datamod.scenario(args.scenario)
    elif args.spec:
        raw = _load_json_arg(args.spec)
        markets = tuple(
            datamod.SyntheticMarketSpec(**m) for m in raw.pop("markets")
        )
        spec = datamod.SyntheticSpec(markets=markets, **raw)
    else:
        raise StakeloopError("use --scenario or --spec")
    series, manifest = datamod.generate_synthetic(spec, seed=args.seed)
    paths = datamod.save_snapshots(series, manifest, Path(args.out))
    for path in paths:
        print(f"wrote {path}")
    return 0


def _cmd_fetch(args) -> int:
    from .fetch import fetch_market_history

    out = fetch_market_history(
        market_ids=[mid for mid in args.ids.split(",") if mid],
        start=args.start,
        end=args.end,
        out_dir=Path(args.out),
        endpoint=args.endpoint,
        staking_endpoint=args.staking_endpoint,
        staking_rate=args.staking_rate,
        api_key=args.api_key,
        chain=args.chain,
        parallelism=args.workers,
    )
    print(f"wrote dataset to {out}")
    return 0


def _add_fee_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--gamma-plus", type=float, default=0.0, help="fee rate on collateral increases")
    parser.add_argument("--gamma-minus", type=float, default=0.0, help="fee rate on collateral decreases")
    parser.add_argument("--horizon-days", type=float, default=1.0, help="holding horizon for fee amortization")


def _add_market_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--markets", help="JSON file or literal with a list of market objects")
    parser.add_argument("--market", action="append", help="inline JSON market object (repeatable)")
    parser.add_argument("--dataset", help="dataset directory to read market state from")
    parser.add_argument("--at", type=int, default=None, help="snapshot timestamp when using --dataset")
    parser.add_argument("--staking-rate", "-s", type=float, default=None)
    parser.add_argument("--budget", type=float, required=True)
    parser.add_argument("--l-max", type=float, default=5.0, help="leverage cap per market (default 5)")
    parser.add_argument("--kkt-tol", type=float, default=1e-8)
    parser.add_argument("--current", help="JSON with current exposures and unleveraged holding")


def _add_backtest_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", required=True)
    parser.add_argument("--budget", type=float, required=True)
    parser.add_argument("--l-max", type=float, default=5.0)
    parser.add_argument("--frequency", default="1h", help="rebalance frequency (1h, 1d, or seconds)")
    parser.add_argument(
        "--strategy",
        choices=[bt.FIXED_FREQUENCY, bt.DYNAMIC, bt.STAKING_ONLY],
        default=bt.FIXED_FREQUENCY,
    )
    parser.add_argument("--threshold-bps", type=float, default=20.0, help="dynamic strategy gate")
    parser.add_argument("--smoothing", default="1d", help="borrow-rate smoothing window")
    parser.add_argument("--gate", choices=["net", "gross"], default="net",
                        help="compare the dynamic gate net or gross of rebalance costs")
    parser.add_argument("--irm", help="fallback rate model JSON when data lacks rate_at_target")
    _add_fee_flags(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stakeloop",
        description="Optimal capital allocation and backtesting for leveraged staking",
    )
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("--config", help="JSON file with default flag values")
    parser.add_argument("--print-config", action="store_true", help="dump resolved options and exit")
    sub = parser.add_subparsers(dest="command", required=True)

    opt = sub.add_parser("optimize", help="one-shot optimal allocation")
    _add_market_flags(opt)
    _add_fee_flags(opt)
    opt.set_defaults(func=_cmd_optimize)

    reb = sub.add_parser("rebalance", help="fee-aware rebalancing plan from a current position")
    _add_market_flags(reb)
    _add_fee_flags(reb)
    reb.set_defaults(func=_cmd_optimize)

    back = sub.add_parser("backtest", help="replay a strategy over a dataset")
    _add_backtest_flags(back)
    back.add_argument("--out", help="directory for report files")
    back.set_defaults(func=_cmd_backtest)

    sweep = sub.add_parser("sweep", help="APY versus budget (and leverage) curves")
    _add_backtest_flags(sweep)
    sweep.add_argument("--budgets", required=True, help="comma-separated budget list")
    sweep.add_argument("--l-max-list", help="comma-separated leverage caps")
    sweep.add_argument("--out", help="directory for curve files")
    sweep.add_argument("--workers", type=int, default=4)
    sweep.set_defaults(func=_cmd_sweep)

    synth = sub.add_parser("synth", help="write a deterministic synthetic dataset")
    synth.add_argument("--scenario", choices=datamod.scenario_names())
    synth.add_argument("--spec", help="JSON file or literal with a synthetic spec")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=_cmd_synth)

    fetch = sub.add_parser("fetch", help="download market history into a dataset")
    fetch.add_argument("--ids", required=True, help="comma-separated market ids")
    fetch.add_argument("--start", type=int, required=True, help="UTC seconds")
    fetch.add_argument("--end", type=int, required=True, help="UTC seconds")
    fetch.add_argument("--endpoint", default="https://api.morpho.org/graphql")
    fetch.add_argument("--staking-endpoint", help="GraphQL source for daily staking APRs")
    fetch.add_argument("--staking-rate", type=float, help="flat staking rate fallback")
    fetch.add_argument("--api-key")
    fetch.add_argument("--chain", default="ethereum")
    fetch.add_argument("--workers", type=int, default=4)
    fetch.add_argument("--out", required=True)
    fetch.set_defaults(func=_cmd_fetch)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args_list = list(sys.argv[1:] if argv is None else argv)

    # Config files supply defaults; explicit flags win.
    if "--config" in args_list:
        idx = args_list.index("--config")
        try:
            config = json.loads(Path(args_list[idx + 1]).read_text())
        except (IndexError, OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config: {exc}")
        parser.set_defaults(**{k.replace("-", "_"): v for k, v in config.items()})
        for sub_action in parser._subparsers._group_actions:  # noqa: SLF001
            for sub_parser in sub_action.choices.values():
                known = {a.dest for a in sub_parser._actions}  # noqa: SLF001
                sub_parser.set_defaults(
                    **{
                        k.replace("-", "_"): v
                        for k, v in config.items()
                        if k.replace("-", "_") in known
                    }
                )

    args = parser.parse_args(args_list)
    if args.print_config:
        resolved = {
            k: v for k, v in vars(args).items() if k not in ("func", "print_config")
        }
        print(json.dumps(resolved, indent=2, default=str))
        return 0
    try:
        return args.func(args)
    except (StakeloopError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - internal failure path
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
