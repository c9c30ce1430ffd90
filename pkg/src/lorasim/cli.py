"""Experiment runner CLI: trace generation, profiling, runs, and RPS sweeps.

Exit codes: 0 success, 1 usage error, 2 runtime or configuration error.
Every command is deterministic given --seed and its input files.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import yaml

from . import costmodel, metrics, simengine, traces
from .config import ClusterConfig, ConfigError, load_config, with_overrides
from .domain import Adapter, OperatingPointTable

DEFAULT_RANKS = "8,16,32,64,128"


class UsageError(Exception):
    """Bad flag combination; exits with code 1 like argparse errors."""


class _Parser(argparse.ArgumentParser):
    """argparse stock behavior, but usage errors exit 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lorasim", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    gen = sub.add_parser("gen-trace", help="generate a workload trace file")
    gen.add_argument("--rps", type=float, required=True, help="target requests per second")
    gen.add_argument("--duration", type=float, default=600.0, help="trace length in seconds")
    gen.add_argument("--arrival", choices=traces.ARRIVALS, default="poisson")
    gen.add_argument("--popularity", choices=traces.POPULARITIES, default="uniform")
    gen.add_argument("--alpha", type=float, default=1.0,
                     help="popularity skew for power_law popularity")
    gen.add_argument("--ranks", default=DEFAULT_RANKS, help="comma-separated rank list")
    gen.add_argument("--adapters", type=int, default=None,
                     help="total adapter count, apportioned over ranks by --count-skew")
    gen.add_argument("--adapters-per-rank", type=int, default=None)
    gen.add_argument("--count-skew", type=float, default=1.0,
                     help="power-law skew for per-rank adapter counts")
    gen.add_argument("--prompt-tokens", type=int, default=512)
    gen.add_argument("--output-tokens", type=int, default=128)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="trace file to write (CSV)")
    gen.set_defaults(func=cmd_gen_trace)

    prof = sub.add_parser("profile", help="profile per-rank operating points under an SLO")
    prof.add_argument("--config", default=None, help="cluster config YAML for cost params")
    prof.add_argument("--slo", type=float, required=True, help="P95 TTFT SLO in seconds")
    prof.add_argument("--ranks", default=DEFAULT_RANKS)
    prof.add_argument("--tp", type=int, default=None)
    prof.add_argument("--profile-duration", type=float, default=120.0)
    prof.add_argument("--seed", type=int, default=0)
    prof.add_argument("--out", default=None, help="operating-points CSV to write")
    prof.set_defaults(func=cmd_profile)

    run = sub.add_parser("run", help="simulate a trace under placement/router policies")
    _add_run_flags(run)
    run.add_argument("--rps", type=float, default=None,
                     help="rescale the trace to this request rate")
    run.add_argument("--out", default="out", help="report directory")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="throughput-under-SLO sweep per policy")
    _add_run_flags(sweep)
    sweep.add_argument("--rps-min", type=float, required=True)
    sweep.add_argument("--rps-max", type=float, required=True)
    sweep.add_argument("--tol", type=float, default=0.05, help="relative search tolerance")
    sweep.add_argument("--out", default="out", help="report directory")
    sweep.set_defaults(func=cmd_sweep)
    return parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="cluster config YAML")
    p.add_argument("--trace", required=True, help="trace file (CSV or JSONL)")
    p.add_argument("--placement", default="loraserve",
                   help=f"comma-separated policies from {simengine.placement.POLICIES}")
    p.add_argument("--router", default="table",
                   help=f"comma-separated routers from {simengine.ROUTERS}")
    p.add_argument("--servers", type=int, default=None)
    p.add_argument("--tp", type=int, default=None)
    p.add_argument("--slo", type=float, default=None)
    p.add_argument("--rebalance-window", type=float, default=None)
    p.add_argument("--op-points", default=None, help="operating-points CSV from `profile`")
    p.add_argument("--profile-duration", type=float, default=120.0)
    p.add_argument("--seed", type=int, default=0)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) is None:
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lorasim: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, traces.TraceParseError, costmodel.CalibrationError,
            costmodel.ProfilingError, FileNotFoundError, OSError, ValueError,
            RuntimeError) as exc:
        print(f"lorasim: error: {exc}", file=sys.stderr)
        return 2


def cmd_gen_trace(args) -> int:
    ranks = _parse_ranks(args.ranks)
    if args.adapters is not None and args.adapters_per_rank is not None:
        raise UsageError("give either --adapters or --adapters-per-rank, not both")
    adapters_per_rank = args.adapters_per_rank
    if args.adapters is None and adapters_per_rank is None:
        adapters_per_rank = 5
    cfg = traces.TraceConfig(
        duration_seconds=args.duration,
        target_rps=args.rps,
        arrival=args.arrival,
        popularity=args.popularity,
        popularity_alpha=args.alpha,
        ranks=ranks,
        adapters_per_rank=adapters_per_rank,
        total_adapters=args.adapters,
        count_skew_alpha=args.count_skew,
        lengths=traces.LengthModel(
            kind="fixed", prompt=args.prompt_tokens, output=args.output_tokens
        ),
        seed=args.seed,
    )
    trace = traces.generate_trace(cfg)
    out = Path(args.out)
    traces.write_trace(trace, out)
    roster = traces.trace_adapters(cfg)
    sidecar = out.with_suffix(out.suffix + ".adapters.yaml")
    sidecar.write_text(
        yaml.safe_dump(
            {"adapters": [
                {"id": a.id, "rank": a.rank, "size_bytes": a.size_bytes}
                for a in roster
            ]},
            sort_keys=False,
        ),
        encoding="utf-8",
    )
    print(f"wrote {len(trace)} requests over {len(roster)} adapters to {out}")
    print(f"wrote adapter roster to {sidecar}")
    return 0


def cmd_profile(args) -> int:
    ranks = _parse_ranks(args.ranks)
    params = _cost_params(args)
    table = costmodel.profile_operating_points(
        params, args.slo, ranks,
        duration_seconds=args.profile_duration, seed=args.seed,
    )
    for rank in table.ranks():
        print(f"rank {rank:>4}: {table[rank]:.1f} tokens/s")
    if args.out:
        _write_op_points(table, Path(args.out))
        print(f"wrote operating points to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg, trace = _load_run_inputs(args)
    if args.rps is not None:
        trace = traces.scale_trace_rps(trace, args.rps)
    rps = _trace_rps(trace)
    combos = _policy_combos(args)
    results = []
    for label, policy, router in combos:
        result = simengine.run(trace, policy, router, cfg, seed=args.seed)
        results.append(metrics.LabeledResult(label=label, rps=rps, result=result))
        outcome = metrics.slo_attained(result, cfg.slo_seconds)
        p95 = f"{outcome.p95_ttft:.3f}s" if outcome.p95_ttft is not None else "n/a"
        print(
            f"{label:<16} rps={rps:.2f} p95_ttft={p95} timeouts={result.timed_out} "
            f"slo={'met' if outcome.attained else 'violated'}"
        )
    paths = metrics.emit_report(results, args.out)
    print(f"reports: {', '.join(str(p) for p in paths.values())}")
    return 0


def cmd_sweep(args) -> int:
    if args.rps_min > args.rps_max or args.rps_min <= 0:
        raise UsageError(
            f"need 0 < --rps-min <= --rps-max, got [{args.rps_min}, {args.rps_max}]"
        )
    cfg, trace = _load_run_inputs(args)
    combos = _policy_combos(args)
    rows = []
    outcomes: dict[str, float] = {}
    for label, policy, router in combos:

        def runner(rps: float, _policy=policy, _router=router):
            scaled = traces.scale_trace_rps(trace, rps)
            return simengine.run(scaled, _policy, _router, cfg, seed=args.seed)

        outcome = metrics.throughput_under_slo(
            runner, cfg.slo_seconds, args.rps_min, args.rps_max, rel_tol=args.tol
        )
        outcomes[label] = outcome.max_rps
        rows.append((label, outcome))
        flag = "" if outcome.monotone else " [non-monotone attainment]"
        print(f"{label:<16} max rps under SLO: {outcome.max_rps:.2f}{flag}")
    base = outcomes.get("loraserve")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweep_path = out / "sweep.csv"
    with sweep_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy", "max_rps_under_slo", "ratio_vs_loraserve", "monotone"])
        for label, outcome in rows:
            ratio = outcome.max_rps / base if base else ""
            writer.writerow([
                label, repr(outcome.max_rps),
                repr(ratio) if ratio != "" else "", int(outcome.monotone),
            ])
    print(f"wrote {sweep_path}")
    return 0


def _policy_combos(args) -> list[tuple[str, str, str]]:
    placements = [p.strip() for p in args.placement.split(",") if p.strip()]
    routers = [r.strip() for r in args.router.split(",") if r.strip()]
    for p in placements:
        if p not in simengine.placement.POLICIES:
            raise UsageError(
                f"unknown placement {p!r}; valid: {', '.join(simengine.placement.POLICIES)}"
            )
    for r in routers:
        if r not in simengine.ROUTERS:
            raise UsageError(
                f"unknown router {r!r}; valid: {', '.join(simengine.ROUTERS)}"
            )
    combos: list[tuple[str, str, str]] = []
    if "table" in routers:
        combos.extend((p, p, "table") for p in placements)
    if "toppings" in routers:
        # Placement is moot under full replication; one run covers it.
        combos.append(("toppings-oracle", "contiguous", "toppings"))
    return combos


def _load_run_inputs(args) -> tuple[ClusterConfig, list]:
    trace = traces.load_trace(args.trace)
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ClusterConfig(adapters=())
    if not cfg.adapters:
        sidecar = Path(args.trace).with_suffix(Path(args.trace).suffix + ".adapters.yaml")
        if not sidecar.exists():
            raise ConfigError(
                "no adapters in config and no adapter roster sidecar found at "
                f"{sidecar}; pass --config with an adapters section"
            )
        raw = yaml.safe_load(sidecar.read_text(encoding="utf-8"))
        adapters = tuple(
            Adapter(id=str(e["id"]), rank=int(e["rank"]), size_bytes=int(e["size_bytes"]))
            for e in raw["adapters"]
        )
        cfg = with_overrides(cfg, adapters=adapters)
    cfg = with_overrides(
        cfg,
        servers=args.servers,
        slo_seconds=args.slo,
        rebalance_window_seconds=getattr(args, "rebalance_window", None),
        tp=args.tp,
    )
    if args.op_points:
        cfg = with_overrides(cfg, operating_points=_read_op_points(Path(args.op_points)))
    needs_op = "loraserve" in args.placement
    if needs_op and cfg.operating_points is None:
        print("profiling operating points (none supplied)...", file=sys.stderr)
        ranks = sorted({a.rank for a in cfg.adapters})
        table = costmodel.profile_operating_points(
            cfg.cost, cfg.slo_seconds, ranks,
            duration_seconds=args.profile_duration, seed=args.seed,
        )
        cfg = with_overrides(cfg, operating_points=table)
    return cfg, trace


def _cost_params(args) -> costmodel.CostParams:
    if args.config:
        cfg = load_config(args.config)
        params = cfg.cost
    else:
        params = costmodel.CostParams()
    if args.tp is not None:
        from dataclasses import replace

        params = replace(params, tp=args.tp)
    return params


def _parse_ranks(text: str) -> tuple[int, ...]:
    try:
        ranks = tuple(int(r) for r in text.split(",") if r.strip())
    except ValueError:
        raise UsageError(f"invalid rank list {text!r}") from None
    if not ranks:
        raise UsageError("rank list is empty")
    return ranks


def _trace_rps(trace) -> float:
    if len(trace) < 2:
        return float(len(trace))
    span = trace[-1].arrival_time - trace[0].arrival_time
    return (len(trace) - 1) / span if span > 0 else float(len(trace))


def _write_op_points(table: OperatingPointTable, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "max_tps"])
        for rank in table.ranks():
            writer.writerow([rank, repr(table[rank])])


def _read_op_points(path: Path) -> OperatingPointTable:
    with path.open("r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "rank" not in reader.fieldnames:
            raise ConfigError(f"{path}: expected columns rank,max_tps")
        table = {}
        for row in reader:
            table[int(row["rank"])] = float(row["max_tps"])
    return OperatingPointTable(max_tps=table)


if __name__ == "__main__":
    sys.exit(main())
