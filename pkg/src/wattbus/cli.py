"""Single entry point with one subcommand per daemon.

    wattbus drivers   --config FILE [--status-file PATH]
    wattbus api       --config FILE
    wattbus viz       --config FILE
    wattbus forwarder --config FILE
    wattbus bench     --scenario NAME|FILE --out results.json
    wattbus bench     --sweep 0.2,0.4,0.6,0.8,1.0 --out results.json
    wattbus pollster  --api URL --token TOKEN --sink FILE [--period S]
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from wattbus import bench
from wattbus.api import run_api
from wattbus.config import ConfigError, load_config
from wattbus.forwarder import run_forwarder
from wattbus.manager import DEFAULT_WATCHDOG_PERIOD_S, run_manager
from wattbus.pollster import run_pollster
from wattbus.viz import run_viz


def _add_config_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="deployment config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wattbus",
                                     description="power monitoring daemons")
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    drivers = sub.add_parser("drivers", help="run the driver fleet")
    _add_config_arg(drivers)
    drivers.add_argument("--status-file", default=None,
                         help="write driver status as JSON lines here")
    drivers.add_argument("--watchdog-period", type=float,
                         default=DEFAULT_WATCHDOG_PERIOD_S)

    api = sub.add_parser("api", help="run the REST API consumer")
    _add_config_arg(api)

    viz = sub.add_parser("viz", help="run the chart/archive consumer")
    _add_config_arg(viz)

    fwd = sub.add_parser("forwarder", help="run a relay")
    _add_config_arg(fwd)

    bench_p = sub.add_parser("bench", help="run throughput scenarios")
    group = bench_p.add_mutually_exclusive_group(required=True)
    group.add_argument("--scenario",
                       help="standard scenario name or a scenario JSON file")
    group.add_argument("--sweep",
                       help="comma-separated measurement intervals in seconds")
    bench_p.add_argument("--out", required=True, help="results JSON path")
    bench_p.add_argument("--duration", type=float, default=None,
                         help="override scenario duration (seconds)")
    bench_p.add_argument("--drivers", type=int, default=None,
                         help="override fleet size (smoke testing)")
    bench_p.add_argument("--fleet", default="ipmi", choices=sorted(bench.FLEETS),
                         help="fleet for --sweep runs")
    bench_p.add_argument("--signing", action="store_true",
                         help="sign messages in --sweep runs")
    bench_p.add_argument("--transport", default="tcp", choices=["tcp", "ipc"])

    pollster = sub.add_parser("pollster", help="poll the API into a sample sink")
    pollster.add_argument("--api", required=True, help="API base URL")
    pollster.add_argument("--token", required=True)
    pollster.add_argument("--sink", required=True, help="JSON-lines output file")
    pollster.add_argument("--period", type=float, default=10.0)
    pollster.add_argument("--max-polls", type=int, default=None)

    return parser


def _run_bench(args) -> int:
    if args.sweep:
        try:
            intervals = [float(v) for v in args.sweep.split(",") if v.strip()]
        except ValueError:
            print(f"bad --sweep value: {args.sweep}", file=sys.stderr)
            return 2
        results = bench.run_sweep(
            intervals,
            fleet=args.fleet,
            duration_s=args.duration if args.duration else 60.0,
            signing=args.signing,
            drivers=args.drivers,
            transport=args.transport,
        )
    else:
        if os.path.exists(args.scenario):
            scenario = bench.load_scenario(args.scenario)
        else:
            scenario = bench.scenario_from_name(args.scenario)
        if args.duration is not None or args.drivers is not None:
            overrides = {}
            if args.duration is not None:
                overrides["duration_s"] = args.duration
            if args.drivers is not None:
                overrides["drivers"] = args.drivers
            scenario = replace(scenario, **overrides)
        results = [bench.run_scenario(scenario, transport=args.transport)]
    bench.write_results(results, args.out)
    for r in results:
        status = "ok" if r.valid and r.drops == 0 else f"drops={r.drops} valid={r.valid}"
        print(f"{r.name}: published={r.frames_published} received={r.frames_received} "
              f"p95_jitter={r.jitter_p95_s:.4f}s max_burst={r.max_burst} [{status}]")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "drivers":
            cfg = load_config(args.config)
            run_manager(cfg, watchdog_period_s=args.watchdog_period,
                        status_path=args.status_file)
        elif args.command == "api":
            run_api(load_config(args.config))
        elif args.command == "viz":
            run_viz(load_config(args.config))
        elif args.command == "forwarder":
            cfg = load_config(args.config)
            if cfg.forwarder is None:
                print("config has no [forwarder] section", file=sys.stderr)
                return 2
            run_forwarder(cfg.forwarder)
        elif args.command == "bench":
            return _run_bench(args)
        elif args.command == "pollster":
            run_pollster(args.api, args.token, args.period, args.sink,
                         max_polls=args.max_polls)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
