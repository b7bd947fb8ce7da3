"""``encoms`` command line: run experiments, analyze exports, serve the monitor."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from .adaptation import preset_names
from .harness import (ExperimentConfig, ExternalAdapter, HarnessError, InsufficientIterations,
                      ProtocolFailure, Scenario, analyze_exports, import_external, load_exports,
                      run_experiment)
from .report import FORMATS, render_report
from .service import BackendSpec, BindFailure, MonitorConfig, run_monitor
from .store import SchemaViolation
from .targetsim import WORKLOADS, Variant

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PROTOCOL = 2
EXIT_SCHEMA = 3

log = logging.getLogger("encoms")


def _cmd_run(args) -> int:
    config = ExperimentConfig(
        scenario=Scenario(args.scenario),
        iterations=args.iterations,
        warmup_s=args.warmup_s,
        monitor_s=args.monitor_s,
        workload=WORKLOADS[args.workload],
        rule_preset=args.rules,
        seed=args.seed,
        output_dir=Path(args.out),
        variant=Variant(args.variant) if args.variant else None,
    )
    try:
        out = run_experiment(config)
    except ProtocolFailure as exc:
        print(f"error: {exc}; partial results kept in {config.output_dir}", file=sys.stderr)
        return EXIT_PROTOCOL
    print(f"wrote {config.iterations} iteration files to {out}")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    variants = {}
    try:
        for d in args.inputs:
            label = Path(d).name
            if label in variants:
                raise HarnessError(f"duplicate variant label {label!r}")
            variants[label] = load_exports(d)
        for d in args.import_external or []:
            adapter = ExternalAdapter.load(args.adapter) if args.adapter else ExternalAdapter()
            variants[Path(d).name] = import_external(d, adapter)
        report = analyze_exports(variants, args.baseline, args.aggregate)
    except SchemaViolation as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except InsufficientIterations as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except HarnessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    text = render_report(report, args.format)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _serve_config(args) -> MonitorConfig:
    if args.config:
        config = MonitorConfig.load(args.config)
    else:
        options = {}
        if args.backend == "replay":
            if not args.trace:
                raise SystemExit("--trace is required for the replay backend")
            options["path"] = args.trace
        elif args.backend == "scrape":
            if not args.url:
                raise SystemExit("--url is required for the scrape backend")
            options["url"] = args.url
        config = MonitorConfig.from_dict({
            "targets": [{"kind": args.backend, **options}],
            "interval_ms": args.interval_ms or 2000,
            "allow_fast_sampling": args.allow_fast_sampling,
        })
        return _override(config, args)
    return _override(config, args)


def _override(config: MonitorConfig, args) -> MonitorConfig:
    if args.listen:
        config.listen_address = args.listen
    if args.store:
        config.store_path = args.store
    return config


def _cmd_serve(args) -> int:
    config = _serve_config(args)
    try:
        handle = run_monitor(config)
    except BindFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"serving on {handle.url}", flush=True)
    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    try:
        done.wait(args.duration_s) if args.duration_s else done.wait()
    except KeyboardInterrupt:
        pass
    finally:
        handle.stop()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="encoms", description="Energy monitoring for self-adaptive systems")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the warmup/monitor/export protocol on the simulated target")
    run.add_argument("--scenario", choices=[s.value for s in Scenario], default=Scenario.NOADAPT.value)
    run.add_argument("--iterations", type=int, default=30)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", required=True, help="output directory for iteration files")
    run.add_argument("--variant", choices=[v.value for v in Variant],
                     help="fix the recommender algorithm (non-adaptive scenarios only)")
    run.add_argument("--workload", choices=sorted(WORKLOADS), default="medium")
    run.add_argument("--rules", choices=preset_names(), default="energy-adapt")
    run.add_argument("--warmup-s", type=int, default=20)
    run.add_argument("--monitor-s", type=int, default=100)
    run.set_defaults(func=_cmd_run)

    an = sub.add_parser("analyze", help="compute the statistics report over export directories")
    an.add_argument("--inputs", nargs="*", default=[], help="one export directory per variant")
    an.add_argument("--baseline", help="variant label used as baseline (default: first input)")
    an.add_argument("--format", choices=FORMATS, default="table-text")
    an.add_argument("--aggregate", choices=("sum", "mean"), default="sum",
                    help="per-iteration energy: total or mean window joules")
    an.add_argument("--import-external", nargs="*", metavar="DIR", help="foreign dataset directories")
    an.add_argument("--adapter", help="JSON adapter spec for --import-external")
    an.add_argument("-o", "--output")
    an.set_defaults(func=_cmd_analyze)

    sv = sub.add_parser("serve", help="run the monitoring service")
    sv.add_argument("--config", help="JSON monitor configuration")
    sv.add_argument("--listen", help="host:port (overrides config)")
    sv.add_argument("--interval-ms", type=int)
    sv.add_argument("--allow-fast-sampling", action="store_true")
    sv.add_argument("--backend", choices=("scrape", "replay", "sim", "target-sim"), default="sim")
    sv.add_argument("--trace", help="NDJSON trace for the replay backend")
    sv.add_argument("--url", help="exposition endpoint for the scrape backend")
    sv.add_argument("--store", help="JSONL store path")
    sv.add_argument("--duration-s", type=float, help="stop after this many seconds")
    sv.set_defaults(func=_cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "analyze" and not args.inputs and not args.import_external:
        print("error: give --inputs and/or --import-external", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
