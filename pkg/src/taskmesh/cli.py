"""Experiment runner CLI.

Subcommands: ``run`` (repeated runs of one configuration), ``sweep``
(cross product over one axis), ``check`` (offline validation of run
trace bundles), ``tmf-dump`` (decode a frame capture), ``calibrate``
(busy-loop rate), and ``worker`` (spawned worker process entry).

Results are written as versioned CSV; the report path also renders a
PNG figure next to each CSV unless ``--no-plot`` is given.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import statistics
import sys
from pathlib import Path

from . import bench
from .config import ConfigError, ExperimentConfig, parse_file, serialize
from .kernels import SIM_ITERATIONS_PER_US, calibrate
from .runtime import HEAD_ADDR_ENV, RANK_ENV, RunError, run_program, worker_main
from .scheduler import CostModel

CSV_SCHEMA = "# taskmesh-results v1"
CSV_COLUMNS = [
    "run", "transport", "pattern", "nodes", "width", "steps", "iterations",
    "ccr", "seed", "wall_us", "startup_us", "scheduling_us", "shutdown_us",
    "busy_us", "bytes_moved", "events", "makespan_est_us",
]
_NUMERIC = [
    "wall_us", "startup_us", "scheduling_us", "shutdown_us", "busy_us",
    "bytes_moved", "events", "makespan_est_us",
]


def _row(config: ExperimentConfig, run_index, report) -> dict:
    return {
        "run": run_index,
        "transport": config.transport,
        "pattern": config.pattern,
        "nodes": config.nodes,
        "width": config.width,
        "steps": config.steps,
        "iterations": config.iterations,
        "ccr": config.ccr,
        "seed": config.seed,
        "wall_us": report.wall_us,
        "startup_us": report.startup_us,
        "scheduling_us": report.scheduling_us,
        "shutdown_us": report.shutdown_us,
        "busy_us": report.busy_total_us,
        "bytes_moved": report.bytes_moved,
        "events": report.events_notified,
        "makespan_est_us": report.makespan_est_us,
    }


def summary_rows(rows: list[dict]) -> list[dict]:
    """Mean and population-stddev rows over the plain run rows."""
    runs = [r for r in rows if str(r["run"]).isdigit()]
    if not runs:
        return []
    out = []
    for name, fn in (("mean", statistics.fmean), ("stddev", statistics.pstdev)):
        row = dict(runs[0])
        row["run"] = name
        for col in _NUMERIC:
            row[col] = f"{fn([float(r[col]) for r in runs]):.3f}"
        out.append(row)
    return out


def render_csv(rows: list[dict]) -> str:
    out = io.StringIO()
    out.write(CSV_SCHEMA + "\n")
    writer = csv.DictWriter(out, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return out.getvalue()


def read_results_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# taskmesh-results"):
            raise ConfigError(f"{path}: not a taskmesh results file")
        return list(csv.DictReader(fh))


def _execute_runs(config: ExperimentConfig, trace_root: Path | None, tag: str = "run") -> list[dict]:
    cm = CostModel(workers=config.nodes, latency_us=config.latency_us,
                   bandwidth_bpus=config.bandwidth_bpus)
    rate = config.sim_rate_ipus if config.transport == "sim" else calibrate()
    spec = bench.BenchSpec(config.pattern, config.width, config.steps,
                           config.iterations, config.ccr, config.nodes)
    rows = []
    for index in range(config.repeats):
        program = bench.generate(spec, cm, rate)
        bundle = None
        if trace_root is not None:
            bundle = trace_root / f"{tag}{index}"
        result = run_program(program, config, bundle_dir=bundle)
        rows.append(_row(config, index, result.report))
    return rows


def cmd_run(args) -> int:
    config = _load_config(args)
    trace_root = Path(config.trace_dir) if config.trace_dir else None
    rows = _execute_runs(config, trace_root)
    rows += summary_rows(rows)
    output = Path(config.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_text(render_csv(rows))
    print(f"wrote {output} ({config.repeats} runs + summary)")
    if config.plot:
        from .plots import plot_run

        figure = plot_run(rows, output.with_suffix(".png"))
        print(f"wrote {figure}")
    return 0


_DEFAULT_SWEEPS = {
    "nodes": [2, 4, 8, 16, 32],
    "ccr": [0.5, 1.0, 2.0],
    "iterations": [1_000, 10_000, 100_000, 1_000_000, 10_000_000, 100_000_000],
}


def cmd_sweep(args) -> int:
    config = _load_config(args)
    axis = args.axis
    if args.values:
        conv = float if axis == "ccr" else int
        values = [conv(v) for v in args.values.split(",")]
    else:
        values = _DEFAULT_SWEEPS[axis]
    trace_root = Path(config.trace_dir) if config.trace_dir else None
    rows: list[dict] = []
    for value in values:
        point = ExperimentConfig(**{**config.__dict__})
        setattr(point, axis, value)
        if axis == "nodes":
            point.width = 2 * int(value)  # weak scaling: grow the grid with n
        point.validate()
        rows.extend(_execute_runs(point, trace_root, tag=f"{axis}{value}_run"))
    rows += summary_rows(rows)
    output = Path(config.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_text(render_csv(rows))
    print(f"wrote {output} ({len(values)} {axis} values x {config.repeats} repeats)")
    if config.plot:
        from .plots import plot_sweep

        figure = plot_sweep(rows, axis, output.with_suffix(".png"))
        print(f"wrote {figure}")
    return 0


def cmd_check(args) -> int:
    from .checks import check_bundle

    failed = False
    for directory in args.bundles:
        results = check_bundle(directory)
        print(f"{directory}:")
        for result in results:
            print("  " + result.line())
            failed |= not result.passed
    return 1 if failed else 0


def cmd_tmf_dump(args) -> int:
    from .frames import dump_stream

    data = Path(args.file).read_bytes()
    for line in dump_stream(data):
        print(line)
    return 0


def cmd_calibrate(args) -> int:
    rate = calibrate()
    target_us = args.target_ms * 1000
    print(f"busy-loop rate: {rate:.1f} iterations/us")
    print(f"iterations for {args.target_ms} ms: {int(rate * target_us)}")
    print(f"simulator model rate: {SIM_ITERATIONS_PER_US} iterations/us")
    return 0


def cmd_worker(args) -> int:
    rank = args.rank if args.rank is not None else int(os.environ[RANK_ENV])
    head = args.head or os.environ[HEAD_ADDR_ENV]
    return worker_main(rank, head, channels=args.channels,
                       handlers=args.handlers, trace_dir=args.trace_dir)


def cmd_show_config(args) -> int:
    config = _load_config(args)
    sys.stdout.write(serialize(config))
    return 0


def _load_config(args) -> ExperimentConfig:
    config = parse_file(args.config) if args.config else ExperimentConfig()
    for key in ("output", "transport", "nodes", "pattern", "trace_dir"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(config, key, value)
    if getattr(args, "no_plot", False):
        config.plot = False
    config.validate()
    return config


def _add_config_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (key = value lines)")
    p.add_argument("--output", help="override the output CSV path")
    p.add_argument("--transport", choices=("sim", "tcp"))
    p.add_argument("--nodes", type=int)
    p.add_argument("--pattern")
    p.add_argument("--trace-dir", dest="trace_dir", help="write run trace bundles here")
    p.add_argument("--no-plot", action="store_true", help="skip figure rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskmesh",
                                     description="distributed task-offloading benchmark runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one configuration, repeated")
    _add_config_options(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="run the cross product over one axis")
    _add_config_options(p)
    p.add_argument("--axis", choices=("nodes", "ccr", "iterations"), required=True)
    p.add_argument("--values", help="comma-separated axis values")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("check", help="validate run trace bundles")
    p.add_argument("bundles", nargs="+", help="bundle directories")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("tmf-dump", help="pretty-print a frame capture file")
    p.add_argument("file")
    p.set_defaults(fn=cmd_tmf_dump)

    p = sub.add_parser("calibrate", help="measure the busy-loop rate")
    p.add_argument("--target-ms", type=float, default=50.0)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("show-config", help="print the parsed config in canonical form")
    _add_config_options(p)
    p.set_defaults(fn=cmd_show_config)

    p = sub.add_parser("worker", help="worker process entry point (spawned by run)")
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--head", default=None, help="head address host:port")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--handlers", type=int, default=None)
    p.add_argument("--trace-dir", dest="trace_dir", default=None)
    p.set_defaults(fn=cmd_worker)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, RunError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
