"""``actplan`` command line: memory, flops, pipeline-sim, plan and verify.

Exit status: 0 on success, 1 when a config fails validation (or a verify
check fails), 2 when no plan fits the device budget, 64 on bad usage.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from typing import Sequence

from .config import (
    ALL_STRATEGIES,
    GIB,
    ByteConvention,
    Config,
    ConfigError,
    RecomputeStrategy,
    ValidationError,
    check_hardware,
    load_config,
    preset,
    require_valid,
)
from .flops import flops_report
from .memory import dealloc_savings_bytes, memory_report, params_and_optimizer_bytes
from .pipeline import InfeasibleBudgetError, ScheduleError, microbatch_window_plan, simulate_memory
from .planner import SearchSpace, enumerate_plans
from .verify import run_all, seed_from_env

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_INFEASIBLE = 2
EXIT_USAGE = 64

DEFAULT_STRATEGY = "selective+seq"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which we reserve
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _gib(n: int | float) -> str:
    return f"{n / GIB:.2f}"


def _pct(x: float | None) -> str:
    return "-" if x is None else f"{100 * x:.1f}%"


def _numeric(cell: str) -> bool:
    return cell.replace(".", "", 1).replace("-", "", 1).replace("%", "").replace("e+", "").isdigit()


def _table(headers: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    cells = [list(map(str, headers))] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for n, row in enumerate(cells):
        parts = [c.rjust(w) if n and _numeric(c) else c.ljust(w) for c, w in zip(row, widths)]
        lines.append("  ".join(parts).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _csv(headers: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(headers)
    writer.writerows(rows)
    return buf.getvalue()


def _json(doc) -> str:
    return json.dumps(doc, indent=2) + "\n"


def _parse_strategy(text: str) -> RecomputeStrategy:
    try:
        return RecomputeStrategy.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def _strategy_list(text: str) -> tuple[RecomputeStrategy, ...]:
    return tuple(_parse_strategy(part) for part in text.split(","))


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return value


def _load(args) -> tuple[str, Config]:
    if args.preset:
        try:
            return args.preset, preset(args.preset)
        except KeyError:
            raise UsageError(f"unknown preset {args.preset!r}") from None
    return args.config, load_config(args.config)


def _conv(args) -> ByteConvention:
    if getattr(args, "optimizer_bytes", None) is None:
        return ByteConvention()
    return ByteConvention(optimizer_bytes_per_param=args.optimizer_bytes)


def _window_budget(args, cfg: Config, conv: ByteConvention) -> int:
    if args.budget is not None:
        return args.budget
    params, optimizer = params_and_optimizer_bytes(cfg.shape, cfg.layout, conv)
    return cfg.hardware.device_mem - params - optimizer


# --------------------------------------------------------------------- memory

def cmd_memory(args) -> tuple[int, str]:
    name, cfg = _load(args)
    conv = _conv(args)
    report = memory_report(cfg.shape, cfg.layout, args.strategy, conv)
    if args.format == "json":
        return EXIT_OK, _json(report.to_dict())
    ex = report.extras
    rows = [
        ("per_layer", report.per_layer),
        ("transformer_total_first_stage", report.transformer_total_first_stage),
        ("interleaved_total", report.grand_total - ex.total - report.params - report.optimizer_state),
        ("embedding_dropout", ex.embedding_dropout),
        ("final_layernorm", ex.final_layernorm),
        ("output_proj_input", ex.output_proj_input),
        ("logits", ex.logits),
        ("params", report.params),
        ("optimizer_state", report.optimizer_state),
        ("grand_total", report.grand_total),
    ]
    if args.format == "csv":
        return EXIT_OK, _csv(("item", "bytes"), rows)
    out = [f"model: {name}  strategy: {report.strategy}  "
           f"interleave factor: {report.interleave_factor}  "
           f"activations vs baseline: {float(report.percent_of_baseline) * 100:.1f}%\n"]
    out.append(_table(("item", "bytes", "GiB"), [(k, v, _gib(v)) for k, v in rows]))
    out.extend(f"note: {f}\n" for f in report.footnotes)
    return EXIT_OK, "".join(out)


# ---------------------------------------------------------------------- flops

def cmd_flops(args) -> tuple[int, str]:
    name, cfg = _load(args)
    require_valid(cfg.shape, cfg.layout)
    conv = _conv(args)
    fraction = None
    if args.strategy.microbatch_level:
        plan = microbatch_window_plan(cfg.shape, cfg.layout, args.strategy.inner,
                                      _window_budget(args, cfg, conv), args.dealloc == "on", conv)
        fraction = plan.recompute_fraction
    report = flops_report(cfg.shape, cfg.layout.batch_per_iteration, args.strategy, cfg.hardware,
                          args.iter_time, args.baseline_iter_time, fraction, args.flops_selective)
    if args.format == "json":
        return EXIT_OK, _json(report.to_dict())
    headers = ("model", "strategy", "iteration time (s)", "throughput increase", "MFU", "HFU",
               "hw/model FLOPs")
    row = (name, report.strategy, "-" if args.iter_time is None else f"{args.iter_time:g}",
           _pct(report.throughput_increase), _pct(report.mfu), _pct(report.hfu),
           f"{float(report.hw_model_ratio):.4f}")
    if args.format == "csv":
        return EXIT_OK, _csv(headers, [row])
    tail = (f"model FLOPs/iter: {report.model_flops_per_iter:.4e}  "
            f"hardware FLOPs/iter: {float(report.hardware_flops_per_iter):.4e}  "
            f"predicted speedup vs full recompute: {_pct(report.predicted_speedup_vs_full)}\n")
    return EXIT_OK, _table(headers, [row]) + tail


# ---------------------------------------------------------------- pipeline-sim

def cmd_pipeline(args) -> tuple[int, str]:
    name, cfg = _load(args)
    require_valid(cfg.shape, cfg.layout)
    conv = _conv(args)
    dealloc = args.dealloc == "on"
    window = None
    if args.strategy.microbatch_level:
        window = microbatch_window_plan(cfg.shape, cfg.layout, args.strategy.inner,
                                        _window_budget(args, cfg, conv), dealloc, conv)
        timeline = window.timeline
    else:
        timeline = simulate_memory(cfg.shape, cfg.layout, args.strategy, dealloc, conv)

    if args.format == "csv":
        return EXIT_OK, timeline.to_csv()
    if args.format == "json":
        doc = timeline.to_dict()
        if window is not None:
            doc["window"] = window.to_dict()
        if args.boxes:
            doc["boxes"] = timeline.box_chart()["boxes"]
        return EXIT_OK, _json(doc)

    headers = ["rank", "peak bytes", "peak GiB", "output dealloc saves GiB"]
    if window is not None:
        headers += ["fully stored", "recomputed"]
    rows = []
    for rank, peak in enumerate(timeline.peak_per_rank):
        saved = dealloc_savings_bytes(cfg.shape, cfg.layout, rank, conv)
        row = [rank, peak, _gib(peak), _gib(saved)]
        if window is not None:
            row += list(window.per_stage[rank])
        rows.append(row)
    head = (f"model: {name}  strategy: {args.strategy.label}  p={cfg.layout.p}  "
            f"n_mb={cfg.layout.n_mb}  dealloc: {args.dealloc}\n")
    return EXIT_OK, head + _table(headers, rows)


# ----------------------------------------------------------------------- plan

def cmd_plan(args) -> tuple[int, str]:
    name, cfg = _load(args)
    problems = check_hardware(cfg.layout, cfg.hardware)
    if problems:
        raise ValidationError(problems)
    space = SearchSpace.around(cfg.layout, args.strategies or ALL_STRATEGIES,
                               t=args.t, p=args.p, m=args.m, b=args.b)
    result = enumerate_plans(cfg.shape, cfg.hardware, space, _conv(args), args.dealloc == "on")
    shown = result.candidates[: args.top] if args.top else result.candidates
    docs = [dict(rank=i, **c.to_dict()) for i, c in enumerate(shown, 1)]
    code = EXIT_OK if result.feasible else EXIT_INFEASIBLE

    if args.format == "json":
        return code, _json(docs)
    headers = ("rank", "t", "p", "m", "d", "b", "n_mb", "strategy", "feasible", "total GiB",
               "headroom GiB", "hardware FLOPs")
    rows = [(d["rank"], d["t"], d["p"], d["m"], d["d"], d["b"], d["n_mb"], d["strategy"],
             "yes" if d["feasible"] else "no", _gib(d["total_bytes"]), _gib(d["headroom"]),
             f"{d['hardware_flops']:.4e}") for d in docs]
    if args.format == "csv":
        return code, _csv(headers, rows)
    out = [f"model: {name}  devices: {cfg.hardware.devices}  "
           f"device memory: {_gib(cfg.hardware.device_mem)} GiB\n", _table(headers, rows)]
    if not result.feasible:
        out.append(f"no plan fits; smallest shortfall {result.min_shortfall} bytes "
                   f"({_gib(result.min_shortfall)} GiB)\n")
    if result.skipped:
        out.append(f"skipped {len(result.skipped)} invalid layout(s)\n")
    return code, "".join(out)


# --------------------------------------------------------------------- verify

def cmd_verify(args) -> tuple[int, str]:
    report = run_all(seed_from_env())
    code = EXIT_OK if report.passed else EXIT_INVALID
    if args.format == "json":
        return code, _json(report.to_dict())
    rows = [(c.name, "pass" if c.passed else "FAIL", c.cases, f"{c.max_error:.3e}", f"{c.tolerance:g}")
            for c in report.checks]
    headers = ("check", "result", "cases", "max error", "tolerance")
    if args.format == "csv":
        return code, _csv(headers, rows)
    return code, f"seed: {report.seed}\n" + _table(headers, rows)


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="actplan", description="Activation memory and FLOPs planning for "
                                                 "tensor/sequence/pipeline-parallel transformer training.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def source(p):
        group = p.add_mutually_exclusive_group(required=True)
        group.add_argument("--config", metavar="PATH", help="JSON config document")
        group.add_argument("--preset", metavar="NAME", help="built-in config: 22b, 175b, 530b, 1t")
        p.add_argument("--format", choices=("table", "json", "csv"), default="table")
        p.add_argument("--optimizer-bytes", type=int, metavar="N",
                       help="optimizer-state bytes per parameter (default 14)")

    def strategy(p):
        p.add_argument("--strategy", type=_parse_strategy, default=DEFAULT_STRATEGY,
                       metavar="{none,full,selective}[+seq][+mblevel]",
                       help=f"recompute strategy (default {DEFAULT_STRATEGY})")

    def window(p):
        p.add_argument("--dealloc", choices=("on", "off"), default="on",
                       help="free each stage's output tensor after sending it")
        p.add_argument("--budget", type=int, metavar="BYTES",
                       help="activation budget for +mblevel (default: device memory "
                            "minus parameters and optimizer state)")

    p = sub.add_parser("memory", help="activation, parameter and optimizer memory report")
    source(p)
    strategy(p)
    p.set_defaults(func=cmd_memory)

    p = sub.add_parser("flops", help="model/hardware FLOPs, MFU and HFU")
    source(p)
    strategy(p)
    window(p)
    p.add_argument("--iter-time", type=_positive_float, metavar="SECONDS")
    p.add_argument("--baseline-iter-time", type=_positive_float, metavar="SECONDS",
                   help="iteration time of the comparison run, for throughput increase")
    p.add_argument("--flops-selective", choices=("equation", "text"), default="equation",
                   help="selective recompute cost: 12BLs²h (equation) or 4BLs²h (text)")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("pipeline-sim", help="per-rank activation memory over a 1F1B schedule")
    source(p)
    strategy(p)
    window(p)
    p.add_argument("--boxes", action="store_true", help="include box-chart data in JSON output")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("plan", help="search layouts and strategies that fit device memory")
    source(p)
    p.add_argument("--dealloc", choices=("on", "off"), default="on")
    p.add_argument("--top", type=int, metavar="N", help="show only the N best candidates")
    p.add_argument("--strategies", type=_strategy_list, metavar="LIST",
                   help="comma-separated strategies (default: all)")
    for dim in ("t", "p", "m", "b"):
        p.add_argument(f"--{dim}", type=_int_list, metavar="LIST",
                       help=f"comma-separated {dim} values (default: the config's)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("verify", help="run the numerical property suite (seed: ACTPLAN_SEED)")
    p.add_argument("--format", choices=("table", "json", "csv"), default="json")
    p.set_defaults(func=cmd_verify)
    return parser


def run(argv: Sequence[str] | None = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        code, text = args.func(args)
    except UsageError as exc:
        print(f"actplan: error: {exc}", file=stderr)
        return EXIT_USAGE
    except (ConfigError, ValidationError, OSError, ValueError) as exc:
        if isinstance(exc, InfeasibleBudgetError):
            print(f"actplan: infeasible: {exc}", file=stderr)
            return EXIT_INFEASIBLE
        if isinstance(exc, ScheduleError):
            print(f"actplan: error: {exc}", file=stderr)
            return EXIT_INVALID
        print(f"actplan: invalid: {exc}", file=stderr)
        return EXIT_INVALID
    try:
        stdout.write(text)
        stdout.flush()
    except BrokenPipeError:  # e.g. piped into head
        sys.stderr.close()
    return code


def main() -> None:
    sys.exit(run())


__all__ = ["build_parser", "main", "run"]
