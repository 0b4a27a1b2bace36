"""Command-line front end for the solver library.

Four subcommands: ``solve`` runs one system and reports the outcome,
``compare`` races the classical and pipelined variants of a method,
``bench`` sweeps method x variant x system into a stats CSV, and
``model`` evaluates the device cost model without timing anything.

Exit codes are a stable contract: 0 converged, 2 breakdown, 3 iteration
limit, 64 usage error, 66 unreadable or malformed input file.
"""

from __future__ import annotations

import argparse
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import MatrixMarketError
from .execmodel import (
    DeviceProfile,
    ExecutionContext,
    latency_barrier,
    predict_iteration_time,
    speedup_curve,
)
from .io import gen_system, read_matrix_market, write_stats_csv
from .solvers import (
    CLASSICAL_GS,
    CONVERGED,
    MAX_ITER,
    MODIFIED_GS,
    SolverConfig,
    bicgstab_classical,
    bicgstab_pipelined,
    cg_classical,
    cg_pipelined,
    gmres_classical,
    gmres_pipelined,
)

EXIT_OK = 0
EXIT_BREAKDOWN = 2
EXIT_MAX_ITER = 3
EXIT_USAGE = 64
EXIT_FILE = 66

METHODS = ("cg", "bicgstab", "gmres")
VARIANTS = ("classical", "pipelined")

_DRIVERS = {
    ("cg", "classical"): cg_classical,
    ("cg", "pipelined"): cg_pipelined,
    ("bicgstab", "classical"): bicgstab_classical,
    ("bicgstab", "pipelined"): bicgstab_pipelined,
    ("gmres", "classical"): gmres_classical,
    ("gmres", "pipelined"): gmres_pipelined,
}


class _Parser(argparse.ArgumentParser):
    """argparse with the usage-error exit code this tool promises."""

    def __init__(self, *args, **kwargs):
        # No prefix matching: --m must not resolve to --method on
        # subcommands that only have the latter.
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_source_flags(sub: argparse.ArgumentParser, repeatable: bool = False) -> None:
    kwargs = {"action": "append", "default": []} if repeatable else {}
    sub.add_argument("--matrix", metavar="PATH", help="Matrix Market file; rhs is all ones", **kwargs)
    sub.add_argument(
        "--gen",
        metavar="SPEC",
        help="generated system, e.g. poisson2d:2, poisson3d:8,4, random:10000,4,1",
        **kwargs,
    )
    sub.add_argument("--seed", type=int, default=None, help="seed for random: specs that omit one")


def _add_run_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--tol", type=float, default=1e-8, help="relative residual tolerance")
    sub.add_argument("--max-iters", type=int, default=500, help="iteration limit")
    sub.add_argument("--m", "--restart", dest="restart", type=int, default=30,
                     help="GMRES restart length")
    sub.add_argument(
        "--ortho",
        choices=(CLASSICAL_GS, MODIFIED_GS),
        default=CLASSICAL_GS,
        help="GMRES orthogonalization scheme",
    )
    sub.add_argument("--fixed-iters", type=int, default=None, help="run exactly this many iterations")
    sub.add_argument("--groups", type=int, default=128, help="workgroups per reduction stage")
    sub.add_argument("--group-size", type=int, default=256, help="lanes per workgroup (power of two)")


def _add_profile_flag(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--profile", metavar="PATH", help="device profile file (key = value lines)")


def build_parser() -> _Parser:
    parser = _Parser(prog="pipekrylov", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", parser_class=_Parser)

    solve = subs.add_parser("solve", help="run one solver on one system")
    _add_source_flags(solve)
    solve.add_argument("--method", choices=METHODS, default="cg")
    solve.add_argument("--variant", choices=VARIANTS, default="pipelined")
    _add_run_flags(solve)
    _add_profile_flag(solve)

    compare = subs.add_parser("compare", help="race classical vs pipelined on one system")
    _add_source_flags(compare)
    compare.add_argument("--method", choices=METHODS, default="cg")
    compare.add_argument("--iters", type=int, default=30, help="fixed iterations per run")
    compare.add_argument("--runs", type=int, default=10, help="repetitions for the median")
    _add_run_flags(compare)
    _add_profile_flag(compare)

    bench = subs.add_parser("bench", help="sweep method x variant x system into a CSV")
    _add_source_flags(bench, repeatable=True)
    bench.add_argument("--methods", default="cg,bicgstab,gmres", help="comma-separated method list")
    bench.add_argument("--variants", default="classical,pipelined", help="comma-separated variant list")
    bench.add_argument("--iters", type=int, default=30)
    bench.add_argument("--runs", type=int, default=10)
    bench.add_argument("--csv", metavar="PATH", required=True, help="output stats file")
    bench.add_argument("--jobs", type=int, default=1, help="bench cells to run in parallel")
    _add_run_flags(bench)
    _add_profile_flag(bench)

    model = subs.add_parser("model", help="evaluate the cost model, no timing involved")
    model.add_argument("--method", choices=METHODS, default="cg")
    model.add_argument(
        "--sizes",
        default="poisson2d:1,poisson2d:2,poisson2d:3",
        help="comma-separated generator specs to sweep",
    )
    model.add_argument("--iters", type=int, default=30)
    model.add_argument("--groups", type=int, default=128)
    model.add_argument("--group-size", type=int, default=256)
    _add_profile_flag(model)

    return parser


def _fail_usage(parser: _Parser, message: str) -> "NoReturn":
    parser.error(message)


def _load_one(parser: _Parser, matrix: str | None, gen: str | None, seed: int | None):
    """Resolve one --matrix/--gen pair to (A, b, label) or exit."""
    if (matrix is None) == (gen is None):
        _fail_usage(parser, "exactly one of --matrix or --gen is required")
    if matrix is not None:
        try:
            a = read_matrix_market(matrix)
        except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
            print(f"pipekrylov: cannot read {matrix}: {exc}", file=sys.stderr)
            raise SystemExit(EXIT_FILE) from None
        except MatrixMarketError as exc:
            print(f"pipekrylov: {matrix}: {exc}", file=sys.stderr)
            raise SystemExit(EXIT_FILE) from None
        return a, np.ones(a.n_rows), matrix
    spec = gen
    # A bare random:n,nnz spec picks up --seed instead of the default 0.
    if seed is not None and spec.startswith("random:") and spec.count(",") == 1:
        spec = f"{spec},{seed}"
    try:
        return gen_system(spec)
    except ValueError as exc:
        _fail_usage(parser, str(exc))


def _make_config(parser: _Parser, args, fixed: int | None = None) -> SolverConfig:
    try:
        return SolverConfig(
            tolerance=args.tol,
            max_iterations=max(args.max_iters, fixed or 1),
            restart=args.restart,
            orthogonalization=args.ortho,
            fixed_iterations=fixed if fixed is not None else args.fixed_iters,
        )
    except ValueError as exc:
        _fail_usage(parser, str(exc))


def _make_context(parser: _Parser, args) -> ExecutionContext:
    try:
        return ExecutionContext(n_groups=args.groups, group_size=args.group_size)
    except ValueError as exc:
        _fail_usage(parser, str(exc))


def _make_profile(parser: _Parser, args) -> DeviceProfile:
    if getattr(args, "profile", None) is None:
        return DeviceProfile()
    try:
        return DeviceProfile.from_file(args.profile)
    except FileNotFoundError as exc:
        print(f"pipekrylov: cannot read {args.profile}: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_FILE) from None
    except ValueError as exc:
        print(f"pipekrylov: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_FILE) from None


def _phase_line(record) -> str:
    return (
        f"{record.launches} launches, {record.transfers} transfers, "
        f"{record.bytes_kernel} kernel bytes, {record.bytes_transfer} transfer bytes"
    )


def _history_deviation(h1, h2) -> float:
    """Largest relative gap between two residual histories.

    Entries where both runs are at the rounding floor (1e-12 absolute)
    count as agreeing: down there the histories measure noise.
    """
    worst = 0.0
    for a, b in zip(h1, h2):
        if abs(a) <= 1e-12 and abs(b) <= 1e-12:
            continue
        worst = max(worst, abs(a - b) / max(abs(a), abs(b)))
    return worst


def cmd_solve(parser: _Parser, args) -> int:
    a, b, label = _load_one(parser, args.matrix, args.gen, args.seed)
    cfg = _make_config(parser, args)
    ctx = _make_context(parser, args)
    profile = _make_profile(parser, args)
    try:
        result = _DRIVERS[(args.method, args.variant)](a, b, config=cfg, context=ctx)
    except ValueError as exc:
        _fail_usage(parser, str(exc))

    scale = float(np.linalg.norm(b)) or 1.0
    monitored = result.residual_history[-1] if result.residual_history else float("nan")
    steady = result.trace.steady_state() if result.trace.iterations else None
    print(f"system       {label} (n={a.n_rows}, nnz={a.nnz})")
    print(f"solver       {args.method} / {args.variant}")
    print(f"iterations   {result.iterations}")
    termination = result.termination
    if result.breakdown_kind:
        termination += f" ({result.breakdown_kind})"
    print(f"termination  {termination}")
    print(f"monitored    {monitored:.6e}  (relative; tolerance {cfg.tolerance:g})")
    print(f"true         {result.true_final_residual:.6e}  (bound {cfg.tolerance:g} * ||b|| = {cfg.tolerance * scale:.6e})")
    for phase in result.trace.phases[:1]:
        print(f"setup        {_phase_line(phase)}")
    if steady is not None:
        print(f"iteration    {_phase_line(steady)} (steady state)")
        print(f"modeled      {predict_iteration_time(steady, profile) * 1e6:.3f} us/iteration")
    if result.iterations:
        print(f"measured     {result.loop_seconds / result.iterations * 1e3:.3f} ms/iteration")

    if result.termination == CONVERGED:
        return EXIT_OK
    if result.termination == MAX_ITER:
        return EXIT_MAX_ITER
    return EXIT_BREAKDOWN


def _timed_runs(driver, a, b, cfg, ctx, runs: int):
    """Median timing plus the (deterministic) result of the first run."""
    first = None
    seconds = []
    for _ in range(max(runs, 1)):
        result = driver(a, b, config=cfg, context=ctx)
        seconds.append(result.loop_seconds)
        if first is None:
            first = result
    return first, statistics.median(seconds)


def cmd_compare(parser: _Parser, args) -> int:
    a, b, label = _load_one(parser, args.matrix, args.gen, args.seed)
    cfg = _make_config(parser, args, fixed=args.iters)
    ctx = _make_context(parser, args)
    profile = _make_profile(parser, args)

    rows = []
    histories = {}
    for variant in VARIANTS:
        driver = _DRIVERS[(args.method, variant)]
        try:
            result, median_s = _timed_runs(driver, a, b, cfg, ctx, args.runs)
        except ValueError as exc:
            _fail_usage(parser, str(exc))
        steady = result.trace.steady_state()
        histories[variant] = result.residual_history
        rows.append(
            (
                variant,
                median_s / args.iters * 1e3,
                steady.launches,
                steady.transfers,
                predict_iteration_time(steady, profile) * 1e6,
                result.residual_history[-1],
            )
        )

    print(f"{args.method} on {label} (n={a.n_rows}, nnz={a.nnz}), "
          f"{args.iters} fixed iterations, median of {args.runs} runs")
    header = f"{'variant':<11} {'ms/iter':>10} {'launches':>9} {'transfers':>10} {'model us':>10} {'residual':>13}"
    print(header)
    for variant, ms, launches, transfers, modeled, resid in rows:
        print(f"{variant:<11} {ms:>10.4f} {launches:>9d} {transfers:>10d} {modeled:>10.3f} {resid:>13.6e}")
    deviation = _history_deviation(histories["classical"], histories["pipelined"])
    print(f"max history deviation: {deviation:.3e}")
    return EXIT_OK


def _bench_row(label, a, method, variant, result, median_s, iters, profile) -> dict:
    steady = result.trace.steady_state()
    return {
        "solver": f"{method}_{variant}",
        "matrix": label,
        "n": a.n_rows,
        "nnz": a.nnz,
        "ms_per_iter_median": median_s / iters * 1e3,
        "launches_per_iter": steady.launches,
        "transfers_per_iter": steady.transfers,
        "predicted_us_per_iter": predict_iteration_time(steady, profile) * 1e6,
        "final_residual": result.residual_history[-1],
    }


def cmd_bench(parser: _Parser, args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [m for m in methods if m not in METHODS] + [v for v in variants if v not in VARIANTS]
    if bad:
        _fail_usage(parser, f"unknown method/variant: {', '.join(bad)}")
    sources = [("matrix", path) for path in args.matrix] + [("gen", spec) for spec in args.gen]
    if not sources:
        _fail_usage(parser, "at least one --matrix or --gen is required")
    if args.jobs < 1:
        _fail_usage(parser, "--jobs must be at least 1")

    cfg = _make_config(parser, args, fixed=args.iters)
    ctx = _make_context(parser, args)
    profile = _make_profile(parser, args)

    rows: list = []
    cells = []
    for kind, source in sources:
        try:
            if kind == "matrix":
                a = read_matrix_market(source)
                b, label = np.ones(a.n_rows), source
            else:
                spec = source
                if args.seed is not None and spec.startswith("random:") and spec.count(",") == 1:
                    spec = f"{spec},{args.seed}"
                a, b, label = gen_system(spec)
        except (OSError, MatrixMarketError, ValueError) as exc:
            # Keep the sweep going; the failure stays visible in the CSV.
            print(f"pipekrylov: skipping {source}: {exc}", file=sys.stderr)
            rows.append(
                {
                    "solver": f"error: {exc}",
                    "matrix": source,
                    "n": 0,
                    "nnz": 0,
                    "ms_per_iter_median": float("nan"),
                    "launches_per_iter": 0,
                    "transfers_per_iter": 0,
                    "predicted_us_per_iter": float("nan"),
                    "final_residual": float("nan"),
                }
            )
            continue
        for method in methods:
            for variant in variants:
                cells.append((len(rows), label, a, b, method, variant))
                rows.append(None)

    def run_cell(cell):
        index, label, a, b, method, variant = cell
        driver = _DRIVERS[(method, variant)]
        result, median_s = _timed_runs(driver, a, b, cfg, ctx, args.runs)
        return index, _bench_row(label, a, method, variant, result, median_s, args.iters, profile)

    try:
        if args.jobs > 1 and len(cells) > 1:
            # Cells share nothing mutable: every run traces into its own
            # context copy, so timing is the only thing contention skews.
            with ThreadPoolExecutor(max_workers=args.jobs) as pool:
                finished = list(pool.map(run_cell, cells))
        else:
            finished = [run_cell(cell) for cell in cells]
    except ValueError as exc:
        _fail_usage(parser, str(exc))

    for index, row in finished:
        rows[index] = row
    for row in rows:
        if "error" in row["solver"]:
            continue
        print(
            f"{row['solver']:<20} {row['matrix']:<24} n={row['n']:<8d} "
            f"{row['ms_per_iter_median']:.4f} ms/iter  "
            f"{row['launches_per_iter']}L/{row['transfers_per_iter']}T  "
            f"resid {row['final_residual']:.3e}"
        )

    write_stats_csv(args.csv, rows)
    print(f"wrote {len(rows)} rows to {args.csv}")
    return EXIT_OK


def cmd_model(parser: _Parser, args) -> int:
    profile = _make_profile(parser, args)
    ctx = _make_context(parser, args)
    barrier = latency_barrier(profile)
    print(f"latency barrier: {barrier.nbytes:.0f} bytes = {barrier.real64_count:.0f} real64 values")

    # Generator specs carry their own commas (random:4096,4,7); a segment
    # without a family prefix belongs to the spec before it.
    specs: list[str] = []
    for part in (s.strip() for s in args.sizes.split(",")):
        if not part:
            continue
        if ":" in part or not specs:
            specs.append(part)
        else:
            specs[-1] += "," + part
    systems = []
    for spec in specs:
        try:
            systems.append(gen_system(spec))
        except ValueError as exc:
            _fail_usage(parser, str(exc))
    pair = (_DRIVERS[(args.method, "classical")], _DRIVERS[(args.method, "pipelined")])
    rows = speedup_curve(pair, [(label, a, b) for a, b, label in systems],
                         profile=profile, iterations=args.iters, context=ctx)
    print(f"{'system':<20} {'n':>8} {'classical us':>13} {'pipelined us':>13} {'ratio':>7}")
    for row in rows:
        print(
            f"{row['label']:<20} {row['size']:>8d} {row['classical_s'] * 1e6:>13.3f} "
            f"{row['pipelined_s'] * 1e6:>13.3f} {row['ratio']:>7.3f}"
        )
    return EXIT_OK


_COMMANDS = {
    "solve": cmd_solve,
    "compare": cmd_compare,
    "bench": cmd_bench,
    "model": cmd_model,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        _fail_usage(parser, "a subcommand is required")
    return _COMMANDS[args.command](parser, args)


if __name__ == "__main__":
    sys.exit(main())
