"""Command-line front end: ``codedml SUBCOMMAND [flags]``.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys are
flag names with dashes turned into underscores) and ``--seed``. Flags given
on the command line override the config. Each named random stream is seeded
from ``sha256(master_seed, stream_name)``, so adding a stream never shifts
the others.

Exit codes: 0 success, 2 invalid arguments, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import coded_shuffle as cs
from .cluster_sim import BroadcastModel, LatencyModel, simulate_distribution
from .codes import format_code, parse_code
from .coded_compute import coded_gradient_descent, coded_matmul
from .errors import CodedError, InvalidParameter
from .learners import SCHEMES, TRACE_HEADER, load_task, make_synthetic, run_experiment, tune_step
from .matrix_io import fixture_latencies, read_latencies, read_matrix, read_vector
from .runtime_model import Empirical, SchemeSpec, ShiftedExponential, cdf_overall, expected_runtime, optimal_design

SEED_MAX = 2**64 - 1


class UsageError(Exception):
    pass


def stream_rng(master_seed: int, name: str) -> np.random.Generator:
    """Independent generator for the stream ``name`` under ``master_seed``."""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode()).digest()
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int.from_bytes(digest[:16], "little"))))


def stream_seed(master_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v <= SEED_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _fmt(x) -> str:
    return repr(float(x))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# output helpers


class _Out:
    """Text sink: a file if a path was given, else stdout."""

    def __init__(self, path):
        self.path = path

    def __enter__(self):
        self.fh = open(self.path, "w", newline="") if self.path else sys.stdout
        return self.fh

    def __exit__(self, *exc):
        if self.path:
            self.fh.close()
        else:
            self.fh.flush()


def _write_json(obj, path=None):
    with _Out(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_rows(header, rows, path=None):
    with _Out(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_vector(vec, path=None):
    with _Out(path) as fh:
        for v in np.atleast_1d(vec):
            fh.write(_fmt(v) + "\n")


def _latency(args) -> LatencyModel:
    path = getattr(args, "latency_file", None)
    if path == "builtin":
        base = Empirical(fixture_latencies())
    elif path:
        base = Empirical(read_latencies(path))
    else:
        base = ShiftedExponential(args.mu)
    return LatencyModel(base, args.straggler_prob, args.straggler_factor)


def _add_latency(p):
    p.add_argument("--mu", type=float, default=1.0, help="straggling parameter of the shifted exponential (default 1)")
    p.add_argument("--latency-file", help="one-column CSV of measured runtimes (or 'builtin' for the bundled sample); replaces the shifted exponential")
    p.add_argument("--straggler-prob", type=float, default=0.05, help="chance a task is slowed down (default 0.05)")
    p.add_argument("--straggler-factor", type=float, default=2.0, help="slow-down factor of a straggling task (default 2)")


# --------------------------------------------------------------------------
# subcommands


def cmd_plan_code(args):
    res = optimal_design(args.scheme, args.n, args.mu)
    _write_json(res.as_dict(), args.out)


def cmd_sim_runtime(args):
    code = parse_code(args.code)
    spec = SchemeSpec(code.family.scheme, code.n, code.k)
    lat = _latency(args)
    dist = simulate_distribution(spec, lat, args.reps, stream_seed(args.seed, "sim-runtime"))
    if args.out:
        dist.write_csv(args.out)
    summary = dist.quantiles()
    summary["code"] = format_code(code)
    if isinstance(lat.base, ShiftedExponential) and lat.straggler_prob == 0:
        summary["expected_runtime"] = expected_runtime(lat.base, spec)
    _write_json(summary, args.summary)


def cmd_matmul(args):
    A = read_matrix(args.matrix)
    x = read_vector(args.vector)
    code = parse_code(args.code)
    responders = None if args.responders is None else [int(i) for i in args.responders.split(",")]
    out, trace = coded_matmul(A, x, code, args.mode, _latency(args), stream_rng(args.seed, "matmul"), responders)
    _write_vector(out, args.out)
    if trace is not None:
        print(json.dumps({"responding": list(trace.responding), "completion_time": trace.completion_time}), file=sys.stderr)


def cmd_gd(args):
    if args.matrix:
        A = read_matrix(args.matrix)
        if not args.labels:
            raise UsageError("--matrix needs --labels")
        y = read_vector(args.labels)
    else:
        rng = stream_rng(args.seed, "gd-data")
        A = rng.standard_normal((args.rows, args.cols))
        y = A @ rng.standard_normal(args.cols) + 0.1 * rng.standard_normal(args.rows)
    step = "auto" if args.gamma == "auto" else float(args.gamma)
    common = dict(latency=_latency(args), sticky_stragglers=args.sticky_stragglers)
    if args.mode == "live":
        from .coded_compute import CodedMatmulPlan
        from .live_cluster import LiveMaster, LocalCluster, make_gd_assignments

        plan = CodedMatmulPlan.build(A, args.n, args.k1, args.k2)
        with LocalCluster(make_gd_assignments(plan)) as cluster:
            with LiveMaster(cluster.endpoints, plan.row_code, plan.row_blocks.padding_rows, code_t=plan.col_code,
                            padding_rows_t=plan.col_blocks.padding_rows, timeout=args.timeout) as master:
                states = coded_gradient_descent(A, y, args.n, args.k1, args.k2, args.steps, step, "live", cluster=master, **common)
    else:
        rng = stream_rng(args.seed, "gd") if args.mode == "sim" else None
        states = coded_gradient_descent(A, y, args.n, args.k1, args.k2, args.steps, step, args.mode, rng=rng, **common)
    rows = [[s.iteration, _fmt(s.objective), _fmt(s.wall_time)] for s in states]
    _write_rows(["iter", "objective", "wall_time"], rows, args.out)


def cmd_shuffle_rate(args):
    rep = cs.rate_report(args.q, args.s, args.n, args.measure, args.reps, stream_seed(args.seed, "shuffle-rate"),
                         BroadcastModel(args.broadcast))
    _write_json(rep.as_dict(), args.out)


def cmd_shuffle_sim(args):
    rng = stream_rng(args.seed, "shuffle-sim")
    data = None
    if args.verify:
        data = stream_rng(args.seed, "shuffle-data").random((args.q, args.cols))
    epochs = cs.simulate_shuffles(args.q, args.n, args.s, args.epochs, rng, data)
    rows = [[e.epoch, e.rows_uncoded, e.rows_coded_measured, _fmt(e.rows_coded_analytic)] for e in epochs]
    _write_rows(["epoch", "rows_uncoded", "rows_coded_measured", "rows_coded_analytic"], rows, args.out)


def _task(args):
    if args.data:
        return load_task(args.task, args.data)
    return make_synthetic(args.task, args.rows, args.cols, stream_seed(args.seed, "psgd-data"))


def cmd_psgd(args):
    task = _task(args)
    step = args.step if args.step is not None else tune_step(task, args.n)
    traces = run_experiment(task, args.scheme, args.epochs, args.n, args.s, args.alpha, stream_seed(args.seed, "psgd"), step)
    rows = [[t.epoch, _fmt(t.objective), _fmt(t.wall_none), _fmt(t.wall_uncoded), _fmt(t.wall_coded)] for t in traces]
    _write_rows(TRACE_HEADER, rows, args.out)


def cmd_serve_worker(args):
    from .live_cluster import WorkerAssignment, worker_serve

    a = WorkerAssignment.load(args.assignment)

    def ready(bound):
        print(f"listening on {bound}", flush=True)

    return worker_serve(a, args.listen, ready)


def cmd_run_master(args):
    from .live_cluster import LiveMaster

    code = parse_code(args.code)
    x = read_vector(args.input)
    workers = [w.strip() for w in args.workers.split(",") if w.strip()]
    with LiveMaster(workers, code, args.padding_rows, timeout=args.timeout) as m:
        out, trace = m.matvec(x)
        if not args.shutdown:
            for i, s in enumerate(m.socks):
                if s is not None:
                    s.close()
                    m.socks[i] = None
    _write_vector(out, args.out)
    info = {"responding": list(trace.responding), "completion_time": trace.completion_time,
            "decode_time": trace.decode_time, "failed": sorted(m.failed),
            "unicast_units": trace.unicast_units, "broadcast_units": trace.broadcast_units}
    print(json.dumps(info), file=sys.stderr)


def cmd_encode(args):
    from .live_cluster import make_assignments

    code = parse_code(args.code)
    assignments, padding = make_assignments(read_matrix(args.matrix), code)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for a in assignments:
        path = out / f"worker{a.worker_id}.json"
        a.save(path)
        files.append(path.name)
    _write_json({"code": format_code(code), "padding_rows": padding, "assignments": files}, str(out / "manifest.json"))


def figure_fig12(out_dir: Path, n: int = 50, q: int = 1000):
    rows = []
    for j in range(1, n + 1):
        s = j * q // n
        rows.append([_fmt(s / q), _fmt(cs.rate_uncoded(q, s, n)), _fmt(cs.rate_coded_closed(q, s, n))])
    _write_rows(["s_over_q", "rate_uncoded", "rate_coded"], rows, str(out_dir / "fig12.csv"))


def figure_fig6a(out_dir: Path, n: int = 10, k: int = 5, mu: float = 1.0, points: int = 201):
    dist = ShiftedExponential(mu)
    specs = [SchemeSpec.uncoded(n), SchemeSpec.repetition(n, k), SchemeSpec.mds(n, k)]
    t = np.linspace(0.0, 1.0, points)
    cols = [cdf_overall(t, dist, sp) for sp in specs]
    rows = [[_fmt(t[i])] + [_fmt(c[i]) for c in cols] for i in range(points)]
    _write_rows(["t", "cdf_uncoded", "cdf_repetition", "cdf_mds"], rows, str(out_dir / "fig6a.csv"))


def figure_fig11(out_dir: Path, seed: int, epochs: int = 20, alpha: float = 0.5):
    task = make_synthetic("linreg", seed=stream_seed(seed, "fig11-data"))
    step = tune_step(task)
    run_seed = stream_seed(seed, "fig11")
    shuffled = run_experiment(task, "coded", epochs, alpha=alpha, seed=run_seed, step=step)
    fixed = run_experiment(task, "none", epochs, alpha=alpha, seed=run_seed, step=step)
    rows = [[a.epoch, _fmt(b.objective), _fmt(a.objective), _fmt(a.wall_none), _fmt(a.wall_uncoded), _fmt(a.wall_coded)]
            for a, b in zip(shuffled, fixed)]
    _write_rows(["epoch", "objective_none", "objective_shuffled", "wall_none", "wall_uncoded", "wall_coded"], rows,
                str(out_dir / "fig11.csv"))


def cmd_figure_data(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    figs = ["fig12", "fig6a", "fig11"] if args.figure == "all" else [args.figure]
    for f in figs:
        if f == "fig12":
            figure_fig12(out)
        elif f == "fig6a":
            figure_fig6a(out)
        else:
            figure_fig11(out, args.seed)


# --------------------------------------------------------------------------
# parser


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = _Parser(prog="codedml", description="Coded distributed computation and coded data shuffling toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True
    subs = {}

    def add(name, func, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="JSON file of flag values; command-line flags win")
        p.add_argument("--seed", type=_seed, default=0, help="master seed (unsigned 64-bit, default 0)")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("plan-code", cmd_plan_code, "optimal code dimension under the shifted-exponential model")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--scheme", choices=["mds", "repetition", "uncoded"], default="mds")
    p.add_argument("--out")

    p = add("sim-runtime", cmd_sim_runtime, "simulate the job completion time distribution")
    p.add_argument("--code", required=True, help="e.g. mds:n=10,k=5, repetition:n=10,k=5, uncoded:n=10")
    p.add_argument("--reps", type=int, default=10000)
    _add_latency(p)
    p.add_argument("--out", help="per-run CSV")
    p.add_argument("--summary", help="summary JSON (default stdout)")

    p = add("matmul", cmd_matmul, "coded matrix-vector product")
    p.add_argument("--matrix", required=True)
    p.add_argument("--vector", required=True)
    p.add_argument("--code", required=True)
    p.add_argument("--mode", choices=["exact", "sim"], default="exact")
    p.add_argument("--responders", help="comma-separated worker order for exact mode")
    _add_latency(p)
    p.add_argument("--out")

    p = add("gd", cmd_gd, "coded gradient descent for least squares")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--k1", type=int, default=8)
    p.add_argument("--k2", type=int, default=8)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--gamma", default="auto", help="step size or 'auto' (1 / largest eigenvalue of A^T A)")
    p.add_argument("--mode", choices=["exact", "sim", "live"], default="exact")
    p.add_argument("--matrix")
    p.add_argument("--labels")
    p.add_argument("--rows", type=int, default=200)
    p.add_argument("--cols", type=int, default=20)
    p.add_argument("--sticky-stragglers", action="store_true")
    p.add_argument("--timeout", type=float, default=30.0)
    _add_latency(p)
    p.add_argument("--out")

    p = add("shuffle-rate", cmd_shuffle_rate, "uncoded and coded shuffling rates")
    p.add_argument("--q", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--measure", action="store_true", help="also simulate shuffles and report measured rows")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--broadcast", choices=["full", "tree", "none"], default="full")
    p.add_argument("--out")

    p = add("shuffle-sim", cmd_shuffle_sim, "per-epoch shuffle traffic")
    p.add_argument("--q", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--verify", action="store_true", help="move real rows and check every delivery")
    p.add_argument("--cols", type=int, default=4)
    p.add_argument("--out")

    p = add("psgd", cmd_psgd, "parallel SGD under a shuffling scheme")
    p.add_argument("--task", choices=["linreg", "logistic"], default="linreg")
    p.add_argument("--scheme", choices=list(SCHEMES), default="coded")
    p.add_argument("--alpha", type=float, default=0.5, help="time to send 1/n of the data")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--s", type=int, help="cache rows per worker (default 2q/n)")
    p.add_argument("--step", type=float)
    p.add_argument("--data", help="dataset file, label in the last column")
    p.add_argument("--rows", type=int, default=1000)
    p.add_argument("--cols", type=int, default=100)
    p.add_argument("--out")

    p = add("serve-worker", cmd_serve_worker, "run one worker")
    p.add_argument("--listen", required=True, help="HOST:PORT (port 0 picks a free port)")
    p.add_argument("--assignment", required=True)

    p = add("run-master", cmd_run_master, "run one coded job against live workers")
    p.add_argument("--workers", required=True, help="comma-separated HOST:PORT list in worker order")
    p.add_argument("--code", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--padding-rows", type=int, default=0)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--shutdown", action="store_true", help="send SHUTDOWN to the workers afterwards")
    p.add_argument("--out")

    p = add("encode", cmd_encode, "write per-worker assignment files for a matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--code", required=True)
    p.add_argument("--out-dir", required=True)

    p = add("figure-data", cmd_figure_data, "CSV series behind the rate, runtime-CDF and PSGD figures")
    p.add_argument("--figure", choices=["fig12", "fig6a", "fig11", "all"], default="all")
    p.add_argument("--out-dir", required=True)

    return parser, subs


def _config_path(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.partition("=")[2]
    return None


def _apply_config(subs, argv):
    """Load ``--config`` into the subparser defaults before the real parse."""
    path = _config_path(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    if path is None or command not in subs:
        return
    sp = subs[command]
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    known = {a.dest for a in sp._actions} - {"help", "config", "func"}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    for a in sp._actions:
        if a.dest in cfg:
            a.required = False
            if a.type is not None and cfg[a.dest] is not None:
                try:
                    cfg[a.dest] = a.type(str(cfg[a.dest]))
                except (ValueError, argparse.ArgumentTypeError) as e:
                    raise UsageError(f"bad config value for {a.dest}: {e}") from None
            if a.choices is not None and cfg[a.dest] not in a.choices:
                raise UsageError(f"bad config value for {a.dest}: {cfg[a.dest]!r}")
    sp.set_defaults(**cfg)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        _apply_config(subs, argv)
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        print(f"codedml: error: {e}", file=sys.stderr)
        return 2
    try:
        rc = args.func(args)
    except (UsageError, InvalidParameter) as e:
        print(f"codedml: error: {e}", file=sys.stderr)
        return 2
    except (CodedError, OSError, RuntimeError, ArithmeticError) as e:
        print(f"codedml: failed: {e}", file=sys.stderr)
        return 1
    return int(rc or 0)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
