"""``bh`` command line: reproduce the matrix-learning experiments at desk scale.

Every subcommand accepts ``--config FILE`` (flat ``key=value`` lines, ``#``
comments); explicit flags override config values.  Exit codes: 0 success,
2 configuration error, 3 data-format error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import experiments as ex
from . import hesstrack
from .data import DataFormatError, load_dataset
from .factorization import write_trace_csv
from .svg import heatmap, line_plot

log = logging.getLogger("bh")

EXIT_CONFIG = 2
EXIT_DATA = 3


class ConfigError(ValueError):
    pass


def _write_rows(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([repr(float(r[f])) if isinstance(r[f], (float, np.floating)) else r[f] for f in fields])


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def _angle_plot(trace, label, title):
    return line_plot(
        [(label, [r["epoch"] for r in trace], [r["mean_angle_deg"] for r in trace])],
        title=title,
        xlabel="epoch",
        ylabel="average angle (deg)",
    )


# -- subcommands -------------------------------------------------------------


def cmd_synth_approx(args) -> int:
    res = ex.synth_approx(args.n, args.n_mu, args.seed, args.epochs, args.m, args.test_m, args.lr_q, args.lr_d)
    write_trace_csv(res.trace, os.path.join(args.out, "trace.csv"))
    np.savetxt(os.path.join(args.out, "H.csv"), res.target, delimiter=",", fmt="%.17g")
    res.model.save(os.path.join(args.out, "model.bin"))
    _write_text(os.path.join(args.out, "angle.svg"), _angle_plot(res.trace, f"H, n_mu={args.n_mu}", f"n={args.n}"))
    print(f"final average angle: {res.final_angle:.2f} deg")
    return 0


def cmd_nmu_sweep(args) -> int:
    nmus = _int_list(args.n_mus) if args.n_mus else list(range(0, args.n + 1, max(1, args.n // 16)))
    if any(not 0 <= k <= args.n for k in nmus):
        raise ConfigError(f"n_mu values must lie in 0..{args.n}")
    rows = ex.nmu_sweep(args.n, nmus, range(args.seed, args.seed + args.seeds), args.epochs, args.m, args.lr_q, args.lr_d, args.workers)
    summary = ex.summarize_sweep(rows)
    _write_rows(os.path.join(args.out, "sweep.csv"), rows, ["n_mu", "seed", "final_angle_deg"])
    _write_rows(os.path.join(args.out, "sweep_summary.csv"), summary, ["n_mu", "mean_angle_deg", "runs"])
    plot = line_plot(
        [("mean final angle", [r["n_mu"] for r in summary], [r["mean_angle_deg"] for r in summary])],
        title=f"n={args.n}",
        xlabel="n_mu",
        ylabel="average angle (deg)",
    )
    _write_text(os.path.join(args.out, "sweep.svg"), plot)
    for r in summary:
        print(f"n_mu={r['n_mu']:4d}  angle={r['mean_angle_deg']:.2f} deg  ({r['runs']} runs)")
    return 0


def cmd_rotation(args) -> int:
    res = ex.rotation(args.n, args.seed, args.epochs, args.m, args.test_m, args.lr_q, args.exact, args.starts)
    write_trace_csv(res.trace, os.path.join(args.out, "trace.csv"))
    with open(os.path.join(args.out, "model.bin"), "wb") as fh:
        fh.write(res.model.to_bytes())
    label = "butterfly R" if args.exact else "Haar R"
    _write_text(os.path.join(args.out, "angle.svg"), _angle_plot(res.trace, label, f"rotation, n={args.n}"))
    print(f"final average angle: {res.final_angle:.2f} deg")
    print(f"loss ratio final/initial: {res.extra['final_loss'] / res.extra['initial_loss']:.3e}")
    return 0


def cmd_covariance(args) -> int:
    if not args.data:
        raise ConfigError("covariance needs --data PATH")
    data = load_dataset(args.data, args.format)
    res = ex.covariance_run(data, args.seed, args.epochs, args.m, args.test_m, args.lr_q, args.lr_d)
    res.model.save(os.path.join(args.out, "model.bin"))
    write_trace_csv(res.trace, os.path.join(args.out, "trace.csv"))
    k = res.extra["n_raw"]
    approx = res.model.to_dense()[:k, :k]
    _write_text(os.path.join(args.out, "covariance_true.svg"), heatmap(res.target, "true covariance"))
    _write_text(os.path.join(args.out, "covariance_approx.svg"), heatmap(approx, "approximated covariance"))
    angle = res.final_angle
    report = [
        f"source: {data.provenance}",
        f"rows: {data.rows}",
        f"dimension: {k} (padded to {res.extra['n_padded']})",
        "preprocessing: mean-centered; idx pixels scaled to [0, 1]",
        f"final average angle: {'no valid samples (zero covariance)' if np.isnan(angle) else f'{angle:.2f} deg'}",
    ]
    _write_text(os.path.join(args.out, "report.txt"), "\n".join(report) + "\n")
    print("\n".join(report))
    return 0


def cmd_optimize(args) -> int:
    obj = ex.make_objective(args.objective, args.n, args.seed, args.cond, args.samples)
    u0 = ex.initial_point(args.objective, args.n, args.seed)
    oracle = obj.hessian if args.dense_oracle else None
    runs = {}
    modes = [args.mode] if args.mode == "plain_gd" else [args.mode, "plain_gd"]
    for mode in modes:
        kw = dict(
            mode=mode,
            minibatch=args.minibatch,
            batch_size=args.batch_size,
            reuse=args.reuse,
            tol=args.tol,
            seed=args.seed,
            hessian_oracle=oracle if mode != "plain_gd" else None,
            beta=args.beta if mode != "plain_gd" else args.gd_beta,
            lr_q=args.lr_q,
            lr_d=args.lr_d,
            epsilon=args.epsilon,
            line_search=args.line_search,
        )
        obj.grad_evals = 0
        state, run_log = hesstrack.run(obj, u0.copy(), args.steps, **kw)
        runs[mode] = run_log
        hesstrack.write_log_csv(run_log, os.path.join(args.out, f"log_{mode}.csv"))
        print(f"{mode:22s} steps={len(run_log):6d}  final loss={run_log[-1]['loss']:.3e}  grad evals={obj.grad_evals}")
    plot = line_plot(
        [(m, [r["t"] for r in lg], [r["loss"] for r in lg]) for m, lg in runs.items()],
        title=f"{args.objective}, n={args.n}",
        xlabel="iteration",
        ylabel="loss",
        logy=args.objective != "logistic",
    )
    _write_text(os.path.join(args.out, "compare.svg"), plot)
    return 0


def cmd_bench(args) -> int:
    ns = _int_list(args.sizes)
    rows = ex.bench(ns, args.seed)
    _write_rows(
        os.path.join(args.out, "bench.csv"),
        rows,
        ["n", "forward_muladds", "quadratic_form_muladds", "apply_muladds", "dense_muladds"],
    )
    _write_rows(os.path.join(args.out, "bench_timing.csv"), rows, ["n", "forward_seconds", "dense_seconds"])
    print(f"{'n':>6} {'forward':>10} {'quad form':>10} {'apply':>10} {'dense':>12} {'t_fwd(us)':>10} {'t_dense(us)':>11}")
    for r in rows:
        print(
            f"{r['n']:6d} {r['forward_muladds']:10d} {r['quadratic_form_muladds']:10d} {r['apply_muladds']:10d} "
            f"{r['dense_muladds']:12d} {1e6 * r['forward_seconds']:10.1f} {1e6 * r['dense_seconds']:11.1f}"
        )
    return 0


# -- parser ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, n: int, epochs: int):
    p.add_argument("--config", help="key=value file; flags given on the command line win")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--n", type=int, default=n)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr-q", type=float, default=0.05)
    p.add_argument("--lr-d", type=float, default=0.005)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bh", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-approx", help="learn a synthetic Hessian R diag(|mu|) R^T")
    _common(p, 64, 600)
    p.add_argument("--n-mu", type=int, default=5)
    p.add_argument("--m", type=int, default=1000, help="training vectors")
    p.add_argument("--test-m", type=int, default=1000, help="angle test vectors")
    p.set_defaults(func=cmd_synth_approx)

    p = sub.add_parser("nmu-sweep", help="final angle versus number of dominant eigenvalues")
    _common(p, 64, 500)
    p.add_argument("--n-mus", default="", help="comma-separated n_mu values (default: 17-point grid)")
    p.add_argument("--seeds", type=int, default=5, help="replicates per n_mu")
    p.add_argument("--m", type=int, default=1000)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_nmu_sweep)

    p = sub.add_parser("rotation", help="learn a rotation with a single butterfly")
    _common(p, 64, 300)
    p.add_argument("--m", type=int, default=1000)
    p.add_argument("--test-m", type=int, default=1000)
    p.add_argument("--exact", action="store_true", help="target is itself a random butterfly")
    p.add_argument("--starts", type=int, default=1, help="random restarts (best kept)")
    p.set_defaults(func=cmd_rotation)

    p = sub.add_parser("covariance", help="approximate a dataset covariance")
    _common(p, 0, 50)
    p.add_argument("--data", help="dataset path (idx images or csv)")
    p.add_argument("--format", choices=["idx", "csv"], default="idx")
    p.add_argument("--m", type=int, default=2000)
    p.add_argument("--test-m", type=int, default=1000)
    p.set_defaults(func=cmd_covariance)

    p = sub.add_parser("optimize", help="gradient descent with a tracked butterfly Hessian")
    _common(p, 64, 0)
    p.set_defaults(lr_q=1.0, lr_d=1.0)
    p.add_argument("--objective", choices=["quadratic", "lstsq", "logistic", "rosenbrock"], default="quadratic")
    p.add_argument("--mode", choices=list(hesstrack.MODES), default="track_hessian")
    p.add_argument("--minibatch", choices=["full_batch", "recompute_prev", "reuse"], default="full_batch")
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--reuse", type=int, default=4)
    p.add_argument("--samples", type=int, default=1000, help="dataset rows for lstsq/logistic")
    p.add_argument("--cond", type=float, default=100.0)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--gd-beta", type=float, default=1.0, help="step size of the plain GD baseline")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--line-search", action="store_true")
    p.add_argument("--dense-oracle", action="store_true", help="log angle to the true Hessian")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("bench", help="MulAdd counts and timings versus dense products")
    _common(p, 0, 0)
    p.add_argument("--sizes", default="256,1024,4096")
    p.set_defaults(func=cmd_bench)
    return parser


def _read_config(path) -> dict[str, str]:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    out = {}
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in _read_config(args.config).items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"bad value for {key}: {raw!r}")
        defaults[key] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _validate(args) -> None:
    if getattr(args, "epochs", 0) < 0:
        raise ConfigError("epochs must be non-negative")
    if args.command in ("synth-approx", "nmu-sweep", "rotation") and args.n < 1:
        raise ConfigError("n must be positive")
    if args.command == "rotation" and (args.n < 2 or args.n & (args.n - 1)):
        raise ConfigError("rotation learning needs n to be a power of two")
    if args.command == "synth-approx" and not 0 <= args.n_mu <= args.n:
        raise ConfigError("n_mu must lie in 0..n")
    if args.command == "optimize" and (args.n < 2 or args.n & (args.n - 1)):
        raise ConfigError("optimize needs n to be a power of two")
    for name in ("lr_q", "lr_d"):
        if getattr(args, name, 1.0) <= 0:
            raise ConfigError(f"{name} must be positive")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        _validate(args)
        os.makedirs(args.out, exist_ok=True)
        return args.func(args)
    except ConfigError as e:
        print(f"bh: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as e:
        print(f"bh: data format error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"bh: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
