"""``mcra`` command line: generate, train, eval, solve, bench, report.

Exit codes: 0 success, 1 usage error, 2 I/O, format or contract error,
3 numeric failure, 4 plan error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import gnn
from .channel import NetworkConfig, generate_dataset, read_dataset, write_dataset
from .errors import ContractViolation, FormatError, McraError, NumericFailure, PlanError
from .harness import ExperimentPlan, desk_plan, emit_report, read_table_csv, run_algorithm, run_plan
from .trainer import TrainConfig, evaluate, summarize, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_PLAN = 0, 1, 2, 3, 4

_net = NetworkConfig(D=1, M=1)
_tc = TrainConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with status 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="mcra", description="Multi-channel power allocation: data, solvers, learning, benchmarks.",
                formatter_class=fmt)
    p.add_argument("--threads", type=int, default=None,
                   help="cap on BLAS/OpenMP worker threads; unset uses machine parallelism")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    g = sub.add_parser("generate", help="sample a channel dataset", formatter_class=fmt)
    g.add_argument("--d", type=int, default=10, help="transceiver pairs")
    g.add_argument("--m", type=int, default=2, help="channels")
    g.add_argument("--samples", type=int, default=1000, help="number of instances")
    g.add_argument("--seed", type=int, default=0, help="64-bit dataset seed")
    g.add_argument("--out", required=True, help="dataset file to write")
    g.add_argument("--area", type=float, default=_net.area_side, help="side of the square area, m")
    g.add_argument("--dmin", type=float, default=_net.d_min, help="min link length, m")
    g.add_argument("--dmax", type=float, default=_net.d_max, help="max link length, m")
    g.add_argument("--gamma", type=float, default=_net.gamma, help="path-loss exponent")
    g.add_argument("--noise", type=float, default=_net.noise_power, help="noise power, W")
    g.add_argument("--pmax", type=float, default=_net.p_max, help="per-user power budget, W")

    t = sub.add_parser("train", help="train the message-passing allocator", formatter_class=fmt)
    t.add_argument("--data", required=True, help="training dataset")
    t.add_argument("--val", default=None, help="validation dataset for best-model selection")
    t.add_argument("--out", required=True, help="checkpoint path; the log goes to <out>.log.csv")
    t.add_argument("--epochs", type=int, default=_tc.epochs, help="passes over the training set")
    t.add_argument("--batch", type=int, default=_tc.batch_size, help="batch size")
    t.add_argument("--lr", type=float, default=_tc.lr, help="weight step size")
    t.add_argument("--lambda-lr", type=float, default=_tc.lambda_lr, help="multiplier step size")
    t.add_argument("--rounds", type=int, default=_tc.rounds, help="message-passing rounds")
    t.add_argument("--dual-on", choices=["pre", "post"], default=_tc.dual_mode,
                   help="budget term on raw outputs (pre) or rescaled powers (post)")
    t.add_argument("--optimizer", choices=["sgd", "adam"], default=_tc.optimizer, help="weight update rule")
    t.add_argument("--seed", type=int, default=_tc.seed, help="init and shuffling seed")
    t.add_argument("--policy", choices=["jcpgnn-m", "icp"], default=_tc.policy,
                   help="output stage: budget rescaling or per-channel cap")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset", formatter_class=fmt)
    e.add_argument("--model", required=True, help="checkpoint from train")
    e.add_argument("--data", required=True, help="dataset to evaluate on")
    e.add_argument("--out", required=True, help="per-instance CSV")

    s = sub.add_parser("solve", help="run a non-learned allocator", formatter_class=fmt)
    s.add_argument("--algo", choices=["ewmmse", "heuristic", "equal", "icp", "bruteforce"], default="ewmmse",
                   help="allocator")
    s.add_argument("--data", required=True, help="dataset to solve")
    s.add_argument("--out", required=True, help="per-instance CSV")
    s.add_argument("--grid-levels", type=int, default=21, help="power levels per (pair, channel) for bruteforce")
    s.add_argument("--model", default=None, help="ICP-trained checkpoint, required for --algo icp")

    b = sub.add_parser("bench", help="run an experiment plan", formatter_class=fmt)
    b.add_argument("--plan", default=None, help="JSON plan; unset runs the built-in desk plan")
    b.add_argument("--out", default=None, help="output directory (overrides the plan)")
    b.add_argument("--reps", type=int, default=3, help="timing repetitions")

    r = sub.add_parser("report", help="assemble CSV tables into a markdown report", formatter_class=fmt)
    r.add_argument("--inputs", nargs="+", required=True, help="CSV tables written by bench")
    r.add_argument("--out", required=True, help="markdown file to write")
    return p


def cmd_generate(a) -> None:
    cfg = NetworkConfig(D=a.d, M=a.m, area_side=a.area, d_min=a.dmin, d_max=a.dmax, gamma=a.gamma,
                        noise_power=a.noise, p_max=a.pmax, seed=a.seed)
    ds = generate_dataset(cfg, a.samples)
    write_dataset(ds, a.out)
    print(f"wrote {len(ds)} samples (D={a.d}, M={a.m}) to {a.out}; sha256 {ds.digest()}")


def cmd_train(a) -> None:
    data = read_dataset(a.data)
    val = read_dataset(a.val) if a.val else None
    tc = TrainConfig(epochs=a.epochs, batch_size=a.batch, lr=a.lr, lambda_lr=a.lambda_lr,
                     optimizer=a.optimizer, dual_mode=a.dual_on, seed=a.seed, rounds=a.rounds,
                     policy=a.policy)
    model, log = train(data, val, None, tc)
    gnn.save_model(model, a.out)
    log_path = Path(a.out).with_suffix(".log.csv")
    log.to_csv(log_path)
    best = model.metadata.get("best_val_sum_rate")
    print(f"saved {a.out} and {log_path}" + (f"; best validation sum rate {best:.4f}" if best else ""))


def _model_policy(model: gnn.GnnModel) -> str:
    return model.metadata.get("train_config", {}).get("policy", "jcpgnn-m")


def cmd_eval(a) -> None:
    model = gnn.load_model(a.model)
    data = read_dataset(a.data)
    report = evaluate(model, data, policy=_model_policy(model))
    report.to_csv(a.out)
    print(f"mean sum rate {report.mean_sum_rate:.6g} (std {report.std_sum_rate:.6g}), "
          f"violations {report.violations}, {report.time_per_instance:.3g} s/instance")


def cmd_solve(a) -> None:
    data = read_dataset(a.data)
    model = None
    if a.algo == "icp":
        if a.model is None:
            raise UsageError("--algo icp needs --model (an ICP-trained checkpoint)")
        model = gnn.load_model(a.model)
    P, elapsed = run_algorithm(a.algo, data, model, a.grid_levels)
    report = summarize(data.gains, P, data.config, elapsed)
    report.to_csv(a.out)
    print(f"{a.algo}: mean sum rate {report.mean_sum_rate:.6g} (std {report.std_sum_rate:.6g}), "
          f"violations {report.violations}, {report.time_per_instance:.3g} s/instance")


def cmd_bench(a) -> None:
    plan = ExperimentPlan.load(a.plan) if a.plan else desk_plan()
    if a.out:
        plan.output_dir = Path(a.out)
    run_plan(plan, a.reps)
    print(f"report written to {plan.output_dir / 'report.md'}")


def cmd_report(a) -> None:
    tables = []
    for path in a.inputs:
        if not Path(path).exists():
            raise FileNotFoundError(2, "No such file", path)
        tables.append(read_table_csv(path))
    emit_report(tables, a.out)
    print(f"report written to {a.out}")


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "solve": cmd_solve,
            "bench": cmd_bench, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    limit = threadpool_limits(limits=args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limit:
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mcra {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PlanError as exc:
        print(f"mcra {args.command}: plan error: {exc}", file=sys.stderr)
        return EXIT_PLAN
    except NumericFailure as exc:
        print(f"mcra {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ContractViolation, McraError) as exc:
        print(f"mcra {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        where = f"{exc.filename}: " if exc.filename else ""
        print(f"mcra {args.command}: {where}{exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
