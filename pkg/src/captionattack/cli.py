"""Command-line front end.

Subcommands: ``run`` (one attack experiment), ``sweep`` (a hyperparameter
axis), ``transfer`` (re-evaluate stored adversarial images on other
endpoints), ``summarize`` (method-by-metric comparison table), and
``serve-toy`` (host the toy captioner for subprocess/HTTP endpoints).

Exit codes: 0 success, 2 configuration error, 3 oracle error, 4 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import (
    BudgetError,
    ConfigError,
    DataError,
    OracleIOError,
    ProtocolError,
    UnsupportedCapabilityError,
)
from .harness import (
    METHODS,
    SWEEP_AXES,
    ExperimentConfig,
    evaluate_transfer,
    load_dataset,
    run_experiment,
    run_sweep,
    summarize,
)
from .optimizer import DEConfig, GradConfig, PSOConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ORACLE = 3
EXIT_DATA = 4

_ORACLE_ERRORS = (OracleIOError, ProtocolError, BudgetError, UnsupportedCapabilityError)


def _add_run_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--method", choices=METHODS, default="aicattack")
    parser.add_argument("--annotations", required=True,
                        help="COCO-caption JSON or image_path,caption CSV")
    parser.add_argument("--images", required=True, help="image directory")
    parser.add_argument("--oracle", default="toy",
                        help="'toy', 'toy:grid=G,salient_cells=N', 'cmd:<argv>', or an http(s) URL")
    parser.add_argument("--k", type=float, default=0.5,
                        help="attention-region fraction of pixels")
    parser.add_argument("--pixels", type=int, default=500, help="pixel budget m")
    parser.add_argument("--strength", type=int, default=50, help="per-channel delta bound s")
    parser.add_argument("--popsize", type=int, default=50)
    parser.add_argument("--generations", type=int, default=5)
    parser.add_argument("--lambda", dest="weight", type=float, default=0.5,
                        help="differential weight")
    parser.add_argument("--fitness", choices=("bleu1", "bleu2", "bleu4"), default="bleu2")
    parser.add_argument("--samples", type=int, default=0,
                        help="number of dataset entries to attack")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="report.jsonl")
    parser.add_argument("--epsilon", type=float, default=8.0, help="fgsm/pgd step bound")
    parser.add_argument("--grad-iterations", type=int, default=30, help="pgd steps")
    parser.add_argument("--swarm", type=int, default=50, help="pso particles")
    parser.add_argument("--pso-iterations", type=int, default=50)
    parser.add_argument("--linf", type=float, default=16.0, help="pso l-inf budget")
    parser.add_argument("--l2", type=float, default=5.0, help="pso l2 budget")
    parser.add_argument("--budget", type=int, default=None,
                        help="hard cap on oracle calls for the whole run")
    parser.add_argument("--no-save-images", action="store_true",
                        help="skip persisting adversarial PNGs (disables transfer)")


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    return ExperimentConfig(
        method=args.method,
        k=args.k,
        de=DEConfig(
            popsize=args.popsize,
            generations=args.generations,
            weight=args.weight,
            strength=args.strength,
            pixels=args.pixels,
            fitness=args.fitness,
            seed=args.seed,
        ),
        pso=PSOConfig(
            swarm=args.swarm,
            iterations=args.pso_iterations,
            linf_bound=args.linf,
            l2_bound=args.l2,
        ),
        grad=GradConfig(epsilon=args.epsilon, iterations=args.grad_iterations),
        oracle_spec=args.oracle,
        samples=args.samples,
        seed=args.seed,
        out_path=args.out,
        annotations=args.annotations,
        images_dir=args.images,
        call_budget=args.budget,
        save_images=not args.no_save_images,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attack",
                                     description="Adversarial attacks on image captioners")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="attack a dataset sample and write a JSONL report")
    _add_run_arguments(run)

    sweep = sub.add_parser("sweep", help="run one experiment per value of one knob")
    _add_run_arguments(sweep)
    sweep.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sweep.add_argument("--values", required=True,
                       help="comma-separated axis values, e.g. 100,200,500")
    sweep.add_argument("--out-dir", default="sweep",
                       help="directory for per-value reports and the CSV")

    transfer = sub.add_parser("transfer",
                              help="re-caption stored adversarial images on other oracles")
    transfer.add_argument("--report", required=True)
    transfer.add_argument("--oracle", action="append", required=True,
                          help="target endpoint (repeatable)")
    transfer.add_argument("--out-prefix", default=None)

    summ = sub.add_parser("summarize", help="method x metric mean-delta table")
    summ.add_argument("reports", nargs="+")
    summ.add_argument("--csv", default=None, help="also write the table as CSV")

    serve = sub.add_parser("serve-toy", help="serve the toy captioner (stdio or HTTP)")
    serve.add_argument("--grid", type=int, default=4)
    serve.add_argument("--salient-cells", type=int, default=2)
    serve.add_argument("--http", type=int, metavar="PORT", default=None)
    serve.add_argument("--host", default="127.0.0.1")
    return parser


def _parse_values(axis: str, raw: str) -> list:
    values = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        if axis in ("pixels", "iterations", "strength"):
            values.append(int(part))
        else:
            values.append(float(part))
    if not values:
        raise ConfigError("--values produced an empty list")
    return values


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    dataset = load_dataset(cfg.annotations, cfg.images_dir)
    report = run_experiment(cfg, dataset)
    deltas = report.mean_deltas()
    print(f"wrote {len(report.records)} records to {cfg.out_path}")
    print("mean drops: " + "  ".join(f"{k}={v:+.4f}" for k, v in deltas.items()))
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    values = _parse_values(args.axis, args.values)
    reports = run_sweep(cfg, args.axis, values, args.out_dir)
    for value, report in zip(values, reports):
        print(f"{args.axis}={value}: mean {cfg.de.fitness} drop "
              f"{report.mean_deltas()[cfg.de.fitness]:+.4f}")
    print(f"wrote sweep CSV to {args.out_dir}/sweep_{args.axis}.csv")
    return EXIT_OK


def _cmd_transfer(args: argparse.Namespace) -> int:
    reports = evaluate_transfer(args.report, args.oracle, args.out_prefix)
    for spec, report in zip(args.oracle, reports):
        deltas = report.mean_deltas()
        print(f"{spec}: " + "  ".join(f"{k}={v:+.4f}" for k, v in deltas.items()))
    return EXIT_OK


def _cmd_summarize(args: argparse.Namespace) -> int:
    summary = summarize(args.reports)
    print(summary.to_text())
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(summary.to_csv())
        print(f"wrote {args.csv}")
    return EXIT_OK


def _cmd_serve_toy(args: argparse.Namespace) -> int:
    from .serve_toy import serve_http, serve_stdio
    from .toy import ToyCaptionerConfig

    cfg = ToyCaptionerConfig(grid=args.grid, salient_cells=args.salient_cells)
    if args.http is not None:
        serve_http(cfg, args.host, args.http)
    else:
        serve_stdio(cfg)
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "sweep": _cmd_sweep,
        "transfer": _cmd_transfer,
        "summarize": _cmd_summarize,
        "serve-toy": _cmd_serve_toy,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _ORACLE_ERRORS as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        if args.command in ("run", "sweep"):
            print("partial results were flushed; re-run the same command to resume",
                  file=sys.stderr)
        return EXIT_ORACLE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
