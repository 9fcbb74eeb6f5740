"""Command-line entry point.

Exit codes: 0 ok, 1 usage, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .config import TASKS, load_config
from .data import (gen_graphs, gen_multisource, gen_shapes, gen_token_sentiment,
                   save_csv_dataset, save_edge_list)
from .fusion import ConfigError
from .harness import (arm_loss_config, build_arm_model, build_datasets, run_cell,
                      run_experiment, summarize)
from .models import FUSION_MODES
from .tensor import NonFiniteError
from .train import grad_check, model_loss_fn

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOL = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="affuse", description="Adaptive feature fusion experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    gen.add_argument("--task", required=True, choices=TASKS)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n", type=int, default=None, help="number of samples")

    run = sub.add_parser("run", help="run a comparative experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default=None, help="output directory (overrides output_dir)")

    gc = sub.add_parser("grad-check", help="finite-difference check of every arm's model")
    gc.add_argument("--config", required=True)
    gc.add_argument("--n-coords", type=int, default=20)

    ev = sub.add_parser("eval", help="train and evaluate a single (arm, seed) cell")
    ev.add_argument("--config", required=True)
    ev.add_argument("--arm", required=True, choices=FUSION_MODES)
    ev.add_argument("--seed", type=int, required=True)
    return parser


def cmd_gen_data(args) -> int:
    defaults = {"multisource": 2500, "images": 750, "sentiment": 750, "graphs": 300}
    n = args.n if args.n is not None else defaults[args.task]
    if args.task == "multisource":
        save_csv_dataset(gen_multisource(n, seed=args.seed), args.out)
    elif args.task == "graphs":
        save_edge_list(gen_graphs(n, seed=args.seed), args.out)
    elif args.task == "images":
        ds = gen_shapes(n, seed=args.seed)
        with open(args.out, "wb") as fh:
            np.savez(fh, images=ds.images, labels=ds.labels)
    else:
        ds = gen_token_sentiment(n, seed=args.seed)
        with open(args.out, "wb") as fh:
            np.savez(fh, tokens=ds.tokens, labels=ds.labels)
    print(f"wrote {n} {args.task} samples to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    report = run_experiment(cfg, args.out, log=lambda msg: print(msg, flush=True))
    print(summarize(report))
    failed = [r for r in report.results if r.status != "ok"]
    return EXIT_NUMERIC if failed else EXIT_OK


def grad_check_config(cfg, n_coords: int = 20, n_samples: int = 4) -> dict[str, float]:
    """Max relative gradient error per arm on a small training batch, dropout off."""
    seed = sorted(cfg.seeds)[0]
    train_ds, _ = build_datasets(cfg, seed)
    idx = np.arange(min(n_samples, len(train_ds)))
    dropout = cfg.model.fusion.dropout_p
    cfg.model.fusion.dropout_p = 0.0
    errors = {}
    try:
        for arm in cfg.arms:
            model = build_arm_model(cfg, arm, seed)
            loss_fn = model_loss_fn(model, train_ds.inputs(idx), train_ds.labels[idx],
                                    arm_loss_config(cfg, arm))
            errors[arm] = grad_check(loss_fn, model.parameters(), n_coords, seed)
    finally:
        cfg.model.fusion.dropout_p = dropout
    return errors


def cmd_grad_check(args) -> int:
    cfg = load_config(args.config)
    errors = grad_check_config(cfg, args.n_coords)
    for arm, err in errors.items():
        print(f"{arm}: max relative error {err:.3e}")
    worst = max(errors.values())
    print(f"max relative error {worst:.3e} ({'ok' if worst <= GRAD_TOL else 'FAIL'})")
    return EXIT_OK if worst <= GRAD_TOL else EXIT_NUMERIC


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.arm not in FUSION_MODES:
        raise UsageError(f"unknown arm {args.arm!r}")
    result, _ = run_cell(cfg, args.arm, args.seed)
    print(json.dumps(result.to_dict(), indent=2))
    return EXIT_OK if result.status == "ok" else EXIT_NUMERIC


COMMANDS = {"gen-data": cmd_gen_data, "run": cmd_run, "grad-check": cmd_grad_check,
            "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def cli(argv=None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
