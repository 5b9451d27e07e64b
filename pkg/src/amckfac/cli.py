"""Command-line entry point: ``amckfac {train,solve,calibrate,sweep}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, OPTIMIZERS, load_config
from .errors import AmcError
from .experiment import TrainingAborted, run_calibrate, run_solve, run_training, sweep


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "images", None) or getattr(args, "labels", None):
        cfg = cfg.replace(data__images=args.images, data__labels=args.labels)
    if getattr(args, "synthetic", False):
        cfg = cfg.replace(data__images=None, data__labels=None)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(train__seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.optimizer:
        cfg = cfg.replace(train__optimizer=args.optimizer)
    epochs = args.epochs or cfg.train.default_epochs(cfg.train.optimizer)
    cfg = cfg.replace(train__epochs=epochs)
    try:
        record = run_training(cfg, out_dir=args.out)
    except TrainingAborted as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return 2
    summary = record.summary()
    print(json.dumps({k: summary[k] for k in (
        "optimizer", "epochs_completed", "epochs_to_full_train_accuracy", "final_train_acc",
        "final_test_acc", "mean_update_rel_err")}, indent=2))
    return 0


def cmd_solve(args) -> int:
    cfg = _load(args)
    _, report = run_solve(args.matrix, args.rhs, cfg, bits=args.bits, out_dir=args.out)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load(args)
    report = run_calibrate(cfg, trials=args.trials, bits=args.bits, out_dir=args.out, epochs=args.workload_epochs)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    best, table = sweep(cfg, args.optimizer, seeds=range(args.seeds), epochs=args.epochs)
    result = {"optimizer": args.optimizer, "best": best, "table": table}
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / f"sweep_{args.optimizer}.json").write_text(json.dumps(result, indent=2))
    print(json.dumps(result, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amckfac", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="run one training experiment")
    common(p)
    p.add_argument("--optimizer", choices=OPTIMIZERS)
    p.add_argument("--epochs", type=int, help="default: [train] epochs, or baseline_epochs for sgdm/adam")
    p.add_argument("--synthetic", action="store_true", help="ignore IDX paths, use the synthetic set")
    p.add_argument("--images", help="EMNIST letters IDX image file")
    p.add_argument("--labels", help="EMNIST letters IDX label file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve", help="solve A X = B from text files through BlockAMC")
    common(p)
    p.add_argument("--matrix", required=True)
    p.add_argument("--rhs", required=True)
    p.add_argument("--bits", type=int, default=24)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("calibrate", help="LP / HP-INV error statistics on the KFAC workload")
    common(p)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--bits", type=int, default=24)
    p.add_argument("--workload-epochs", type=int, default=5)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("sweep", help="hyperparameter grid search by epochs-to-100%")
    common(p)
    p.add_argument("--optimizer", choices=OPTIMIZERS, required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int)
    p.add_argument("--synthetic", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (AmcError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
