"""Command-line entry point.

Exit codes: 0 success, 1 configuration or input error, 2 compare failure,
3 gradient oracle failure.
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import trainer, yinyang
from .config import RunConfig
from .exceptions import ConfigurationError, DatasetParseError

EXIT_OK, EXIT_CONFIG, EXIT_COMPARE, EXIT_ORACLE = 0, 1, 2, 3


def _int_list(text):
    return [int(x) for x in text.split(",") if x]


def _add_run_options(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--engine", choices=["reference", "fabric"])
    p.add_argument("--workers", dest="n_workers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
    p.add_argument("--lr", type=float)
    p.add_argument("--adjoint-variant", dest="adjoint_variant")
    p.add_argument("--grad-reduction", dest="grad_reduction", choices=["sum", "mean"])
    p.add_argument("--train-data", dest="train_path")
    p.add_argument("--test-data", dest="test_path")
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--trace-events", dest="trace_events",
                   help="write every fabric packet to this file")


_OVERRIDES = ("engine", "n_workers", "epochs", "batch_size", "seeds", "lr",
              "adjoint_variant", "grad_reduction", "train_path", "test_path",
              "n_train", "n_test", "output_dir", "trace_events")


def load_config(args):
    overrides = {k: getattr(args, k, None) for k in _OVERRIDES}
    if args.config:
        return RunConfig.load(args.config, **overrides)
    return RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def build_parser():
    parser = argparse.ArgumentParser(
        prog="eventprop", description="EventProp spiking network training on Yin-Yang data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a Yin-Yang dataset file")
    p.add_argument("output")
    p.add_argument("-n", "--n-points", type=int, default=5000)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--t-min", type=int, default=yinyang.T_MIN)
    p.add_argument("--t-max", type=int, default=yinyang.T_MAX)
    p.add_argument("--keep-ambiguous", action="store_true")

    p = sub.add_parser("train", help="train one network per seed")
    _add_run_options(p)

    p = sub.add_parser("evaluate", help="accuracy and loss of saved weights")
    _add_run_options(p)
    p.add_argument("weights")

    p = sub.add_parser("compare", help="run two engines and compare every trajectory")
    _add_run_options(p)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--engines", default="reference,fabric",
                   help="two engines, comma-separated")

    p = sub.add_parser("grad-check", help="adjoint gradient against a fine-grid oracle")
    p.add_argument("--dt", type=float, default=0.05)
    p.add_argument("--n-steps", type=int, default=600)
    p.add_argument("--adjoint-variant", default="exponential_euler")
    p.add_argument("--n-weights", type=int, default=50)
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("profile", help="ticks per sample and time per batch on the fabric")
    _add_run_options(p)
    p.add_argument("--batch-sizes", type=_int_list, default=None)
    p.add_argument("--n-batches", type=int, default=3)
    return parser


def cmd_generate_data(args):
    samples = yinyang.make_dataset(args.n_points, args.seed, args.t_min, args.t_max,
                                   drop_ambiguous=not args.keep_ambiguous)
    yinyang.save(samples, args.output)
    print(f"wrote {len(samples)} samples to {args.output}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(cfg.output_dir) / "config.json")
    results, median = trainer.train(cfg)
    summary = {"seeds": {r.seed: {"train_accuracy": r.train_accuracy,
                                  "test_accuracy": r.test_accuracy,
                                  "seconds": r.seconds} for r in results},
               "median_test_accuracy": median}
    with open(Path(cfg.output_dir) / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    return EXIT_OK


def cmd_evaluate(args):
    cfg = load_config(args)
    weights = trainer.load_weights(args.weights, cfg.net_dims)
    _, (Xt, yt) = trainer.load_datasets(cfg)
    acc, loss = trainer.evaluate(cfg, weights, Xt, yt)
    print(f"accuracy {acc:.4f} loss {loss:.6f} samples {len(Xt)}")
    return EXIT_OK


def cmd_compare(args):
    cfg = load_config(args)
    engines = args.engines.split(",")
    if len(engines) != 2:
        raise ConfigurationError("--engines needs exactly two names")
    (X, y), _ = trainer.load_datasets(cfg)
    X, y = X[:args.samples], y[:args.samples]
    clf = trainer.make_classifier(cfg, cfg.seeds[0])
    clf._initialize(X[:1], np.arange(cfg.net_dims[-1]))
    runs = [trainer.record_run(cfg, clf.coefs_, X, y, engine=e) for e in engines]
    report = trainer.compare(*runs, threshold=args.threshold)
    print(f"{engines[0]} vs {engines[1]} on {len(X)} samples")
    print(trainer.format_report(report))
    return EXIT_OK if report["passed"] else EXIT_COMPARE


def cmd_grad_check(args):
    tiny = trainer.GradCheckConfig(dt=args.dt, n_steps=args.n_steps,
                                   adjoint_variant=args.adjoint_variant,
                                   n_weights=args.n_weights)
    report = trainer.gradient_oracle_check(tiny)
    if args.verbose:
        for r in report["rows"]:
            print(" ".join(f"{k}={v}" for k, v in r.items()))
    status = ("inconclusive" if report["inconclusive"]
              else "pass" if report["passed"] else "fail")
    print(f"grad-check {status}: {report['n_used']} weights used, "
          f"{report['fraction_within']:.1%} within {tiny.rel_tol:.0%}, "
          f"sign agreement {report['sign_agreement']:.1%}")
    return EXIT_OK if report["passed"] else EXIT_ORACLE


def cmd_profile(args):
    cfg = load_config(args)
    report = trainer.profile(cfg, args.batch_sizes, args.n_batches)
    print(f"expected ticks per sample: {report['expected_ticks']}")
    for run in report["runs"]:
        print(f"batch {run['batch_size']:3d}: ticks {run['ticks_per_sample']} "
              f"{run['ms_per_batch_mean']:.1f} +- {run['ms_per_batch_std']:.1f} ms/batch "
              f"({run['ms_per_sample']:.2f} ms/sample)")
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "grad-check": cmd_grad_check,
    "profile": cmd_profile,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, DatasetParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
