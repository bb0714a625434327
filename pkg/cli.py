"""
Command-line entry point.

    python cli.py [global flags] {fit,train,attack,certify,sweep,plot,dump-advex} ...

Settings come from the environment (or .env), then ``--config``, then flags.
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Tuple

import numpy as np

from attacks import robust_accuracy
from certificates import certified_accuracy_curve, certify_dataset, norm_label, sensitivity_bound
from config import Config, ExperimentConfig, load_experiment_config, setup_logging, with_overrides
from datasets import LabeledDataset, center
from errors import ConfigError, SpcrError
from heads import AnyHead, Classifier
from persistence import load_model, save_model
from projection import ProjectionModel, sparsity_report
from report_formatter import dump_adversarial_grid, read_csv, render_curves, write_certificate_csv
from sweep_graph import RESULTS_FILE, artifact_stem, attack_config, fit_projection, load_datasets, run_sweep, train_head

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spcr",
        description="PCA/SPCA projections, classification heads, certificates and adversarial attacks.",
    )
    parser.add_argument("--config", help="flat key=value experiment file")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--limit", type=int, help="evaluate only the first N test points")
    parser.add_argument("--dataset", choices=["mnist", "cifar-binary", "blobs"])
    parser.add_argument("--head", choices=["mlp", "linear"])
    parser.add_argument("--mnist-dir")
    parser.add_argument("--cifar-dir")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a projection and save it")
    fit.add_argument("--kind", choices=["pca", "spca"], default="spca")
    fit.add_argument("-r", type=int, help="number of components (default: first of the config grid)")
    fit.add_argument("--density", type=float, help="SPCA target density")

    train = sub.add_parser("train", help="fit a projection (or load one) and train a head on it")
    train.add_argument("--kind", choices=["pca", "spca"], default="spca")
    train.add_argument("-r", type=int)
    train.add_argument("--projection", help="projection-only model file from 'fit'")

    for name, helptext in (("attack", "robust accuracy of a saved model"),
                           ("certify", "certified accuracy of a saved linear model")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True)
        p.add_argument("--norm", action="append", choices=["inf", "2"])
        p.add_argument("--epsilon", type=float, action="append")
        if name == "attack":
            p.add_argument("--attack", action="append", choices=["fgsm", "pgd", "mim", "square"])

    sub.add_parser("sweep", help="run the full grid and write results.csv")

    plot = sub.add_parser("plot", help="render accuracy-vs-epsilon curves from a results CSV")
    plot.add_argument("--results", help=f"defaults to <out>/{RESULTS_FILE}")
    plot.add_argument("--svg", help="defaults to <out>/curves.svg")

    dump = sub.add_parser("dump-advex", help="write clean/adversarial PGM images")
    dump.add_argument("--model", required=True)
    dump.add_argument("--attack", choices=["fgsm", "pgd", "mim", "square"], default="fgsm")
    dump.add_argument("--norm", choices=["inf", "2"], default="inf")
    dump.add_argument("--epsilon", type=float, action="append")
    dump.add_argument("--count", type=int, default=8)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_experiment_config(args.config) if args.config else ExperimentConfig()
    config = with_overrides(config, seed=args.seed, output_dir=args.out, limit=args.limit)
    update = {k: v for k, v in (("dataset", args.dataset), ("head", args.head),
                                ("mnist_dir", args.mnist_dir), ("cifar_dir", args.cifar_dir)) if v is not None}
    if update:
        config = ExperimentConfig.model_validate({**config.model_dump(), **update})
    return config


def _splits(config: ExperimentConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    train, test = load_datasets(config)
    return train.head(config.train_limit), test.head(config.limit)


def _fit(config: ExperimentConfig, kind: str, r: Optional[int], train: LabeledDataset) -> ProjectionModel:
    X_centered, centering = center(train.X)
    return fit_projection(config, kind, r or config.components[0], X_centered, centering)


def _load_with_head(path: str) -> Tuple[ProjectionModel, AnyHead]:
    projection, head = load_model(path)
    if head is None:
        raise ConfigError(f"{path} holds a projection only; run 'train' first")
    return projection, head


def cmd_fit(config: ExperimentConfig, args) -> int:
    if args.density is not None:
        config = ExperimentConfig.model_validate({**config.model_dump(), "density": args.density})
    train, _ = _splits(config)
    projection = _fit(config, args.kind, args.r, train)
    path = os.path.join(config.output_dir, "models", f"{config.dataset}_{args.kind}_r{projection.r}.spcr")
    save_model(path, projection)
    print(json.dumps(sparsity_report(projection).summary(), indent=2))
    print(f"Saved projection to {path}")
    return 0


def cmd_train(config: ExperimentConfig, args) -> int:
    train, test = _splits(config)
    if args.projection:
        projection, _ = load_model(args.projection)
    else:
        projection = _fit(config, args.kind, args.r, train)
    head, log = train_head(config, projection, train)
    clean = float(np.mean(Classifier(projection=projection, head=head).predict(test.X) == test.y))
    path = os.path.join(config.output_dir, "models", artifact_stem(config, projection.kind, projection.r) + ".spcr")
    save_model(path, projection, head)
    bound = sensitivity_bound(projection, head)
    print(f"epochs: {len(log.epochs)}  final loss: {log.losses[-1] if log.epochs else float('nan'):.4f}")
    print(f"clean accuracy: {clean:.4f} on {test.N} test points")
    print(f"sensitivity bound: l2 {bound.l2:.4f}, linf {bound.linf:.4f}")
    print(f"Saved model to {path}")
    return 0


def cmd_attack(config: ExperimentConfig, args) -> int:
    projection, head = _load_with_head(args.model)
    _, test = _splits(config)
    for attack in args.attack or config.attacks:
        for p in args.norm or config.norms:
            if attack == "square" and p == "2":
                continue
            for eps in args.epsilon or config.epsilons:
                acc = robust_accuracy(projection, head, test, attack_config(config, attack, p, eps))
                print(f"{attack:6s} {norm_label(p):4s} eps={eps:<6g} accuracy={acc:.6f}")
    return 0


def cmd_certify(config: ExperimentConfig, args) -> int:
    projection, head = _load_with_head(args.model)
    _, test = _splits(config)
    epsilons = sorted(args.epsilon or config.epsilons)
    stem = os.path.splitext(os.path.basename(args.model))[0]
    for p in args.norm or config.norms:
        records = certify_dataset(projection, head, test, p)
        path = os.path.join(config.output_dir, "certificates", f"{stem}_{norm_label(p)}.csv")
        write_certificate_csv(records, path)
        for eps, acc in certified_accuracy_curve(projection, head, test, p, epsilons):
            print(f"certified {norm_label(p):4s} eps={eps:<6g} accuracy={acc:.6f}")
        print(f"Wrote {path}")
    return 0


def cmd_sweep(config: ExperimentConfig, args) -> int:
    table = run_sweep(config)
    print(f"Wrote {len(table)} rows to {os.path.join(config.output_dir, RESULTS_FILE)}")
    return 0


def cmd_plot(config: ExperimentConfig, args) -> int:
    results = args.results or os.path.join(config.output_dir, RESULTS_FILE)
    svg = args.svg or os.path.join(config.output_dir, "curves.svg")
    render_curves(read_csv(results), svg)
    print(f"Wrote {svg}")
    return 0


def cmd_dump_advex(config: ExperimentConfig, args) -> int:
    projection, head = _load_with_head(args.model)
    _, test = _splits(config)
    epsilons: List[float] = sorted(args.epsilon or [0.05, 0.1, 0.2])
    path = os.path.join(config.output_dir, "advex")
    written = dump_adversarial_grid(projection, head, test, attack_config(config, args.attack, args.norm, epsilons[0]),
                                    args.count, path, epsilons=epsilons)
    print(f"Wrote {len(written)} images to {path}")
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "train": cmd_train,
    "attack": cmd_attack,
    "certify": cmd_certify,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
    "dump-advex": cmd_dump_advex,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or Config.LOG_LEVEL)
    try:
        config = resolve_config(args)
        ok, missing = Config.check_environment(config.dataset)
        data_dir = config.mnist_dir if config.dataset == "mnist" else config.cifar_dir
        if not ok and not data_dir:
            logger.warning("%s not set; commands that read %s will fail", ", ".join(missing), config.dataset)
        return COMMANDS[args.command](config, args)
    except (SpcrError, ValueError, ArithmeticError, FileNotFoundError) as e:
        logger.error("%s", e)
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
