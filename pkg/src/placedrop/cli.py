"""The ``placedrop`` command

Exit codes: 0 on success, 1 for an invalid configuration, 2 when training hits a
non-finite value and 3 when a check (gradients, PPM round trip, trends) fails.
"""

from __future__ import annotations

import argparse
import sys
from logging import getLogger
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from placedrop.core.network import Network
from placedrop.domains import (
    CLASSES,
    DOMAINS,
    Dataset,
    export_ppm,
    generate_dataset,
    import_ppm,
    to_bytes,
)
from placedrop.errors import (
    ConfigError,
    ContractError,
    GradientCheckError,
    NumericalError,
    ShapeError,
)
from placedrop.experiment import (
    METHODS,
    ExperimentConfig,
    load_config,
    log_method_means,
    run_experiment,
    sweep_layers,
    sweep_pmax,
)
from placedrop.gradcheck import SUITES, gradcheck
from placedrop.metrics import (
    DomainFeatureSummary,
    ReportRow,
    check_trends,
    evaluate,
    extract_features,
    inter_domain_distance,
    intra_class_distance,
    read_report,
    write_report,
)


logger = getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_CHECK_FAILED = 3


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError({"--set": f"expected KEY=VALUE, got {item!r}"})
        overrides[key.strip()] = value.strip()
    if args.seeds is not None:
        overrides["run.seeds"] = args.seeds
    if args.method is not None:
        overrides["run.methods"] = args.method
    if args.target is not None:
        overrides["run.targets"] = args.target
    return overrides


def _config(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(args.config, _overrides(args), args.out)


def _datasets(config: ExperimentConfig) -> List[Dataset]:
    return generate_dataset(config.data.seed, config.data.per_class, config.data.size)


def gen_data(args: argparse.Namespace) -> int:
    config = _config(args)
    directory = config.out / "data"
    failures = 0
    for dataset in _datasets(config):
        paths = export_ppm(dataset, directory)
        if not args.verify:
            continue
        for image, path in zip(dataset.images, paths):
            if not np.array_equal(to_bytes(import_ppm(path)), to_bytes(image)):
                logger.error(f"{path} does not read back as the image it was written from")
                failures += 1
    if args.verify:
        logger.info(f"Verified the PPM round trip with {failures} failure(s)")
    return EXIT_CHECK_FAILED if failures else EXIT_OK


def train_command(args: argparse.Namespace) -> int:
    run_experiment(_config(args))
    return EXIT_OK


def eval_command(args: argparse.Namespace) -> int:
    """Re-evaluate a checkpoint on each target domain"""
    config = _config(args)
    datasets = _datasets(config)
    seed = config.seeds[0]
    try:
        net = Network.initialize(len(CLASSES), seed).load(args.checkpoint)
    except (ContractError, ShapeError) as error:
        raise ConfigError({"checkpoint": str(error)}) from error
    rows = []
    for target in config.targets:
        sources = Dataset.concat([d for k, d in enumerate(datasets) if k != target])
        summary = DomainFeatureSummary.from_features(
            extract_features(net, sources), sources.labels, sources.domains, len(CLASSES)
        )
        rows.append(
            ReportRow(
                run_id=Path(args.checkpoint).stem,
                seed=seed,
                method=config.methods[0],
                target_domain=DOMAINS[target],
                test_acc=evaluate(net, datasets[target]),
                inter_domain=inter_domain_distance(summary),
                intra_class=intra_class_distance(summary),
                p_max=config.train.place.p_max,
                layers="+".join(layer.value for layer in config.train.place.candidate_layers),
            )
        )
    for row in rows:
        logger.info(f"{row.run_id} on {row.target_domain}: test_acc={row.test_acc:.4f}")
    write_report(rows, config.out / "eval.csv")
    return EXIT_OK


def sweep_pmax_command(args: argparse.Namespace) -> int:
    config = _config(args)
    values = None
    if args.values is not None:
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError({"sweep.p_max": f"expected numbers, got {args.values!r}"})
    sweep_pmax(config, values)
    return EXIT_OK


def sweep_layers_command(args: argparse.Namespace) -> int:
    config = _config(args)
    layer_sets = None
    if args.layer_sets is not None:
        layer_sets = [
            [name.strip() for name in group.split(",") if name.strip()]
            for group in args.layer_sets.split(";")
            if group.strip()
        ]
    sweep_layers(config, layer_sets, baseline=not args.no_baseline)
    return EXIT_OK


def gradcheck_command(args: argparse.Namespace) -> int:
    gradcheck(suites=args.suite or None)
    return EXIT_OK


def report_command(args: argparse.Namespace) -> int:
    path = Path(args.report) if args.report else _config(args).out / "report.csv"
    rows = read_report(path)
    log_method_means(rows)
    checks = check_trends(rows)
    return EXIT_OK if all(check.passed for check in checks) else EXIT_CHECK_FAILED


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="a file of 'key = value' lines")
    parser.add_argument("--out", help="output directory (default PLACEDROP_OUTPUT_DIR)")
    parser.add_argument("--seeds", help="comma separated seeds (run.seeds)")
    parser.add_argument(
        "--method", help=f"comma separated methods (run.methods) from {', '.join(METHODS)}"
    )
    parser.add_argument("--target", help="comma separated target domains or 'all'")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one configuration key, may be repeated",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="placedrop",
        description="Progressive channel dropout for domain generalization",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def command(
        name: str, handler: Callable[[argparse.Namespace], int], summary: str
    ) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=summary)
        _add_common(sub)
        sub.set_defaults(handler=handler)
        return sub

    gen = command("gen-data", gen_data, "render the synthetic domains as PPM files")
    gen.add_argument("--verify", action="store_true", help="read every file back")

    command("train", train_command, "run every (method, seed, target) of the config")

    evaluate_ = command("eval", eval_command, "re-evaluate a checkpoint")
    evaluate_.add_argument("checkpoint", help="a .ckpt file written by 'train'")

    pmax = command("sweep-pmax", sweep_pmax_command, "one run group per p_max")
    pmax.add_argument("--values", help="comma separated values (sweep.p_max)")

    layers = command("sweep-layers", sweep_layers_command, "one run group per layer set")
    layers.add_argument(
        "--layer-sets", help="groups separated by ';', e.g. 'L3;L3,L4' (sweep.layer_sets)"
    )
    layers.add_argument(
        "--no-baseline", action="store_true", help="skip the group without PLACE"
    )

    grad = command("gradcheck", gradcheck_command, "finite difference gradient checks")
    grad.add_argument(
        "--suite", action="append", choices=list(SUITES), help="only run this suite"
    )

    report = command("report", report_command, "summarize a report and check its trends")
    report.add_argument("report", nargs="?", help="a report CSV (default OUT/report.csv)")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.handler(args))
    except ConfigError as error:
        logger.error(str(error))
        return EXIT_CONFIG
    except NumericalError as error:
        logger.error(f"Training aborted: {error}")
        return EXIT_NUMERICAL
    except GradientCheckError as error:
        logger.error(str(error))
        return EXIT_CHECK_FAILED
    except OSError as error:
        logger.error(str(error))
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
