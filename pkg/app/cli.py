"""
Command-line entry point: python -m app.cli <command> ...

    gen       --config C --out D.gabd
    train     --config C --data D.gabd --out model.gabw
    infer     --config C --ckpt F --case-id K [--data D.gabd]
    baseline  --config C --kind {direct,gp-m12,gp-m32,gp-rbf} [--data D.gabd]
    eval      --config C --runs N [--out DIR]

Exit codes: 0 success, 1 stage failure, 2 configuration error.
"""

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from pydantic import ValidationError

from .config import settings
from .logging_conf import configure_logging

log = logging.getLogger("app.cli")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2
BLAS_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _pin_threads(n: int) -> None:
    # BLAS reads these at import time, so this runs before numpy is loaded
    for var in BLAS_ENV:
        os.environ[var] = str(n)
    settings.threads = n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed (u64)")
    common.add_argument("--threads", type=int, default=None, help="worker threads; 1 is bit-reproducible")
    common.add_argument("--format", choices=["csv"], default="csv", help="format of printed tables")

    parser = argparse.ArgumentParser(prog="gabi", description="Geometric autoencoder priors for inverse problems")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train the autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", parents=[common], help="posterior sampling for one test case")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--case-id", type=int, required=True)
    p.add_argument("--data", default=None)

    p = sub.add_parser("baseline", parents=[common], help="run a comparison method on the test cases")
    p.add_argument("--kind", required=True, choices=["direct", "gp-m12", "gp-m32", "gp-rbf"])
    p.add_argument("--data", default=None)

    p = sub.add_parser("eval", parents=[common], help="full experiment")
    p.add_argument("--runs", type=int, default=None, help="number of held-out test cases")
    p.add_argument("--out", default=None)
    return parser


def _load(args):
    from .services.experiment import load_config

    config = load_config(args.config)
    raw = config.model_dump()
    if args.seed is not None:
        raw["seed"] = args.seed
    if getattr(args, "data", None):
        raw["dataset"]["path"] = args.data
    if getattr(args, "runs", None) is not None:
        raw["dataset"]["n_test"] = args.runs
    if getattr(args, "ckpt", None):
        raw["checkpoint"] = args.ckpt
    return type(config).model_validate(raw)


def cmd_gen(config, args) -> None:
    from .services.dataset import write_dataset
    from .services.experiment import generate_dataset, stage, GENERATE
    from .utils import stream

    with stage("generate"):
        n = config.dataset.n_train + config.dataset.n_test
        ds = generate_dataset(config, n, stream(config.seed, GENERATE), settings.threads)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")


def cmd_train(config, args) -> None:
    from .services.checkpoint import save_checkpoint
    from .services.experiment import prepare_data, stage, TRAIN
    from .services.training import train_autoencoder
    from .utils import stream

    with stage("train"):
        train, _ = prepare_data(config, settings.threads)
        arch = config.model.architecture(train.samples[0][0].dim, train.n_channels)
        ckpt, trace = train_autoencoder(train, arch, config.train, stream(config.seed, TRAIN))
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out)
        trace.write_csv(out.with_suffix(".loss_trace.csv"))
    print(f"wrote {out} (final loss {trace.total[-1]:.4e})")


def _print_rows(rows, metrics) -> None:
    from .services.metrics import metrics_csv

    sys.stdout.write(metrics_csv(rows, metrics))


def cmd_infer(config, args) -> None:
    from .services.checkpoint import load_checkpoint
    from .services.experiment import (INFER, build_cases, dump_case, infer_case, method_rows, prepare_data,
                                      stage, target_channels)
    from .services.inversion import write_query_samples
    from .storage import run_dir
    from .utils import stream

    with stage("infer"):
        train, test = prepare_data(config, settings.threads)
        cases = build_cases(config, test)
        if not 0 <= args.case_id < len(cases):
            raise IndexError(f"case id {args.case_id} out of range for {len(cases)} test cases")
        case = cases[args.case_id]
        ckpt = load_checkpoint(config.checkpoint)
        method = config.inference_methods[0]
        res = infer_case(config, ckpt, case, method, stream(config.seed, INFER, 0, case.case_id))
        root = run_dir(config.output_dir, "infer")
        channels = target_channels(config, train.n_channels)
        dump_case(root, f"gabi-{method}", case, res, channels)
        if config.query_nodes:
            write_query_samples(res.ensemble, config.query_nodes, root / "query_samples.csv",
                                channel=config.observation.channel)
    _print_rows(method_rows(f"gabi-{method}", [case], [res], channels, None), config.metrics)


def cmd_baseline(config, args) -> None:
    from .services.checkpoint import save_checkpoint
    from .services.experiment import (build_cases, direct_case, gp_case, method_rows, prepare_data, stage,
                                      target_channels, train_direct_baseline)
    from .services.graph_gp import KIND_ALIASES
    from .storage import run_dir
    from .utils import ordered_map

    with stage(f"baseline:{args.kind}"):
        train, test = prepare_data(config, settings.threads)
        cases = build_cases(config, test)
        train_seconds = None
        if args.kind == "direct":
            t0 = time.perf_counter()
            dm = train_direct_baseline(config, train)
            train_seconds = time.perf_counter() - t0
            save_checkpoint(dm, run_dir(config.output_dir, "baseline") / "direct_map.gabw")
            results = ordered_map(lambda c: direct_case(dm, c), cases, settings.threads)
        else:
            results = ordered_map(lambda c: gp_case(config, KIND_ALIASES[args.kind], c), cases, settings.threads)
    rows = method_rows(args.kind, cases, results, target_channels(config, train.n_channels), train_seconds)
    _print_rows(rows, config.metrics)


def cmd_eval(config, args) -> None:
    from .services.experiment import run_experiment

    result = run_experiment(config, threads=settings.threads, output_dir=args.out)
    log.info("metrics written to %s", result.run_dir / "metrics.csv")
    _print_rows(result.rows, config.metrics)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "baseline": cmd_baseline, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _pin_threads(args.threads or settings.threads)
    configure_logging(run_id=args.command)

    from .services.errors import ConfigError, GabiError

    try:
        config = _load(args)
        missing = config.missing_files()
        if missing:
            raise ConfigError(f"referenced files do not exist: {missing}")
        COMMANDS[args.command](config, args)
    except (ConfigError, ValidationError) as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except GabiError as e:
        log.error("%s", e)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
