"""Command-line entry point: ``adnnperf <subcommand> --config run.json``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import torch

from . import metrics, mitigation, pipeline
from .adnn import save_model
from .baseline import IterConfig, run_baseline
from .pipeline import ConfigError, ExperimentConfig, StageError, Workspace

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

DEFAULT_TAUS = (0.3, 0.4, 0.5, 0.6, 0.7)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _stage(name):
    def wrap(ws, args):
        with ws.lock():
            pipeline.run_stage(ws, name, force=args.force)

    return wrap


def cmd_generate(ws, args):
    model = ws.model()
    generator, _, _, _ = ws.generator()
    seeds, labels, ids = ws.test_seeds(args.seeds)
    suite = pipeline.generate_suite(ws, generator, model, seeds, labels, ids)
    with ws.lock():
        ws.save_suite(suite, "deepperform")
    print(f"deepperform suite: {len(suite)} samples, eta {metrics.degradation_success(suite)}")


def cmd_baseline(ws, args):
    model = ws.model()
    seeds, labels, ids = ws.test_seeds(args.seeds)
    cfg = IterConfig(max_iterations=args.iterations, balance_weight=args.balance_weight, budget=ws.config.budget)
    suite = run_baseline(model, seeds, cfg, args.time_budget, ids, labels)
    with ws.lock():
        ws.save_suite(suite, "iterative_baseline")
    print(f"baseline suite: {len(suite)} samples, eta {metrics.degradation_success(suite)}")


def _suites(ws, args):
    if args.suite:
        return [metrics.load_suite(p) for p in args.suite]
    out = [ws.suite("deepperform")]
    if ws.path("suite_iterative_baseline").exists():
        out.append(ws.suite("iterative_baseline"))
    return out


def cmd_evaluate(ws, args):
    model = ws.model()
    reports = [metrics.compute_report(s, model) for s in _suites(ws, args)]
    sys.stdout.write(metrics.reports_to_csv(reports))


def cmd_sweep(ws, args):
    model = ws.model()
    suite = ws.suite("deepperform")
    rows = metrics.threshold_sweep(model, suite, args.taus)
    text = metrics.rows_to_csv(rows)
    ws.path("sweep.csv").write_text(text)
    sys.stdout.write(text)


def cmd_retrain(ws, args):
    model = ws.model()
    generator, _, _, _ = ws.generator()
    x, y, ids = ws.train_seeds()
    paired = pipeline.generate_suite(ws, generator, model, x, y, ids)
    ds = ws.dataset()
    new, report = mitigation.retrain_adnn(
        model, paired, beta=args.beta, epochs=args.epochs, heldout=(ds.x_test, ds.y_test), rng_seed=ws.config.rng_seed
    )
    save_model(new, ws.path("adnn_retrained.pt"))
    ws.mark("adnn_retrained.pt")
    ws.path("retrain_report.json").write_text(json.dumps(report.to_dict(), indent=1))
    print(json.dumps(report.to_dict(), indent=1))


def cmd_detect(ws, args):
    model = ws.model()
    generator, _, _, _ = ws.generator()
    x, y, ids = ws.train_seeds(args.train_size)
    train_suite = pipeline.generate_suite(ws, generator, model, x, y, ids)
    det = mitigation.train_detector(
        mitigation.extract_features(model, train_suite.seeds),
        mitigation.extract_features(model, train_suite.generated),
        rng_seed=ws.config.rng_seed,
        signature=mitigation.feature_signature(model),
    )
    det.save(ws.path("detector.npz"))
    ws.mark("detector.npz")
    result = mitigation.evaluate_detector(det, model, ws.suite("deepperform"), train_seed_ids=ids)
    ws.path("detector_report.json").write_text(json.dumps(result, indent=1))
    print(json.dumps(result, indent=1))


def cmd_report(ws, args):
    suites = _suites(ws, args)
    with ws.lock():
        path = pipeline.write_report(ws.root, suites, ws.hash)
    print(path)


def cmd_run(ws, args):
    pipeline.run_pipeline(ws.config, force=args.force)
    print(ws.root)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adnnperf", description="Performance testing of adaptive neural networks.")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--output-dir", help="override the config's output directory")
        p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = reproducible)")
        p.set_defaults(func=func)
        return p

    for name in ("train-adnn", "train-generator"):
        add(name, _stage(name), f"run the {name} stage").add_argument("--force", action="store_true")
    p = add("generate", cmd_generate, "one-shot generation over held-out seeds")
    p.add_argument("--seeds", type=int, help="number of seeds (default: config seed_count)")
    p = add("baseline", cmd_baseline, "per-sample iterative baseline")
    p.add_argument("--seeds", type=int)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--balance-weight", type=float, default=1e-6)
    p.add_argument("--time-budget", type=float, help="wall-clock seconds for the whole suite")
    p = add("evaluate", cmd_evaluate, "comparison table over suites")
    p.add_argument("--suite", action="append", help="suite directory (repeatable)")
    p = add("sweep-thresholds", cmd_sweep, "re-evaluate the suite under other thresholds")
    p.add_argument("--taus", type=float, nargs="+", default=list(DEFAULT_TAUS))
    p = add("mitigate-retrain", cmd_retrain, "cost-aware retraining")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=5)
    p = add("mitigate-detect", cmd_detect, "train and evaluate the linear input filter")
    p.add_argument("--train-size", type=int, default=1000)
    p = add("report", cmd_report, "write CSV report, schema and plot data")
    p.add_argument("--suite", action="append")
    add("run", cmd_run, "full pipeline with resume").add_argument("--force", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads)
    try:
        config = ExperimentConfig.load(args.config)
        if args.output_dir:
            config.output_dir = args.output_dir
        ws = Workspace(config)
        ws.write_config()
        args.func(ws, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_STAGE
    except (FileNotFoundError, pipeline.ArtifactMismatch, pipeline.LockedError, ValueError, RuntimeError) as exc:
        print(f"error in {args.command}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
