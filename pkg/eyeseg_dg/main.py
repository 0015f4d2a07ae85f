"""
Eye Segmentation Domain Generalization - Main Module

Entry point with four subcommands:

    synth   render domain specs to domain directories
    run     execute the generalization suite of an experiment file
    report  aggregate a results directory and print verdicts
    stats   pose and luminance statistics per registered domain
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

from eyeseg_dg.analysis.report import emit_report, load_results
from eyeseg_dg.protocol.registry import build_registry
from eyeseg_dg.protocol.suite import describe_matrix, execute_suite, run_matrix
from eyeseg_dg.protocol.trainer import load_trained_model, predict_masks, read_training
from eyeseg_dg.synth.domains import load_domain_specs, make_domain
from eyeseg_dg.synth.manifest import write_domain
from eyeseg_dg.synth.stats import domain_stats
from eyeseg_dg.utils.config import dump_config, load_config, validate_config
from eyeseg_dg.utils.errors import ConfigError, EyeSegError
from eyeseg_dg.utils.io import atomic_write_text

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(name)s: %(message)s')
logger = logging.getLogger(__name__)


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse command line arguments"""
    parser = argparse.ArgumentParser(prog="eyeseg-dg",
                                     description="Domain generalization benchmark for elliptical eye segmentation")
    parser.add_argument("--verbose", action="store_true", help="Enable verbose logging")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Render domain specs to domain directories")
    synth.add_argument("--spec", default="stock", help="Domain spec YAML file, or 'stock' (default)")
    synth.add_argument("--out", required=True, help="Output directory, one subdirectory per domain")
    synth.add_argument("--seed", type=int, help="Override the master seed")
    synth.add_argument("--config", help="Experiment file supplying resolution and images per subject")

    run = sub.add_parser("run", help="Run the generalization suite of an experiment file")
    run.add_argument("--config", required=True, help="Experiment YAML file")
    run.add_argument("--out", help="Override output.runs_dir")
    run.add_argument("--seed", type=int, help="Override the master seed")
    run.add_argument("--jobs", type=int, default=1, help="Parallel training processes (default: 1)")
    run.add_argument("--dry-run", action="store_true", help="Print the run matrix without training")
    run.add_argument("--resume", action="store_true", help="Continue interrupted trainings from checkpoints")

    report = sub.add_parser("report", help="Aggregate a results directory and print verdicts")
    report.add_argument("results", help="Results directory (<runs_dir>/<experiment>)")
    report.add_argument("--out", help="Report directory (default: <results>/report)")
    report.add_argument("--config", help="Experiment file supplying report formats and tolerance")

    stats = sub.add_parser("stats", help="Per-domain pose and luminance statistics")
    stats.add_argument("--config", help="Experiment YAML file (default: stock domains)")
    stats.add_argument("--seed", type=int, help="Override the master seed")
    stats.add_argument("--out", help="Write the statistics as JSON to this file")
    stats.add_argument("--predictions", metavar="RUN_DIR",
                       help="Training run whose best checkpoint predicts masks for mask-less samples")

    return parser.parse_args(argv)


def _config(path: Optional[str], seed: Optional[int] = None) -> Dict[str, Any]:
    config = load_config(path)
    if seed is not None:
        config["seed"] = seed
    validate_config(config)
    return config


def summarize_verdicts(summary: Dict[str, Any], report_dir: str) -> None:
    """
    Print the verdicts of a report

    Args:
        summary: Content of summary.json
        report_dir: Where the report files were written
    """
    print("\n===== Domain Generalization Verdicts =====\n")
    for domain, block in summary["domains"].items():
        verdicts = block["verdicts"]
        base = verdicts["baseline"]
        print(f"{domain}: baseline {base['run_id']} (median {base['median']:.3f} px, MAD {base['mad']:.3f})")
        for key in ("H1", "H2"):
            v = verdicts[key]
            if v is None:
                print(f"  {key}: not evaluated")
            else:
                print(f"  {key}: {v['verdict']} (gap {v['gap']:+.2f} MADs)")
        h3 = verdicts["H3"]
        if h3 is not None and h3["verdict"] is not None:
            print(f"  H3: {h3['verdict']}")
    print(f"\nFull report saved to {report_dir}")


def cmd_synth(args: argparse.Namespace) -> int:
    config = _config(args.config, args.seed)
    section = config["registry"]
    specs = load_domain_specs(args.spec)
    logger.info(f"Step 1: Rendering {len(specs)} domain(s) from {args.spec}")
    for spec in specs:
        dataset = make_domain(spec, int(section["images_per_subject"]), int(config["seed"]),
                              int(section["height"]), int(section["width"]))
        write_domain(dataset, args.out)
    logger.info(f"Wrote {len(specs)} domain directories to {args.out}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = _config(args.config, args.seed)
    if args.out:
        config["output"]["runs_dir"] = args.out
    out_dir = os.path.join(config["output"]["runs_dir"], config["experiment"])

    logger.info(f"Step 1: Building registry (seed {config['seed']})")
    registry = build_registry(config)
    runs = run_matrix(registry, config)

    if args.dry_run:
        print(f"Run matrix for {config['experiment']} ({len(runs)} runs):")
        for line in describe_matrix(runs):
            print(f"  {line}")
        return 0

    logger.info(f"Step 2: Executing {len(runs)} run(s) into {out_dir}")
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "config-echo.yaml"), dump_config(config))
    execute_suite(registry, config, out_dir, jobs=args.jobs, resume=args.resume)

    logger.info("Step 3: Writing report")
    report_dir = os.path.join(out_dir, "report")
    summary = emit_report(load_results(out_dir), report_dir, config["report"]["formats"],
                          float(config["report"]["verdict_tolerance"]))
    summarize_verdicts(summary, report_dir)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    config = _config(args.config)
    report_dir = args.out or os.path.join(args.results, "report")
    results = load_results(args.results)
    summary = emit_report(results, report_dir, config["report"]["formats"],
                          float(config["report"]["verdict_tolerance"]))
    summarize_verdicts(summary, report_dir)
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    config = _config(args.config, args.seed)
    registry = build_registry(config)
    model = None
    if args.predictions:
        training = read_training(args.predictions)
        trained_at = (training.model_cfg.height, training.model_cfg.width)
        if trained_at != (registry.height, registry.width):
            raise ConfigError(f"{args.predictions} was trained at {trained_at[1]}x{trained_at[0]}, "
                              f"the registry renders {registry.width}x{registry.height}")
        model = load_trained_model(training)
        logger.info(f"Predicting missing masks with {training.best.path} of {training.run_dir}")
    rows: List[Dict[str, Any]] = []
    print("\n===== Domain Statistics =====\n")
    for entry in registry:
        # test splits are left out of the audit
        predictions = None
        if model is not None:
            predictions = predict_masks(model, list(entry.train), int(config["train"]["eval_batch_size"]))
        stats = domain_stats(entry.train, predictions)
        rows.append(stats.to_dict())
        scatter = stats.center_scatter
        iris = stats.iris_fraction_mean
        z = stats.pupil_z_median
        print(f"{entry.name:<12} {entry.condition:<12} n={stats.n_samples:<5} "
              f"scatter={'-' if scatter is None else f'({scatter[0]:.2f}, {scatter[1]:.2f})'} "
              f"iris={'-' if iris is None else f'{iris:.3f}'} "
              f"pupil_z={'-' if z is None else f'{z:+.2f}'}")
    if args.out:
        atomic_write_text(args.out, json.dumps(rows, sort_keys=True, indent=2) + "\n")
        logger.info(f"Saved statistics to {args.out}")
    return 0


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "report": cmd_report, "stats": cmd_stats}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    args = parse_args(argv)

    # Set verbose logging if requested
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return COMMANDS[args.command](args)
    except EyeSegError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return 1
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
