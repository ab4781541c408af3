"""
Command-line interface for ba2kit.
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .core.complexity import count_flops
from .core.config import DEFAULT_IMAGE_SIZE, load_config
from .core.engine import MAX_THREADS, BudgetBench
from .core.errors import (
    ArchitectureMismatchError,
    ComplianceError,
    ConfigError,
    DataError,
    MissingBankError,
    NotFoundError,
    StoreError,
)
from .core.models import ConstraintMode, DomainResult
from .core.scoring import decathlon_score, efficiency_scores
from .core.trainer import check_compliance, evaluate, train_multi_budget_joint
from .core.utils import budget_id
from .io.store import ModelRegistry, pack_switches, unpack_switches

# Exit codes
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_COMPLIANCE = 5

DEFAULT_SWEEP_STEP = 0.1


def setup_logging(quiet: int, debug: bool) -> None:
    """Set up logging based on arguments."""
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

    logger = logging.getLogger("ba2kit")

    if debug:
        logger.setLevel(logging.DEBUG)
    elif quiet == 0:
        logger.setLevel(logging.INFO)
    else:
        logger.setLevel(logging.WARNING)


def budget_type(value):
    """Validate a single budget."""
    fvalue = float(value)
    if not (0.0 < fvalue <= 1.0):
        raise argparse.ArgumentTypeError(f"Budget must be in (0, 1], got {fvalue}")
    return fvalue


def threads_type(value):
    """Validate threads parameter."""
    ivalue = int(value)
    if ivalue < 1 or ivalue > MAX_THREADS:
        raise argparse.ArgumentTypeError(f"Threads must be between 1-{MAX_THREADS}, got {ivalue}")
    return ivalue


def positive_int_type(value):
    ivalue = int(value)
    if ivalue < 1:
        raise argparse.ArgumentTypeError(f"Value must be > 0, got {ivalue}")
    return ivalue


def mode_type(value):
    try:
        return ConstraintMode.parse(value).value
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def parse_budgets(text: str, step: float = DEFAULT_SWEEP_STEP) -> Tuple[float, ...]:
    """
    Parse "0.1..1.0" (stepped range, both ends included) or "1.0,0.5,0.25".
    """
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = (float(part) for part in text.split("..", 1))
            if step <= 0 or hi < lo:
                raise ConfigError(f"Invalid budget range '{text}' with step {step}")
            count = int(np.floor((hi - lo) / step + 1e-9)) + 1
            values = [round(lo + i * step, 6) for i in range(count)]
        else:
            values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"Cannot parse budgets '{text}'") from None
    for beta in values:
        if not (0.0 < beta <= 1.0):
            raise ConfigError(f"Budgets must be in (0, 1], got {beta}")
    if not values:
        raise ConfigError("No budgets given")
    return tuple(values)


def create_parser() -> argparse.ArgumentParser:
    """Create argument parser for ba2kit."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=str, default=None, help="JSON configuration file")
    common.add_argument("--registry", type=str, default=None, help="Model registry directory")
    common.add_argument("-O", "--output", type=str, default=None, help="Output directory")
    common.add_argument("--seed", type=int, default=None, help="Random seed")
    common.add_argument("--epochs", type=positive_int_type, default=None, help="Training epochs")
    common.add_argument("--batch-size", type=positive_int_type, default=None, help="Batch size")
    common.add_argument("-T", "--threads", type=threads_type, default=None, help="Worker threads")
    common.add_argument(
        "-Q", "--quiet", type=int, choices=[0, 1], default=1, help="Quiet flag (0=verbose, 1=quiet)"
    )
    common.add_argument("--debug", action="store_true", help="Enable debug logging")

    parser = argparse.ArgumentParser(
        description="ba2kit - budget-aware adapters for multi-domain learning",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("-v", "--version", action="version", version=f"ba2kit version {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sub.add_parser("train-backbone", parents=[common], help="Pretrain the shared backbone")

    p = sub.add_parser("train-domain", parents=[common], help="Train one adapter")
    p.add_argument("--domain", required=True, help="Domain name from the configuration")
    p.add_argument("--budget", type=budget_type, required=True, help="Budget beta in (0, 1]")
    p.add_argument("--mode", type=mode_type, default=None, help="global or per-layer")

    p = sub.add_parser("train-joint", parents=[common], help="Joint multi-budget training")
    p.add_argument("--domain", required=True)
    p.add_argument("--budgets", required=True, help="Comma list or range such as 0.5..1.0")
    p.add_argument("--step", type=float, default=DEFAULT_SWEEP_STEP)
    p.add_argument("--mode", type=mode_type, default=None)
    p.add_argument("--joint-registry", default=None, help="Directory for the joint models")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a stored adapter")
    p.add_argument("--domain", required=True)
    p.add_argument("--budget", type=budget_type, required=True)

    p = sub.add_parser("score", parents=[common], help="Score a results file")
    p.add_argument("--results", required=True, help="Results JSON")
    p.add_argument("--json", action="store_true", help="Print JSON")

    p = sub.add_parser("inspect", parents=[common], help="Complexity report of an adapter")
    p.add_argument("--domain", default=None, help="Omit to inspect the backbone network")
    p.add_argument("--budget", type=budget_type, default=None)
    p.add_argument("--input-size", type=positive_int_type, nargs=2, default=None, metavar=("H", "W"))
    p.add_argument("--json", action="store_true", help="Print JSON")

    p = sub.add_parser("pack", parents=[common], help="Pack or unpack a switch vector")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--bits", help="Switch string such as 10110000")
    group.add_argument("--hex", help="Packed bytes as hex, with --length")
    p.add_argument("--length", type=int, default=None)

    sub.add_parser("verify", parents=[common], help="Re-hash every registry file")

    p = sub.add_parser("sweep", parents=[common], help="Accuracy-drop curve over budgets")
    p.add_argument("--budgets", required=True, help="Comma list or range such as 0.1..1.0")
    p.add_argument("--step", type=float, default=DEFAULT_SWEEP_STEP)
    p.add_argument("--mode", type=mode_type, default=None)
    p.add_argument("--csv", default=None, help="Output CSV (default: <output>/sweep.csv)")
    p.add_argument(
        "--runs", type=positive_int_type, default=None, help="Seeded runs per point; the median is kept"
    )

    p = sub.add_parser("run-benchmark", parents=[common], help="Full benchmark run")
    p.add_argument("--budgets", default=None)
    p.add_argument("--step", type=float, default=DEFAULT_SWEEP_STEP)
    p.add_argument("--mode", type=mode_type, default=None)

    return parser


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Flags that override configuration keys; unset flags are skipped."""
    overrides = {
        "registry": args.registry,
        "output": args.output,
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "threads": args.threads,
        "mode": getattr(args, "mode", None),
        "runs": getattr(args, "runs", None),
    }
    if getattr(args, "budgets", None) and args.command in ("sweep", "run-benchmark"):
        overrides["budgets"] = list(parse_budgets(args.budgets, args.step))
    return {k: v for k, v in overrides.items() if v is not None}


def _print_json(data: Any) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def cmd_train_backbone(args, config) -> int:
    bench = BudgetBench(config)
    bench.train_backbone()
    print(f"Backbone written to {config.registry}")
    return EXIT_OK


def cmd_train_domain(args, config) -> int:
    bench = BudgetBench(config)
    adapter, trace, trace_path = bench.train_adapter(args.domain, args.budget, args.mode)
    mode = ConstraintMode.parse(args.mode or config.mode)
    _print_json(
        {
            "domain": adapter.domain,
            "budget": budget_id(adapter.budget),
            "mode": mode.value,
            "compliant": check_compliance(adapter, args.budget, mode),
            "theta_bars": adapter.theta_bars(),
            "final_lambdas": list(trace.final_lambdas),
            "trace": trace_path,
        }
    )
    return EXIT_OK


def cmd_train_joint(args, config) -> int:
    bench = BudgetBench(config)
    budgets = parse_budgets(args.budgets, args.step)
    mode = ConstraintMode.parse(args.mode or config.mode)
    backbone = bench.registry.backbone
    specs = [config.budget_spec(beta, len(backbone.arch.layer_names)) for beta in budgets]
    if mode is not config.mode:
        specs = [type(s).create(s.beta, mode, len(backbone.arch.layer_names), s.lambda_lr) for s in specs]
    result = train_multi_budget_joint(backbone, bench.data(args.domain), specs, config.train)

    root = args.joint_registry or f"{config.registry}-joint-{args.domain}"
    registry = ModelRegistry.create(root, result.model.backbone)
    summary = {}
    for key, adapter in result.adapters.items():
        registry.register(adapter, {"seed": config.train.seed, "config_hash": config.hash()})
        trace_path = os.path.join(config.output, "traces", f"{args.domain}__joint__{key}.csv")
        os.makedirs(os.path.dirname(trace_path), exist_ok=True)
        result.traces[key].write_csv(trace_path)
        summary[key] = {
            "compliant": adapter.metadata["compliant"],
            "theta_bar_max": max(adapter.theta_bars().values()),
            "error": evaluate(result.model, adapter, bench.data(args.domain).test),
        }
    _print_json({"registry": root, "budgets": summary})
    return EXIT_OK


def cmd_eval(args, config) -> int:
    bench = BudgetBench(config)
    result = bench.evaluate_entry(bench.registry, bench.registry.entry(args.domain, args.budget))
    _print_json(
        {
            "domain": result.domain,
            "budget": budget_id(result.budget),
            "error": result.error,
            "compliant": result.compliant,
            "flop_fraction": result.flop_fraction,
            "param_bits": result.param_bits,
        }
    )
    return EXIT_OK


def _score_section(data: Dict) -> Dict[str, float]:
    domains = data.get("domains", [])
    totals = data.get("totals", {})
    rel_flop = float(totals.get("rel_flop", 1.0))
    rel_params = float(totals.get("rel_params", 1.0))
    scorable = [d for d in domains if "error" in d and "e_max" in d and d.get("compliant", True)]
    if scorable:
        infos = [
            DomainResult(
                domain=str(d.get("id", i)),
                budget=float(d.get("budget", 1.0)),
                error=float(d["error"]),
                compliant=True,
                flop_fraction=float(d.get("flop_fraction", 1.0)),
                param_bits=int(d.get("param_bits", 0)),
            )
            for i, d in enumerate(scorable)
        ]
        score = decathlon_score([(r.error, float(d["e_max"])) for r, d in zip(infos, scorable)], infos).score
    elif "S" in totals:
        score = float(totals["S"])
    else:
        raise ConfigError("Results need per-domain 'error' and 'e_max' or a 'totals.S' value")
    s_o, s_p = efficiency_scores(score, rel_flop, rel_params)
    return {"S": score, "rel_flop": rel_flop, "rel_params": rel_params, "S_O": s_o, "S_P": s_p}


def cmd_score(args, config) -> int:
    try:
        with open(args.results, "r") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise DataError(f"Results file not found: {args.results}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"Results file {args.results} is not valid JSON: {e}") from e

    if isinstance(data, list):
        data = {"domains": data}
    sections = data["budgets"] if "budgets" in data else {"-": data}
    scores = {key: _score_section(section) for key, section in sections.items()}
    if args.json:
        _print_json(scores)
        return EXIT_OK
    print(f"{'budget':<10}{'S':>10}{'FLOP':>10}{'Params':>10}{'S_O':>10}{'S_P':>10}")
    for key, s in scores.items():
        print(
            f"{key:<10}{s['S']:>10.0f}{s['rel_flop']:>10.3f}{s['rel_params']:>10.3f}"
            f"{s['S_O']:>10.0f}{s['S_P']:>10.0f}"
        )
    return EXIT_OK


def cmd_inspect(args, config) -> int:
    registry = ModelRegistry(config.registry)
    if args.domain is None:
        adapter = registry.backbone.base_adapter()
    else:
        if args.budget is None:
            raise ConfigError("inspect --domain needs --budget")
        adapter = registry.resolve(args.domain, args.budget)
    if args.input_size:
        input_size = tuple(args.input_size)
    elif args.domain in config.domains:
        input_size = (config.domains[args.domain].image_size,) * 2
    else:
        input_size = (config.image_size or DEFAULT_IMAGE_SIZE,) * 2
    report = count_flops(registry.backbone.arch, adapter, input_size)
    if args.json:
        _print_json(report.to_dict())
    else:
        print(f"{adapter.domain} @ budget {budget_id(adapter.budget)}, input {input_size[0]}x{input_size[1]}")
        print(report.format_table())
    return EXIT_OK


def cmd_pack(args, config) -> int:
    if args.bits is not None:
        text = args.bits.replace(",", "").replace(" ", "")
        if not text or set(text) - {"0", "1"}:
            raise ConfigError(f"Switch string must contain only 0 and 1, got '{args.bits}'")
        print(pack_switches(np.array([int(c) for c in text], dtype=np.uint8)).hex())
    else:
        if args.length is None:
            raise ConfigError("--hex needs --length")
        try:
            data = bytes.fromhex(args.hex)
        except ValueError:
            raise ConfigError(f"Invalid hex string '{args.hex}'") from None
        print("".join(str(b) for b in unpack_switches(data, args.length)))
    return EXIT_OK


def cmd_verify(args, config) -> int:
    results = ModelRegistry(config.registry).verify()
    for key, ok in results.items():
        print(f"{'OK  ' if ok else 'FAIL'} {key}")
    return EXIT_OK if all(results.values()) else EXIT_COMPLIANCE


def cmd_sweep(args, config) -> int:
    bench = BudgetBench(config)
    path = bench.sweep(config.budgets, args.csv)
    print(f"Sweep written to {path}")
    return EXIT_OK


def cmd_run_benchmark(args, config) -> int:
    result = BudgetBench(config).run_benchmark()
    for key, report in result.reports.items():
        print(
            f"beta={key}: S={report.score:.0f} S_O={report.score_per_operation:.0f} "
            f"S_P={report.score_per_parameter:.0f}"
        )
    print(f"Report written to {result.report_path}")
    return EXIT_OK


COMMANDS = {
    "train-backbone": cmd_train_backbone,
    "train-domain": cmd_train_domain,
    "train-joint": cmd_train_joint,
    "eval": cmd_eval,
    "score": cmd_score,
    "inspect": cmd_inspect,
    "pack": cmd_pack,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "run-benchmark": cmd_run_benchmark,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main function to run the ba2kit program."""
    parser = create_parser()
    try:
        args = parser.parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    # Set up logging
    setup_logging(args.quiet, args.debug)

    logger = logging.getLogger("ba2kit")

    try:
        config = load_config(args.config, config_overrides(args))
        return COMMANDS[args.command](args, config)

    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except ComplianceError as e:
        logger.error(f"Compliance check failed: {e}")
        return EXIT_COMPLIANCE
    except (DataError, StoreError, NotFoundError, MissingBankError, ArchitectureMismatchError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except Exception as e:
        logger.error(f"Error: {str(e)}")
        if args.debug:
            import traceback

            traceback.print_exc()
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
