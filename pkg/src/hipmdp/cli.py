"""Command line: ``hipmdp run``, ``hipmdp report`` and ``hipmdp probe``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .exceptions import NumericalFailure
from .harness import AGENTS, MODEL_MODES, ConfigError, ExperimentConfig, ExperimentLog, emit_results, run_experiment
from .latent import LatentTransitionModel, LatentWeights, uncertainty_probe

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hipmdp", description="Hidden-parameter MDP transfer experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one agent over a sequence of task instances")
    run.add_argument("--domain", choices=("toy", "hiv"))
    run.add_argument("--agent", choices=AGENTS)
    run.add_argument("--model", dest="model_mode", choices=MODEL_MODES)
    run.add_argument("--seed", type=int)
    run.add_argument("--config", type=Path, help="YAML config; command-line flags override its values")
    run.add_argument("--out", type=Path, required=True, help="output directory")

    report = sub.add_parser("report", help="aggregate run logs into CSV tables")
    report.add_argument("runs", nargs="+", type=Path, help="run directories or log.jsonl files")
    report.add_argument("--out", type=Path, required=True)
    report.add_argument("--threshold-agent", default="personal")
    report.add_argument("--final-window", type=int, default=5)

    probe = sub.add_parser("probe", help="per-class predictive variance at one state-action point")
    probe.add_argument("--run", type=Path, required=True, help="run directory with model.json and instances.json")
    probe.add_argument("--state", type=float, nargs="+", required=True)
    probe.add_argument("--action", type=int, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _run(args)
        if args.command == "report":
            return _report(args)
        return _probe(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def _run(args) -> int:
    overrides = {"domain": args.domain, "agent": args.agent, "model_mode": args.model_mode, "seed": args.seed}
    if args.config is not None:
        cfg = ExperimentConfig.from_yaml(args.config, **overrides)
    else:
        cfg = ExperimentConfig.from_mapping({}, **overrides)
    log = run_experiment(cfg, args.out)
    last = log.records[-1]
    print(f"{cfg.run_id}: {len(log)} episodes, last cumulative reward {last['cumulative_reward']:.4g}")
    return EXIT_OK


def _report(args) -> int:
    logs = []
    for p in args.runs:
        path = p / "log.jsonl" if p.is_dir() else p
        if not path.exists():
            raise ConfigError(f"no log found at {path}")
        log = ExperimentLog.read(path)
        if not log.records:
            raise ConfigError(f"log {path} is empty")
        logs.append(log)
    try:
        tables = emit_results(logs, args.out, args.threshold_agent, args.final_window)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for row in tables["summary"]:
        print(f"{row['agent']:>10}  final {row['final_mean']:.4g}  episodes to threshold "
              f"{row['episodes_to_threshold'] if row['episodes_to_threshold'] is not None else '-'}")
    return EXIT_OK


def class_weights(instances: list, model: LatentTransitionModel) -> dict:
    """Latent weights per class: toy instances pool by colour, HIV instances stand alone."""
    groups = {}
    for inst in instances:
        b = inst["instance_id"]
        if b not in model.latent_table_:
            continue
        label = inst["params"].get("latent_class", f"instance {b}")
        groups.setdefault(label, []).append(model.latent_table_[b].mean)
    return {k: LatentWeights(np.mean(v, axis=0), np.eye(model.latent_dim)) for k, v in sorted(groups.items())}


def _probe(args) -> int:
    model_path, inst_path = args.run / "model.json", args.run / "instances.json"
    if not model_path.exists() or not inst_path.exists():
        raise ConfigError(f"{args.run} lacks model.json or instances.json")
    model = LatentTransitionModel.load(model_path)
    instances = json.loads(inst_path.read_text())
    classes = class_weights(instances, model)
    if not classes:
        raise ConfigError("the checkpoint holds no latent weights (only HiP-MDP runs store them)")
    if len(args.state) != model.state_dim_:
        raise ConfigError(f"--state needs {model.state_dim_} values")
    try:
        variances = uncertainty_probe(model, np.array(args.state), args.action, list(classes.values()))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for name, v in zip(classes, variances):
        print(f"{name}\t{v:.6g}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
