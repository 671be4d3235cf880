"""Command-line entry points for the experiment runner.

Subcommands map to pipeline stages; `full` runs everything and writes the
manifest.  Config files are YAML documents matching ExperimentConfig (see
README for the schema); --seed and --out override the file values, --fast
switches to the reduced-cost variant.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import runner

_STAGE_HELP = {
    "gen": "generate fields, climatology, stations and models",
    "fidelity": "attribution vs ablation fidelity tables",
    "methods": "method comparison, quadrature and baseline sensitivity",
    "calibrate": "decile calibration, Gini ratios, overpayment",
    "select": "sensor selection strategies across budgets",
    "pay": "payments, stability intervals, shrinkage fits",
    "game": "adversarial scenario campaign",
    "detect": "detector evaluation over gaming outcomes",
    "converge": "cycle-vs-aggregate recovery and convergence",
    "full": "run every stage and write the manifest",
    "report": "markdown summary over existing results",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradsense",
                                description="desk-scale attribution valuation engine")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in _STAGE_HELP.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="YAML config path (defaults to built-in desk config)")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--fast", action="store_true",
                        help="coarse quadrature and reduced resamples/seeds")
        if name == "full":
            sp.add_argument("--stage-filter", nargs="+", metavar="STAGE",
                            choices=runner.STAGES, help="run only these stages")
    return p


def _resolve_config(args) -> runner.ExperimentConfig:
    cfg = runner.load_config(args.config) if args.config else runner.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if args.fast:
        cfg = runner.fast_variant(cfg)
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _resolve_config(args)
    if args.command == "full":
        manifest = runner.run_full(cfg, stage_filter=tuple(args.stage_filter)
                                   if getattr(args, "stage_filter", None) else None)
        for name in runner.STAGES:
            print(f"{name}: {manifest['stages'][name]}")
        return 0 if manifest["ok"] else 1
    state = runner.RunState(cfg)
    runner.save_config(cfg, state.ws.path("config.yaml"))
    state.ws.register("config.yaml")
    try:
        runner.run_stage(state, args.command)
    except Exception as exc:
        print(f"{args.command}: failed: {exc}", file=sys.stderr)
        return 1
    runner.write_manifest(state)
    print(f"{args.command}: completed ({len(state.ws.files)} files tracked)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
