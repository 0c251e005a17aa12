"""Command-line interface for the co-design lifecycle.

Every command takes --config (a case name or a YAML file merged over that
case's defaults), --seed, --out, --workers, and --dry-run. Results live in
one run directory holding the effective config, the artifact registry, and
the rendered report.

Exit codes: 0 success, 1 configuration error, 2 numeric or solver failure,
3 incomplete input (prerequisite records missing; report emits a partial
result with MISSING markers in that case).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import lifecycle as lcm
from . import report as rpt

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_INCOMPLETE = 3


class IncompleteInput(Exception):
    """A prerequisite record for the requested command is missing."""


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ccdtwin",
        description="digital-twin control co-design lifecycle runner")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True,
                       help="case name (illustrative, suspension) or YAML file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None,
                       help="run directory (default $CCDTWIN_OUT/<case>-seed<N>)")
        p.add_argument("--workers", type=int, default=1,
                       help="worker processes for sample generation")
        p.add_argument("--dry-run", action="store_true",
                       help="validate the configuration and write nothing")
        return p

    add("pretrain", "sample optimal actions and fit the starting networks")
    add("train", "co-design the next pending generation")
    add("deploy", "run the newest generation on the truth plant")
    add("fit-uq", "fit the quantile discrepancy model from deployment residuals")
    p = add("lifecycle", "run the full multi-generation loop")
    p.add_argument("--generations", type=int, default=2,
                   help="number of design generations (1 = nominal model only)")
    add("evaluate", "paired truth-plant comparison of finished generations")
    add("report", "render tables and charts from the run registry")
    return ap


def _run_dir(args, cfg: dict) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get("CCDTWIN_OUT", "runs"))
    return root / f"{cfg['case']}-seed{cfg['seed']}"


def _gen_numbers(reg: lcm.Registry, prefix: str) -> list[int]:
    return sorted(int(n.split("-")[1]) for n in reg.records()
                  if n.startswith(prefix + "-"))


def _print_returns(stats: dict) -> None:
    for g in sorted(stats["returns"], key=int):
        r = stats["returns"][g]
        print(f"generation {g}: mean return {r['mean']:.6g} "
              f"(std {r['std']:.6g}, n {r['n']})")
    for key, comp in stats.get("comparison", {}).items():
        print(f"{key}: mean delta {comp['mean_delta']:.6g}, "
              f"std ratio {comp['std_ratio']:.6g}")


def _load_gen_agent(reg: lcm.Registry, g: int):
    return lcm.load_agent(reg.path(f"gen-{g:03d}") / "agent.json")


def _cmd_pretrain(args, cfg, reg):
    lcm.run_pretrain(cfg, reg, workers=args.workers)
    stats = reg.manifest("gen-000")["stats"]
    print(f"gen-000 ready: {stats['samples']} samples, nominal mean return "
          f"{stats['nominal']['mean']:.6g}")
    return EXIT_OK


def _cmd_train(args, cfg, reg):
    gens = _gen_numbers(reg, "gen")
    if 0 not in gens:
        raise IncompleteInput("no gen-000 record; run pretrain first")
    latest = max(gens)
    if latest == 0:
        agent = _load_gen_agent(reg, 0)
        hist = lcm.run_codesign(cfg, reg, agent, 1,
                                cfgmod.nominal_env_builder(cfg),
                                seed=lcm._seed(cfg, lcm._SEED_TRAIN1),
                                refs={"parent": "gen-000"})
        target = 1
    else:
        mod_name = f"model-{latest:03d}"
        if mod_name not in reg.records():
            print(f"gen-{latest:03d} is up to date; run deploy and fit-uq to "
                  "enable the next generation")
            return EXIT_OK
        fitres = lcm.run_fit(cfg, reg, latest)
        agent = lcm.load_agent(reg.path(f"deploy-{latest:03d}") / "agent.json")
        target = latest + 1
        hist = lcm.run_codesign(
            cfg, reg, agent, target,
            lcm.corrected_env_builder(cfg, fitres.model),
            epochs=cfg["lifecycle"]["step3_epochs"],
            seed=lcm._seed(cfg, lcm._SEED_TRAIN2) + (target - 2),
            refs={"parent": f"gen-{latest:03d}", "model": mod_name})
    note = " (aborted; last good state restored)" if hist.aborted else ""
    stats = reg.manifest(f"gen-{target:03d}")["stats"]
    print(f"gen-{target:03d} trained: design {stats['design']}, train-env "
          f"mean return {stats['train_env']['mean']:.6g}{note}")
    return EXIT_OK


def _cmd_deploy(args, cfg, reg):
    gens = [g for g in _gen_numbers(reg, "gen") if g >= 1]
    if not gens:
        raise IncompleteInput("no trained generation; run train first")
    g = max(gens)
    dep_name = f"deploy-{g:03d}"
    if dep_name in reg.records():
        print(f"{dep_name} already recorded")
        return EXIT_OK
    agent = _load_gen_agent(reg, g)
    _, ds, flagged = lcm.run_deploy(cfg, reg, agent, g)
    stats = reg.manifest(dep_name)["stats"]
    flag_note = " FLAGGED: blow-up fraction above threshold" if flagged else ""
    print(f"{dep_name} recorded: {stats['episodes']} episodes, "
          f"{stats['records']} residual records{flag_note}")
    return EXIT_OK


def _cmd_fit_uq(args, cfg, reg):
    deps = _gen_numbers(reg, "deploy")
    if not deps:
        raise IncompleteInput("no deployment record; run deploy first")
    g = max(deps)
    lcm.run_fit(cfg, reg, g)
    stats = reg.manifest(f"model-{g:03d}")["stats"]
    print(f"model-{g:03d} fitted: validation median RMSE "
          f"{stats['val_rmse_median']:.6g}, coverage {stats['val_coverage']}")
    return EXIT_OK


def _cmd_lifecycle(args, cfg, reg):
    if args.generations < 1:
        raise cfgmod.ConfigError("--generations must be at least 1")
    res = lcm.run_lifecycle(cfg, reg.root, generations=args.generations,
                            workers=args.workers)
    if res.flagged:
        print("WARNING: a deployment exceeded the blow-up threshold")
    _print_returns(res.evaluation)
    print(f"registry digest {res.registry.digest()}")
    return EXIT_OK


def _cmd_evaluate(args, cfg, reg):
    gens = [g for g in _gen_numbers(reg, "gen") if g >= 1]
    if not gens:
        raise IncompleteInput("no trained generation to evaluate")
    if "evaluation" in reg.records():
        stats = reg.manifest("evaluation")["stats"]
    else:
        agents = {g: _load_gen_agent(reg, g) for g in gens}
        stats, trajectories = lcm.evaluate_generations(cfg, agents)
        lcm._persist_evaluation(cfg, reg, stats, trajectories)
    _print_returns(stats)
    return EXIT_OK


def _cmd_report(args, cfg, reg, run_dir: Path):
    artifacts = rpt.generate_report(reg.root, run_dir / "report")
    missing = sorted(k for k, v in artifacts.items() if v == rpt.MISSING)
    for key in sorted(artifacts):
        print(f"{key}: {artifacts[key]}")
    if missing:
        print(f"partial report: {len(missing)} artifact(s) missing",
              file=sys.stderr)
        return EXIT_INCOMPLETE
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load_config(args.config, seed=args.seed)
    except cfgmod.ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    run_dir = _run_dir(args, cfg)
    if args.dry_run:
        print(f"config OK: case {cfg['case']}, seed {cfg['seed']}")
        print(f"run directory: {run_dir} (nothing written)")
        return EXIT_OK

    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        cfgmod.save_config(cfg, run_dir / "config.yaml")
        reg = lcm.Registry(run_dir / "registry")
        reg.root.mkdir(parents=True, exist_ok=True)
        if args.command == "pretrain":
            return _cmd_pretrain(args, cfg, reg)
        if args.command == "train":
            return _cmd_train(args, cfg, reg)
        if args.command == "deploy":
            return _cmd_deploy(args, cfg, reg)
        if args.command == "fit-uq":
            return _cmd_fit_uq(args, cfg, reg)
        if args.command == "lifecycle":
            return _cmd_lifecycle(args, cfg, reg)
        if args.command == "evaluate":
            return _cmd_evaluate(args, cfg, reg)
        if args.command == "report":
            return _cmd_report(args, cfg, reg, run_dir)
        raise AssertionError(f"unhandled command {args.command}")
    except cfgmod.ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except IncompleteInput as e:
        print(f"incomplete input: {e}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except (RuntimeError, ValueError, FloatingPointError,
            np.linalg.LinAlgError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
