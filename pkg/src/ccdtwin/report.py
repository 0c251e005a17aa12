"""Report rendering: delimited tables and SVG charts from a run registry.

Reads only finalized registry records, so regenerating a report from the
same registry reproduces every output byte for byte. Artifacts that cannot
be built because their source record is absent are marked MISSING in the
report index instead of failing the whole report.
"""

from __future__ import annotations

import csv
import json
import shutil
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import config as cfgmod
from .lifecycle import Registry, _write_json

MISSING = "MISSING"

_SIGMA_METRICS = ("x3", "x4", "u")


def _read_history(path: Path) -> dict[str, np.ndarray]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]
    return {h: np.array([float(r[i]) for r in data])
            for i, h in enumerate(header)}


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return "%.17g" % float(x)


def _returns_table(stats: dict, path: Path) -> None:
    gens = sorted(stats["returns"], key=int)
    first = stats["returns"][gens[0]]
    n_p = len(first.get("design", []))
    header = (["generation", "mean_return", "std_return", "rollouts"]
              + [f"p{i + 1}" for i in range(n_p)])
    rows = []
    for g in gens:
        r = stats["returns"][g]
        rows.append([g, _fmt(r["mean"]), _fmt(r["std"]), r["n"]]
                    + [_fmt(v) for v in r.get("design", [])])
    _write_rows(path, header, rows)


def _sigma_table(stats: dict, path: Path) -> None:
    table = stats["sigma_ss"]
    gens = sorted(table, key=int)
    n_cond = len(table[gens[0]])
    header = ["condition", "metric"] + [f"gen_{g}" for g in gens]
    rows = []
    for i in range(n_cond):
        for m in _SIGMA_METRICS:
            rows.append([i + 1, m] + [_fmt(table[g][i][m]) for g in gens])
    _write_rows(path, header, rows)


def _save_svg(fig, path: Path) -> None:
    # fixed hash salt and no date stamp keep the SVG bytes reproducible
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _returns_chart(histories: dict[int, dict], path: Path) -> None:
    with matplotlib.rc_context({"svg.hashsalt": "ccdtwin"}):
        fig, ax = plt.subplots(figsize=(7.0, 4.0))
        for g in sorted(histories):
            h = histories[g]
            ax.plot(h["epoch"], h["avg_return"], label=f"generation {g}",
                    linewidth=1.0)
        ax.set_xlabel("epoch")
        ax.set_ylabel("average discounted return")
        ax.set_title("Training return by generation")
        ax.legend(loc="lower right")
        fig.tight_layout()
        _save_svg(fig, path)


def _design_chart(histories: dict[int, dict], names: list[str],
                  path: Path) -> None:
    with matplotlib.rc_context({"svg.hashsalt": "ccdtwin"}):
        fig, axes = plt.subplots(len(names), 1, figsize=(7.0, 2.6 * len(names)),
                                 squeeze=False)
        for j, name in enumerate(names):
            ax = axes[j][0]
            for g in sorted(histories):
                h = histories[g]
                ax.plot(h["epoch"], h[f"p:{name}"], label=f"generation {g}",
                        linewidth=1.0)
            ax.set_xlabel("epoch")
            ax.set_ylabel(name)
            ax.legend(loc="best")
        fig.suptitle("Design parameter trajectory")
        fig.tight_layout()
        _save_svg(fig, path)


def _registry_case(reg: Registry, names: list[str]) -> dict | None:
    """Config snapshot from the first record that carries one."""
    for name in names:
        snap = reg.path(name) / "config.yaml"
        if snap.exists():
            return cfgmod.load_config(snap)
    return None


def generate_report(registry_root, out_dir) -> dict:
    """Render every report artifact; returns {artifact key: filename or MISSING}.

    The index of artifacts (with MISSING markers for anything whose source
    record is absent) is also written to report.json in the output directory.
    """
    reg = Registry(registry_root)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = reg.records() if reg.index_path.exists() else []
    cfg = _registry_case(reg, names)
    artifacts: dict[str, str] = {}

    gens = sorted(int(n.split("-")[1]) for n in names if n.startswith("gen-"))
    policy_gens = [g for g in gens if g >= 1]

    # per-generation training histories, copied verbatim
    histories: dict[int, dict] = {}
    for g in gens:
        src = reg.path(f"gen-{g:03d}") / "history.csv"
        key = f"history_gen{g}"
        if src.exists():
            dst = f"history-gen{g:03d}.csv"
            shutil.copyfile(src, out / dst)
            artifacts[key] = dst
            if g >= 1:
                histories[g] = _read_history(src)
        else:
            artifacts[key] = MISSING
    if not gens:
        artifacts["history_gen0"] = MISSING

    # evaluation tables
    ev = reg.manifest("evaluation")["stats"] if "evaluation" in names else None
    if ev is not None:
        _returns_table(ev, out / "returns.csv")
        artifacts["returns_table"] = "returns.csv"
    else:
        artifacts["returns_table"] = MISSING
    case = (ev or cfg or {}).get("case")
    if case == "suspension":
        if ev is not None and "sigma_ss" in ev:
            _sigma_table(ev, out / "sigma_ss.csv")
            artifacts["sigma_table"] = "sigma_ss.csv"
        else:
            artifacts["sigma_table"] = MISSING
        n_ic = len(cfg["lifecycle"]["canonical_ics"]) if cfg else 3
        for g in policy_gens or [1]:
            for i in range(n_ic):
                src = reg.path("evaluation") / f"traj-gen{g:03d}-ic{i + 1}.csv"
                key = f"trajectory_gen{g}_ic{i + 1}"
                if src.exists():
                    dst = f"traj-gen{g:03d}-ic{i + 1}.csv"
                    shutil.copyfile(src, out / dst)
                    artifacts[key] = dst
                else:
                    artifacts[key] = MISSING

    # charts from whatever histories exist
    plotted = {g: h for g, h in histories.items() if h["epoch"].size}
    if plotted:
        _returns_chart(plotted, out / "returns.svg")
        artifacts["returns_chart"] = "returns.svg"
        design_names = (list(cfg["design"]["names"]) if cfg else
                        [k[2:] for k in next(iter(plotted.values()))
                         if k.startswith("p:")])
        _design_chart(plotted, design_names, out / "design.svg")
        artifacts["design_chart"] = "design.svg"
    else:
        artifacts["returns_chart"] = MISSING
        artifacts["design_chart"] = MISSING

    _write_json(out / "report.json", {
        "artifacts": artifacts,
        "registry_digest": reg.digest() if names else MISSING,
    })
    return artifacts
