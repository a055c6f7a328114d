"""Render PNG figures from a run directory's CSV output."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read(path: Path) -> dict[str, list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: [r[k] for r in rows] for k in rows[0]}


def _floats(col) -> np.ndarray:
    return np.array([float(x) if x not in ("", "nan") else np.nan for x in col])


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_oosp(run_dir: Path, out: Path) -> list[Path]:
    reports = sorted(run_dir.glob("oosp_*.csv"))
    if not reports:
        return []
    data = {p.stem[len("oosp_"):]: _read(p) for p in reports}
    made = []
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, cols in data.items():
        ax.hist(_floats(cols["loss"]), bins=30, histtype="step", label=name)
    ax.set_xlabel("out-of-sample loss")
    ax.set_ylabel("scenarios")
    ax.legend()
    made.append(_save(fig, out / "oosp_hist.png"))

    fig, ax = plt.subplots(figsize=(7, 4))
    for name, cols in data.items():
        d = _floats(cols["distance_to_ref"])
        if np.all(np.isnan(d)):
            continue
        ax.scatter(d, _floats(cols["loss"]), s=6, label=name)
    ax.set_xlabel("Euclidean parameter distance to reference")
    ax.set_ylabel("out-of-sample loss")
    ax.legend()
    made.append(_save(fig, out / "oosp_vs_distance.png"))
    return made


def plot_summary(run_dir: Path, out: Path) -> list[Path]:
    p = run_dir / "summary.csv"
    if not p.is_file():
        return []
    cols = _read(p)
    aversion = _floats(cols["aversion"])
    std = _floats(cols["std"])
    robust = ~np.isnan(aversion)
    if not robust.any():
        return []
    fig, ax = plt.subplots(figsize=(6, 4))
    order = np.argsort(aversion[robust])
    ax.plot(aversion[robust][order], std[robust][order], "o-", label="robust")
    for name, s in zip(cols["strategy"], std):
        if name != "robust":
            ax.axhline(s, ls="--", lw=1, label=name, color="C1" if name == "deep" else "C2")
    ax.set_xscale("log")
    ax.set_xlabel("uncertainty aversion")
    ax.set_ylabel("std of out-of-sample loss")
    ax.legend()
    return [_save(fig, out / "std_vs_aversion.png")]


def plot_histories(run_dir: Path, out: Path) -> list[Path]:
    made = []
    for p in sorted(run_dir.glob("history_*.csv")):
        cols = _read(p)
        if not cols:
            continue
        ep = _floats(cols["epoch"])
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(ep, _floats(cols["hedger_objective"]), label="hedger objective")
        g = _floats(cols["gen_objective"])
        if not np.all(np.isnan(g)):
            ax.plot(ep, g, label="generator objective")
            ax.plot(ep, _floats(cols["penalty"]), label="penalty")
        ax.set_xlabel("epoch")
        ax.legend()
        made.append(_save(fig, out / f"{p.stem}.png"))
    return made


def plot_hms(run_dir: Path, out: Path) -> list[Path]:
    p = run_dir / "hms_comparison.csv"
    if not p.is_file():
        return []
    cols = _read(p)
    s = _floats(cols["s"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(s, _floats(cols["strategy_difference"]), label="robust minus deep")
    ax.plot(s, _floats(cols["scaled_delta_u"]), label="PDE correction")
    ax.set_xlabel("asset level at half maturity")
    ax.legend()
    return [_save(fig, out / "hms_comparison.png")]


def plot_nsde(run_dir: Path, out: Path) -> list[Path]:
    p = run_dir / "nsde_compare.csv"
    if not p.is_file():
        return []
    cols = _read(p)
    gens = np.array(cols["generator"])
    s, d = _floats(cols["terminal_asset"]), _floats(cols["pnl_difference"])
    names = list(dict.fromkeys(gens))
    fig, axes = plt.subplots(1, len(names), figsize=(5 * len(names), 4), sharey=True, squeeze=False)
    for ax, g in zip(axes[0], names):
        m = gens == g
        ax.scatter(s[m], d[m], s=3, alpha=0.4)
        ax.set_title(g)
        ax.set_xlabel("terminal asset")
    axes[0][0].set_ylabel("robust minus deep P&L")
    return [_save(fig, out / "nsde_compare.png")]


def plot_scenarios(run_dir: Path, out: Path) -> list[Path]:
    p = run_dir / "scenarios.csv"
    if not p.is_file():
        return []
    cols = _read(p)
    keys = [k for k in ("sigma", "kappa", "beta", "rho") if k in cols]
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.5), squeeze=False)
    for ax, k in zip(axes[0], keys):
        ax.hist(_floats(cols[k]), bins=30)
        ax.set_xlabel(k)
    return [_save(fig, out / "scenario_params.png")]


PLOTTERS = (plot_oosp, plot_summary, plot_histories, plot_hms, plot_nsde, plot_scenarios)


def emit_plots(run_dir: str | Path, out: str | Path | None = None) -> list[Path]:
    """Write every figure the run directory has data for; returns the written files."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    out = run_dir / "plots" if out is None else Path(out)
    out.mkdir(parents=True, exist_ok=True)
    made: list[Path] = []
    for fn in PLOTTERS:
        made += fn(run_dir, out)
    return made
