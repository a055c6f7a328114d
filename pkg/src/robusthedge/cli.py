"""Command-line entry point: ``robusthedge <subcommand> --config FILE [--seed N] [--scale X] [--out DIR]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from . import genkit, hedgekit, nnkit, studies
from .config import ConfigError, ExperimentConfig, load_config
from .hedgekit import NetStrategy


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, type=Path, help="YAML experiment file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--scale", type=float, help="override the schedule scale factor, in (0, 1]")
    p.add_argument("--out", type=Path, help="output directory (default: the config's 'out')")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robusthedge", description="Deep and robust hedging experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the configured study end to end")
    _common(p)
    p = sub.add_parser("calibrate", help="fit the configured generator and write its parameters")
    _common(p)
    p.add_argument("--paths", type=Path, help="exported path batch to fit (default: a reference sample)")
    p = sub.add_parser("train-hedge", help="train the deep hedge on the reference generator")
    _common(p)
    p = sub.add_parser("train-robust", help="pretrain, then run the adversarial loop at one aversion")
    _common(p)
    p.add_argument("--aversion", type=float, help="uncertainty aversion (default: first grid value)")
    p = sub.add_parser("oosp", help="out-of-sample evaluation of a checkpoint, or of the whole study")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="strategy weights to evaluate")
    p.add_argument("--id", default="checkpoint", help="strategy label in the report")
    p = sub.add_parser("sweep-gamma", help="robust hedges across the aversion grid plus baselines")
    _common(p)
    p = sub.add_parser("hms-benchmark", help="robust hedge against the PDE correction term")
    _common(p)
    p = sub.add_parser("emit-plots", help="render PNG figures from a run directory")
    _common(p, config_required=False)
    p.add_argument("--run-dir", type=Path, help="directory holding a run's CSV output (default: --out or the config's out)")
    return ap


def _load(args) -> ExperimentConfig:
    return load_config(args.config, {"seed": args.seed, "scale": args.scale, "out": str(args.out) if args.out else None})


def _log(args):
    return (lambda *a: None) if args.quiet else (lambda msg: print(msg, flush=True))


def _finish(cfg, art, status="ok", extra=None) -> None:
    art.write_json("manifest.json", studies.manifest(cfg, art, status, extra))


def cmd_run(cfg, args) -> int:
    studies.run_study(cfg, log=_log(args))
    return 0


def cmd_calibrate(cfg, args) -> int:
    art = studies.Artifacts(Path(cfg.out))
    log = _log(args)
    if args.paths is not None:
        target = genkit.PathBatch.load(args.paths)
    else:
        target = studies.reference_paths(cfg)
    if cfg.study == "nsde-compare":
        res = studies.fit_nsde(cfg, target)
        p = res.params
        nnkit.save_checkpoint(art.path("nsde_drift.ckpt"), p.drift, seed=cfg.seed)
        nnkit.save_checkpoint(art.path("nsde_diffusion.ckpt"), p.diffusion, seed=cfg.seed)
        info = {"family": "nsde", "objective": res.objective, "initial": res.history[0], "steps": len(res.history), "s0": list(p.s0)}
    elif cfg.market.family == "bs":
        res = genkit.calibrate("bs", target)
        info = {"family": "bs", "sigma": float(res.params.sigma), "s0": float(res.params.s0), "flagged": res.flagged}
    else:
        res = genkit.calibrate("heston", studies.reference_params(cfg))
        info = {"family": "heston", "params": res.params.summary()}
    art.write_json("calibration.json", info)
    log(f"calibration: {info}")
    _finish(cfg, art)
    return 0


def cmd_train_hedge(cfg, args) -> int:
    art = studies.Artifacts(Path(cfg.out))
    run = studies.pretrain(cfg)
    run.save(art.out, "pretrain")
    art.files += ["pretrain.ckpt", "pretrain.json"]
    _log(args)(f"deep hedge objective {run.final_objective:.6f}")
    _finish(cfg, art, extra={"final_objective": run.final_objective})
    return 0


def cmd_train_robust(cfg, args) -> int:
    art = studies.Artifacts(Path(cfg.out))
    a = args.aversion if args.aversion is not None else cfg.penalty.aversions[0]
    if a <= 0:
        raise ConfigError("--aversion must be positive")
    pre = studies.pretrain(cfg)
    pre.save(art.out, "pretrain")
    art.files += ["pretrain.ckpt", "pretrain.json"]
    res = studies.robust_hedge(cfg, pre.strategy, a)
    tag = f"robust_a{studies._aversion_tag(a)}"
    studies._save_gan(art, tag, res, cfg.seed)
    _log(args)(f"robust hedge at aversion {a:g}: generator {res.generator.summary()}")
    _finish(cfg, art, extra={"aversion": a})
    return 0


def cmd_oosp(cfg, args) -> int:
    if args.checkpoint is None:
        if cfg.study not in ("bs-oosp", "heston-oosp"):
            raise ConfigError("study: oosp without --checkpoint needs an oosp study")
        studies.run_study(cfg, log=_log(args))
        return 0
    if not args.checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    art = studies.Artifacts(Path(cfg.out))
    params, _ = nnkit.load_checkpoint(args.checkpoint)
    h = cfg.hedger
    strat = NetStrategy(nnkit.Mlp.from_params(params), tuple(h.features), tuple(h.trade) if h.trade else None)
    scen = studies.build_scenarios(cfg)
    scen.to_csv(art.path("scenarios.csv"))
    rep = studies.evaluate(cfg, strat, scen, args.id)
    rep.write(art.path(f"oosp_{args.id}.csv"), art.path(f"oosp_{args.id}.json"))
    _log(args)(f"{args.id}: mean {rep.mean:.6f} std {rep.std:.6f} over {rep.M} scenarios")
    _finish(cfg, art)
    return 0


def cmd_sweep(cfg, args) -> int:
    if len(cfg.penalty.aversions) < 2:
        raise ConfigError("penalty.aversions: a sweep needs at least two values")
    if cfg.study not in ("bs-oosp", "heston-oosp"):
        raise ConfigError("study: the aversion sweep runs on an oosp study")
    res = studies.run_study(cfg, log=_log(args))
    if not args.quiet:
        print(f"{'strategy':<8} {'aversion':>9} {'mean':>10} {'std':>10}")
        for r in res["rows"]:
            av = "" if r["aversion"] is None else f"{r['aversion']:g}"
            print(f"{r['strategy']:<8} {av:>9} {r['mean']:>10.6f} {r['std']:>10.6f}")
    return 0


def cmd_hms(cfg, args) -> int:
    if cfg.study != "bs-hms":
        raise ConfigError("study: hms-benchmark needs the bs-hms study")
    studies.run_study(cfg, log=_log(args))
    return 0


def cmd_plots(args) -> int:
    from .plotting import emit_plots

    run_dir = args.run_dir or args.out
    if run_dir is None and args.config is not None:
        run_dir = _load(args).out
    if run_dir is None:
        raise ConfigError("emit-plots needs --run-dir, --out or --config")
    made = emit_plots(run_dir)
    _log(args)(f"wrote {len(made)} figures to {Path(run_dir) / 'plots'}")
    return 0


COMMANDS = {
    "run": cmd_run,
    "calibrate": cmd_calibrate,
    "train-hedge": cmd_train_hedge,
    "train-robust": cmd_train_robust,
    "oosp": cmd_oosp,
    "sweep-gamma": cmd_sweep,
    "hms-benchmark": cmd_hms,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_default_dtype(torch.float64)
    try:
        if args.command == "emit-plots":
            return cmd_plots(args)
        cfg = _load(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
