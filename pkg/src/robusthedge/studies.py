"""End-to-end study pipelines driven by an ExperimentConfig.

Every strategy compared inside a study starts from the same pretrained hedge
and then takes the same number of hedger steps on the same noise streams;
only the measure those steps see differs (reference, adversarial, pooled).
"""

from __future__ import annotations

import copy
import csv
import json
import platform
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__, genkit, hedgekit, nnkit, robust
from .config import ExperimentConfig
from .evalkit.oosp import STREAM_OOSP, OospReport, oosp, train_test_hedge
from .evalkit import pde, scenarios
from .genkit import BSParams, HestonParams, TimeGrid
from .hedgekit import FlatSchedule, NetStrategy, Schedule

STREAM_REFERENCE = 8 << 20
SUMMARY_HEADER = ["strategy", "aversion", "mean", "std", "M", "eval_paths"]


@dataclass
class Artifacts:
    out: Path
    files: list[str] = field(default_factory=list)

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        if name not in self.files:
            self.files.append(name)
        return self.out / name

    def write_json(self, name: str, data) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p


# ---------------------------------------------------------------------------
# building blocks


def time_grid(cfg: ExperimentConfig) -> TimeGrid:
    return TimeGrid.uniform(cfg.market.steps, cfg.market.dt)


def reference_params(cfg: ExperimentConfig) -> BSParams | HestonParams:
    m = cfg.market
    if m.family == "bs":
        return BSParams(m.sigma, m.s0)
    return HestonParams(m.kappa, m.beta, m.vol_of_vol, m.rho, m.s0)


def risk_measure(cfg: ExperimentConfig):
    return hedgekit.risk_from_dict(cfg.risk.as_dict())


def pretrain_schedule(cfg: ExperimentConfig) -> Schedule:
    p = cfg.pretrain
    return Schedule(tuple(p.batch_sizes), p.passes, p.pool, p.lr, cfg.scale if p.scaled else 1.0)


def gan_config(cfg: ExperimentConfig, freeze: bool = False) -> robust.GanConfig:
    g = cfg.gan
    return robust.GanConfig(g.epochs, g.batch, g.gen_lr, g.hedger_lr, g.ratio, cfg.seed, cfg.scale, freeze, g.chunk)


def pretrain(cfg: ExperimentConfig, generator=None) -> hedgekit.HedgeRun:
    """Deep hedge on the reference generator, or the configured checkpoint if one is given."""
    grid = time_grid(cfg)
    gen = reference_params(cfg) if generator is None else generator
    h = cfg.hedger
    trade = tuple(h.trade) if h.trade else None
    if cfg.pretrain.checkpoint is not None:
        params, _ = nnkit.load_checkpoint(cfg.pretrain.checkpoint)
        strat = NetStrategy(nnkit.Mlp.from_params(params), tuple(h.features), trade)
        final = hedgekit.evaluate_objective(strat, gen, risk_measure(cfg), cfg.market.strike, grid, cfg.pretrain.eval_paths, cfg.seed)
        return hedgekit.HedgeRun(strat, gen, risk_measure(cfg), cfg.market.strike, pretrain_schedule(cfg), cfg.seed, final)
    return hedgekit.train_deep_hedge(
        gen,
        risk_measure(cfg),
        cfg.market.strike,
        pretrain_schedule(cfg),
        cfg.seed,
        grid,
        features=tuple(h.features),
        hidden=tuple(h.hidden),
        eval_paths=cfg.pretrain.eval_paths,
        trade=trade,
    )


def reference_paths(cfg: ExperimentConfig, generator=None, n: int | None = None) -> genkit.PathBatch:
    gen = reference_params(cfg) if generator is None else generator
    n = cfg.penalty.reference_paths if n is None else n
    noise = genkit.sample_noise(cfg.seed, n, time_grid(cfg), hedgekit.generator_noise_dim(gen), STREAM_REFERENCE)
    with torch.no_grad():
        return hedgekit.as_generator(gen)(noise).detach()


def make_penalty(cfg: ExperimentConfig, aversion: float, reference: genkit.PathBatch | None = None):
    """Penalty with weight 1/gamma = ``aversion``."""
    gamma = 1.0 / aversion
    p = cfg.penalty
    if p.kind == "vol-mse":
        return robust.VolMse(gamma, cfg.market.sigma)
    if p.kind == "hms":
        return robust.HmsVol(gamma, cfg.market.sigma)
    ref = reference_paths(cfg) if reference is None else reference
    return robust.SigMmd(gamma, ref.values[:, :, list(p.channels)], tuple(p.channels), p.depth, tuple(p.chain))


def deep_continuation(cfg: ExperimentConfig, pretrained: NetStrategy, generator=None) -> robust.GanResult:
    """The hedger half of the GAN loop with the generator frozen at the reference."""
    gen = reference_params(cfg) if generator is None else generator
    return robust.train_robust_gan(pretrained, gen, None, gan_config(cfg, freeze=True), time_grid(cfg), risk_measure(cfg), cfg.market.strike)


def robust_hedge(cfg: ExperimentConfig, pretrained: NetStrategy, aversion: float, generator=None, reference=None) -> robust.GanResult:
    gen = reference_params(cfg) if generator is None else generator
    pen = make_penalty(cfg, aversion, reference)
    return robust.train_robust_gan(pretrained, gen, pen, gan_config(cfg), time_grid(cfg), risk_measure(cfg), cfg.market.strike)


def test_hedge(cfg: ExperimentConfig, pretrained: NetStrategy, scen: scenarios.ScenarioSet) -> NetStrategy:
    """Pretrained hedge continued on the pooled scenario measure, step for step like the deep continuation."""
    g = cfg.gan
    sched = FlatSchedule(gan_config(cfg).scaled_epochs * g.ratio, g.batch, g.hedger_lr)
    run = train_test_hedge(
        scen, risk_measure(cfg), cfg.market.strike, sched, cfg.seed, time_grid(cfg), strategy=copy.deepcopy(pretrained), eval_paths=1000
    )
    return run.strategy


def build_scenarios(cfg: ExperimentConfig) -> scenarios.ScenarioSet:
    s = cfg.scenarios
    if s.kind == "file":
        if s.file is None:
            raise ValueError("scenarios.file is required for kind 'file'")
        return scenarios.ScenarioSet.from_csv(s.file)
    if s.kind == "bs-inverse":
        return scenarios.build_bs_scenarios(cfg.market.sigma, s.n_obs, s.M, cfg.seed, cfg.market.s0)
    ref = reference_params(cfg)
    daily = s.daily_file if s.daily_file is not None else scenarios.ar1_daily_params(ref, s.synthetic_days, cfg.seed)
    built = scenarios.build_heston_scenarios(ref, daily, s.lags)
    if built.M > s.M:
        # keep an evenly spread subset so every lag stays represented
        idx = np.linspace(0, built.M - 1, s.M).round().astype(int)
        lags = built.notes["lags"]
        built = scenarios.ScenarioSet(
            [built.params[i] for i in idx], built.provenance, built.dropped, {"lags": [lags[i] for i in idx], "subsampled_from": built.M}
        )
    return built


def evaluate(cfg: ExperimentConfig, strategy, scen: scenarios.ScenarioSet, strategy_id: str) -> OospReport:
    return oosp(
        strategy,
        scen,
        risk_measure(cfg),
        cfg.market.strike,
        time_grid(cfg),
        cfg.scenarios.eval_paths,
        cfg.seed,
        reference=reference_params(cfg),
        strategy_id=strategy_id,
    )


def _aversion_tag(a: float) -> str:
    return f"{a:g}".replace(".", "p").replace("+", "")


def write_summary(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([r["strategy"], "" if r["aversion"] is None else repr(float(r["aversion"])), repr(r["mean"]), repr(r["std"]), r["M"], r["eval_paths"]])


def read_summary(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {
            "strategy": r["strategy"],
            "aversion": None if r["aversion"] == "" else float(r["aversion"]),
            "mean": float(r["mean"]),
            "std": float(r["std"]),
            "M": int(r["M"]),
            "eval_paths": int(r["eval_paths"]),
        }
        for r in rows
    ]


def _save_strategy(art: Artifacts, name: str, strat: NetStrategy, seed: int, extra: dict | None = None) -> None:
    nnkit.save_checkpoint(art.path(f"{name}.ckpt"), strat.net, seed=seed, extra={"features": list(strat.features), **(extra or {})})


def _save_gan(art: Artifacts, name: str, res: robust.GanResult, seed: int) -> None:
    _save_strategy(art, name, res.strategy, seed, {"generator": res.generator.summary()})
    res.write_history(art.path(f"history_{name}.csv"))


# ---------------------------------------------------------------------------
# studies


def run_oosp_study(cfg: ExperimentConfig, art: Artifacts, log=print) -> dict:
    """Pretrain, continue the deep hedge, train one robust hedge per aversion, evaluate all out of sample.

    Failures of individual aversions are recorded and the sweep moves on.
    """
    pre = pretrain(cfg)
    pre.save(art.out, "pretrain")
    art.files += ["pretrain.ckpt", "pretrain.json"]
    log(f"pretrained hedge: objective {pre.final_objective:.6f}")
    scen = build_scenarios(cfg)
    scen.to_csv(art.path("scenarios.csv"))
    log(f"{scen.M} scenarios ({scen.provenance}, {scen.dropped} dropped)")

    rows, failures = [], {}
    deep = deep_continuation(cfg, pre.strategy)
    _save_gan(art, "deep", deep, cfg.seed)
    rep = evaluate(cfg, deep.strategy, scen, "deep")
    rep.write(art.path("oosp_deep.csv"), art.path("oosp_deep.json"))
    rows.append({"strategy": "deep", "aversion": None, **rep.summary()})
    log(f"deep hedge: mean {rep.mean:.6f} std {rep.std:.6f}")

    if cfg.scenarios.test_hedge:
        th = test_hedge(cfg, pre.strategy, scen)
        _save_strategy(art, "test", th, cfg.seed)
        rep = evaluate(cfg, th, scen, "test")
        rep.write(art.path("oosp_test.csv"), art.path("oosp_test.json"))
        rows.append({"strategy": "test", "aversion": None, **rep.summary()})
        log(f"test hedge: mean {rep.mean:.6f} std {rep.std:.6f}")

    ref_paths = reference_paths(cfg) if cfg.penalty.kind == "sig-mmd" else None
    for a in cfg.penalty.aversions:
        tag = f"robust_a{_aversion_tag(a)}"
        try:
            res = robust_hedge(cfg, pre.strategy, a, reference=ref_paths)
            _save_gan(art, tag, res, cfg.seed)
            rep = evaluate(cfg, res.strategy, scen, tag)
            rep.write(art.path(f"oosp_{tag}.csv"), art.path(f"oosp_{tag}.json"))
        except (ValueError, FloatingPointError, RuntimeError) as exc:
            failures[str(a)] = f"{type(exc).__name__}: {exc}"
            log(f"aversion {a:g} failed: {exc}")
            continue
        rows.append({"strategy": "robust", "aversion": a, **rep.summary()})
        log(f"robust hedge, aversion {a:g}: mean {rep.mean:.6f} std {rep.std:.6f} generator {res.generator.summary()}")

    write_summary(art.path("summary.csv"), rows)
    if failures:
        art.write_json("sweep_failures.json", failures)
    return {"rows": rows, "failures": failures}


def run_hms_study(cfg: ExperimentConfig, art: Artifacts, log=print) -> dict:
    """Robust hedge under the utility-weighted vol penalty against the PDE correction term."""
    pre = pretrain(cfg)
    pre.save(art.out, "pretrain")
    art.files += ["pretrain.ckpt", "pretrain.json"]
    log(f"pretrained hedge: objective {pre.final_objective:.6f}")
    deep = deep_continuation(cfg, pre.strategy)
    _save_gan(art, "deep", deep, cfg.seed)
    a = cfg.penalty.aversions[0]
    res = robust_hedge(cfg, pre.strategy, a)
    tag = f"robust_a{_aversion_tag(a)}"
    _save_gan(art, tag, res, cfg.seed)
    h = cfg.hms
    m = cfg.market
    grid = time_grid(cfg)
    sol = pde.hms_pde_solve(m.sigma, grid.maturity, m.strike, m.s0, h.bounds, h.n_space, h.n_time)
    cmp_ = pde.compare_to_hms(res.strategy, deep.strategy, sol, 1.0 / a, h.t_eval, h.window)
    cmp_.write_csv(art.path("hms_comparison.csv"))
    order = pde.observed_order(m.sigma, grid.maturity, n_time=h.n_time)
    out = {
        "aversion": a,
        "correlation": cmp_.correlation,
        "observed_order": order,
        "terminal_max_abs": float(np.max(np.abs(sol.w[-1]))),
        "generator": res.generator.summary(),
    }
    art.write_json("hms_summary.json", out)
    log(f"correlation {cmp_.correlation:.4f}, observed PDE order {order:.3f}")
    return out


def fit_nsde(cfg: ExperimentConfig, target: genkit.PathBatch) -> genkit.CalibrationResult:
    n = cfg.nsde
    s0 = tuple(float(x) for x in target.values[0, 0, list(cfg.penalty.channels)])
    nets = genkit.NsdeNets(len(cfg.penalty.channels), tuple(n.hidden), cfg.seed, s0, n.trainable_s0)
    return genkit.calibrate_nsde(
        target, nets=nets, channels=tuple(cfg.penalty.channels), depth=n.depth, chain=tuple(cfg.penalty.chain),
        steps=n.steps, batch=n.batch, lr=n.lr, seed=cfg.seed,
    )


def run_nsde_study(cfg: ExperimentConfig, art: Artifacts, log=print) -> dict:
    """Robust-minus-deep P&L on reference paths, once with a Heston and once with a fitted neural SDE generator."""
    ref_params = reference_params(cfg)
    if not isinstance(ref_params, HestonParams):
        raise ValueError("market.family: the generator comparison needs a heston reference")
    ref = reference_paths(cfg)
    fit = fit_nsde(cfg, ref)
    log(f"neural SDE fitted: SigMMD {fit.history[0]:.3e} -> {fit.objective:.3e}")
    art.write_json("nsde_fit.json", {"initial": fit.history[0], "final": fit.objective, "steps": len(fit.history)})
    nets = genkit.NsdeGenerator(fit.params)
    grid = time_grid(cfg)
    eval_noise = genkit.sample_noise(cfg.seed, cfg.scenarios.eval_paths, grid, 2, STREAM_OOSP)
    with torch.no_grad():
        eval_paths = genkit.generate(ref_params, eval_noise)
    s_t = eval_paths.channel("asset")[:, -1].numpy()
    a = cfg.penalty.aversions[0]
    rows, stats = [], {}
    for name, gen in (("heston", ref_params), ("nsde", nets)):
        pre = pretrain(cfg, gen)
        deep = deep_continuation(cfg, pre.strategy, gen)
        res = robust_hedge(cfg, pre.strategy, a, gen, ref)
        _save_gan(art, f"deep_{name}", deep, cfg.seed)
        _save_gan(art, f"robust_{name}", res, cfg.seed)
        with torch.no_grad():
            diff = (hedgekit.trading_gains(res.strategy, eval_paths) - hedgekit.trading_gains(deep.strategy, eval_paths)).numpy()
        rows += [(name, float(s), float(d)) for s, d in zip(s_t, diff)]
        stats[name] = {"mean_difference": float(diff.mean()), "std_difference": float(diff.std(ddof=1)), "generator": res.generator.summary()}
        log(f"{name}: robust minus deep P&L mean {diff.mean():.3e} std {diff.std(ddof=1):.3e}")
    with open(art.path("nsde_compare.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generator", "terminal_asset", "pnl_difference"])
        for g, s, d in rows:
            w.writerow([g, repr(s), repr(d)])
    art.write_json("nsde_summary.json", stats)
    return stats


STUDIES = {
    "bs-oosp": run_oosp_study,
    "heston-oosp": run_oosp_study,
    "bs-hms": run_hms_study,
    "nsde-compare": run_nsde_study,
}


def manifest(cfg: ExperimentConfig, art: Artifacts, status: str, extra: dict | None = None) -> dict:
    import matplotlib
    import scipy

    return {
        "study": cfg.study,
        "status": status,
        "config_hash": cfg.config_hash(),
        "config": cfg.model_dump(mode="json"),
        "seeds": {"seed": cfg.seed},
        "scale": cfg.scale,
        "versions": {
            "artifact": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "torch": torch.__version__,
            "matplotlib": matplotlib.__version__,
        },
        "files": sorted(set(art.files)),
        **(extra or {}),
    }


def run_study(cfg: ExperimentConfig, out: Path | None = None, log=print) -> dict:
    """Run the configured study; always leaves a manifest, plus a failure report if something broke."""
    art = Artifacts(Path(out if out is not None else cfg.out))
    try:
        result = STUDIES[cfg.study](cfg, art, log)
    except Exception as exc:
        art.write_json("failure.json", {"error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()})
        art.write_json("manifest.json", manifest(cfg, art, "failed"))
        raise
    art.write_json("manifest.json", manifest(cfg, art, "ok"))
    return result
