"""Out-of-sample evaluation of fixed strategies across scenario sets, and the pooled test hedge."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .. import genkit, hedgekit
from ..genkit import BSParams, HestonParams, NoiseBatch, PathBatch, TimeGrid
from ..hedgekit import RiskMeasure, Strategy
from ..nnkit import DTYPE
from .scenarios import ScenarioSet, parameter_distance

STREAM_OOSP = 6 << 20
STREAM_POOL = 7 << 20


@dataclass
class OospReport:
    losses: np.ndarray
    eval_paths: int
    strategy_id: str
    summaries: list[str] = field(default_factory=list)
    distances: np.ndarray | None = None
    skipped: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return int(self.losses.size)

    @property
    def mean(self) -> float:
        return float(np.mean(self.losses))

    @property
    def std(self) -> float:
        return float(np.std(self.losses, ddof=1)) if self.losses.size > 1 else 0.0

    def summary(self) -> dict:
        return {"mean": self.mean, "std": self.std, "M": self.M, "eval_paths": self.eval_paths, "strategy_id": self.strategy_id}

    def write(self, csv_path: str | Path, json_path: str | Path | None = None) -> None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario_id", "param_summary", "distance_to_ref", "loss"])
            for i, l in enumerate(self.losses):
                d = "" if self.distances is None else repr(float(self.distances[i]))
                w.writerow([i, self.summaries[i] if self.summaries else "", d, repr(float(l))])
        if json_path is not None:
            summ = self.summary()
            if self.skipped:
                summ["skipped"] = self.skipped
            Path(json_path).write_text(json.dumps(summ, indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def read_csv(cls, path: str | Path, eval_paths: int = 0, strategy_id: str = "") -> "OospReport":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        losses = np.array([float(r["loss"]) for r in rows])
        dist = [r["distance_to_ref"] for r in rows]
        distances = None if any(d == "" for d in dist) else np.array([float(d) for d in dist])
        return cls(losses, eval_paths, strategy_id, [r["param_summary"] for r in rows], distances)


def oosp(
    strategy: Strategy,
    scenarios: ScenarioSet | Sequence,
    risk_spec: RiskMeasure,
    strike: float,
    grid: TimeGrid,
    eval_paths: int = 10_000,
    seed: int = 0,
    reference=None,
    strategy_id: str = "",
    chunk: int = 2**14,
) -> OospReport:
    """Loss of a fixed strategy under each scenario's own dynamics.

    Scenario m draws its paths from noise stream (seed, STREAM_OOSP + m), so two
    strategies evaluated with the same seed see identical paths.
    """
    params = scenarios.params if isinstance(scenarios, ScenarioSet) else list(scenarios)
    if eval_paths < 1000:
        raise ValueError("use at least 1000 evaluation paths per scenario")
    losses, summaries, dists, skipped = [], [], [], {}
    for m, p in enumerate(params):
        try:
            noise = genkit.sample_noise(seed, eval_paths, grid, genkit.noise_dim(p), STREAM_OOSP + m)
            with torch.no_grad():
                paths = genkit.generate(p, noise)
                pnl = hedgekit.trading_gains(strategy, paths) - hedgekit.payoff_call(paths, strike)
                losses.append(float(hedgekit.loss(risk_spec, pnl)))
        except (ValueError, FloatingPointError) as exc:
            skipped[m] = str(exc)
            continue
        summaries.append(p.summary())
        if reference is not None:
            dists.append(parameter_distance(p, reference))
    return OospReport(
        np.array(losses), eval_paths, strategy_id, summaries, np.array(dists) if reference is not None else None, skipped
    )


class PooledGenerator:
    """Mixture of scenario generators: each path picks a scenario uniformly at random.

    The scenario index of each path is drawn from (noise seed, noise stream), so
    a noise batch determines the pooled paths completely.
    """

    def __init__(self, scenarios: ScenarioSet | Sequence):
        params = scenarios.params if isinstance(scenarios, ScenarioSet) else list(scenarios)
        if not params:
            raise ValueError("no scenarios to pool")
        kinds = {type(p) for p in params}
        if len(kinds) != 1 or kinds.pop() not in (BSParams, HestonParams):
            raise ValueError("pooling needs scenarios of a single parametric family")
        self.params = params
        self.kind = type(params[0])
        self.noise_dim = genkit.noise_dim(params[0])
        self.table = torch.tensor(np.array([[*p.vector(), float(p.s0)] for p in params]), dtype=DTYPE)

    def __call__(self, noise: NoiseBatch) -> PathBatch:
        idx = genkit.substream(noise.seed, STREAM_POOL + noise.stream).integers(len(self.params), size=noise.batch)
        cols = self.table[torch.from_numpy(idx)]
        if self.kind is BSParams:
            return genkit.generate_bs(BSParams(cols[:, 0], cols[:, 1]), noise)
        return genkit.generate_heston(HestonParams(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], cols[:, 4]), noise)


def train_test_hedge(
    scenarios: ScenarioSet | Sequence,
    risk_spec: RiskMeasure,
    strike: float,
    schedule,
    seed: int,
    grid: TimeGrid,
    **kw,
) -> hedgekit.HedgeRun:
    """Deep hedge on the pooled scenario measure (a model-averaging baseline)."""
    return hedgekit.train_deep_hedge(PooledGenerator(scenarios), risk_spec, strike, schedule, seed, grid, **kw)


def forward_test(
    true_params,
    n_scenarios: int,
    obs_paths: int,
    train: Callable[[object, int], Strategy],
    risk_spec: RiskMeasure,
    strike: float,
    grid: TimeGrid,
    eval_paths: int = 10_000,
    seed: int = 0,
) -> OospReport:
    """Fit a generator to a small sample per scenario, train on it, evaluate under the true dynamics.

    This is expensive: one training run per scenario. ``train`` maps
    (fitted params, scenario index) to a strategy. Only BS fitting by realized
    vol is built in.
    """
    if not isinstance(true_params, BSParams):
        raise ValueError("forward test fitting is implemented for Black-Scholes only")
    losses, summaries = [], []
    eval_noise = genkit.sample_noise(seed, eval_paths, grid, 1, STREAM_OOSP - 1)
    with torch.no_grad():
        truth = genkit.generate_bs(true_params, eval_noise)
    for m in range(n_scenarios):
        obs = genkit.generate_bs(true_params, genkit.sample_noise(seed, obs_paths, grid, 1, STREAM_OOSP + m))
        fitted = genkit.calibrate("bs", obs).params
        strat = train(fitted, m)
        with torch.no_grad():
            pnl = hedgekit.trading_gains(strat, truth) - hedgekit.payoff_call(truth, strike)
            losses.append(float(hedgekit.loss(risk_spec, pnl)))
        summaries.append(fitted.summary())
    return OospReport(np.array(losses), eval_paths, "forward", summaries)
