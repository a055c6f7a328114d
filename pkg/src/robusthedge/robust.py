"""Penalties on generated path laws and the adversarial generator-vs-hedger loop.

The robust objective on one noise batch is

    loss(risk, gains - payoff) - penalty(generated paths)

The generator ascends it, the hedger descends the loss term. Penalties are
scaled by the uncertainty aversion 1/gamma: a large aversion pins the
generator to its reference, a small one lets it roam toward the worst case.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import genkit, sigkit
from .genkit import PathBatch, TimeGrid
from .hedgekit import CHUNK, STREAM_FLAT, NetStrategy, RiskMeasure, hedge_loss_and_grad, loss, payoff_call, pnl_no_grad, trading_gains
from .nnkit import Adam

STREAM_GEN = 4 << 20


def _log_vol_per_step(batch: PathBatch) -> torch.Tensor:
    s = batch.channel("asset")
    if torch.any(s <= 0):
        raise ValueError("volatility penalties need a strictly positive asset channel")
    r = torch.log(s[:, 1:] / s[:, :-1])
    var = r.var(dim=0)  # cross-sectional, unbiased
    dts = torch.from_numpy(batch.grid.dts)
    return torch.sqrt(var / dts)


@dataclass(frozen=True)
class VolMse:
    """Mean over steps of (sigma_ref - annualized cross-sectional log-return vol)^2, divided by gamma."""

    gamma: float
    sigma_ref: float
    uses_hedge_value = False

    def __post_init__(self):
        if not (self.gamma > 0 and self.sigma_ref > 0):
            raise ValueError("gamma and sigma_ref must be positive")

    @property
    def aversion(self) -> float:
        return 1.0 / self.gamma

    def distance(self, batch: PathBatch) -> torch.Tensor:
        return ((self.sigma_ref - _log_vol_per_step(batch)) ** 2).mean()

    def value(self, batch: PathBatch, hedge_value=None) -> torch.Tensor:
        return self.distance(batch) / self.gamma


@dataclass(frozen=True)
class HmsVol:
    """Volatility deviation weighted by the current hedge loss (a homogeneous penalty)."""

    gamma: float
    sigma_ref: float
    uses_hedge_value = True

    def __post_init__(self):
        if not (self.gamma > 0 and self.sigma_ref > 0):
            raise ValueError("gamma and sigma_ref must be positive")

    @property
    def aversion(self) -> float:
        return 1.0 / self.gamma

    def distance(self, batch: PathBatch) -> torch.Tensor:
        return ((self.sigma_ref - _log_vol_per_step(batch)) ** 2).mean()

    def value(self, batch: PathBatch, hedge_value) -> torch.Tensor:
        if hedge_value is None:
            raise ValueError("this penalty needs the hedge loss value")
        return torch.as_tensor(hedge_value, dtype=torch.float64) * self.distance(batch) / self.gamma


@dataclass(frozen=True)
class SigMmd:
    """SigMMD between selected channels of the generated batch and a fixed reference batch, over gamma."""

    gamma: float
    reference: torch.Tensor  # [batch, steps + 1, len(channels)]
    channels: tuple[int, ...] = (0, 1)
    depth: int = 2
    chain: tuple[str, ...] = ("time", "lead-lag")
    uses_hedge_value = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.reference.shape[0] == 0:
            raise ValueError("reference batch is empty")
        if self.reference.shape[2] != len(self.channels):
            raise ValueError("reference has a different number of channels than selected")
        # the reference expected signature never changes
        object.__setattr__(self, "_ref_es", None)

    @property
    def aversion(self) -> float:
        return 1.0 / self.gamma

    def _reference_es(self, times) -> torch.Tensor:
        if self._ref_es is None:
            es = sigkit.expected_signature_tensor(self.reference.detach(), self.depth, self.chain, times)
            object.__setattr__(self, "_ref_es", es)
        return self._ref_es

    def distance(self, batch: PathBatch) -> torch.Tensor:
        if max(self.channels) >= batch.values.shape[2]:
            raise ValueError(f"channels {self.channels} not available in a {batch.values.shape[2]}-channel batch")
        vals = batch.values[:, :, list(self.channels)]
        es = sigkit.expected_signature_tensor(vals, self.depth, self.chain, batch.grid.times)
        diff = (es - self._reference_es(batch.grid.times))[1:]
        return (diff * diff).sum()

    def value(self, batch: PathBatch, hedge_value=None) -> torch.Tensor:
        return self.distance(batch) / self.gamma


Penalty = VolMse | HmsVol | SigMmd


def penalty_vol_mse(batch: PathBatch, spec: VolMse) -> torch.Tensor:
    return spec.value(batch)


def penalty_hms(batch: PathBatch, pnl_utility, spec: HmsVol) -> torch.Tensor:
    return spec.value(batch, pnl_utility)


def penalty_sigmmd(batch: PathBatch, spec: SigMmd) -> torch.Tensor:
    return spec.value(batch)


@dataclass
class ObjectiveParts:
    total: torch.Tensor
    hedge: torch.Tensor
    penalty: torch.Tensor


def robust_objective(
    strategy: NetStrategy,
    generator,
    noise: genkit.NoiseBatch,
    risk_spec: RiskMeasure,
    strike: float,
    penalty: Penalty | None,
) -> ObjectiveParts:
    """Hedge loss minus penalty on one noise batch; differentiable in both players' parameters."""
    batch = generator(noise)
    hedge = loss(risk_spec, trading_gains(strategy, batch) - payoff_call(batch, strike))
    if penalty is None:
        pen = torch.zeros((), dtype=hedge.dtype)
    else:
        pen = penalty.value(batch, hedge)
    total = hedge - pen
    if not torch.isfinite(total):
        raise FloatingPointError(f"robust objective not finite: hedge={float(hedge)}, penalty={float(pen)}")
    return ObjectiveParts(total, hedge, pen)


def _zero_none(gs, params) -> list[torch.Tensor]:
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]


def generator_step_grads(
    strategy: NetStrategy,
    generator: torch.nn.Module,
    noise: genkit.NoiseBatch,
    risk_spec: RiskMeasure,
    strike: float,
    penalty: Penalty | None,
    chunk: int = CHUNK,
) -> tuple[ObjectiveParts, list[torch.Tensor], list[torch.Tensor]]:
    """Robust objective plus the gradients of its hedge and penalty parts in the generator parameters.

    Above ``chunk`` paths the objective is first differentiated with respect to
    the per-path P&L and the path values, then those sensitivities are chained
    through the generator and the strategy chunk by chunk.
    """
    xi = list(generator.parameters())
    if noise.batch <= chunk:
        parts = robust_objective(strategy, generator, noise, risk_spec, strike, penalty)
        g_hedge = _zero_none(torch.autograd.grad(parts.hedge, xi, retain_graph=True, allow_unused=True), xi)
        if penalty is not None and parts.penalty.requires_grad:
            g_pen = _zero_none(torch.autograd.grad(parts.penalty, xi, allow_unused=True), xi)
        else:
            g_pen = [torch.zeros_like(p) for p in xi]
        return ObjectiveParts(parts.total.detach(), parts.hedge.detach(), parts.penalty.detach()), g_hedge, g_pen

    def chunk_noise(i):
        return genkit.NoiseBatch(noise.increments[i : i + chunk], noise.seed, noise.grid, noise.stream)

    with torch.no_grad():
        pieces = [generator(chunk_noise(i)) for i in range(0, noise.batch, chunk)]
    full = PathBatch(torch.cat([b.values for b in pieces]), noise.grid, pieces[0].roles, pieces[0].tradable)
    vals = full.values.clone().requires_grad_(True)
    leaf = PathBatch(vals, full.grid, full.roles, full.tradable)
    x = pnl_no_grad(strategy, full, strike, chunk).requires_grad_(True)
    hedge = loss(risk_spec, x)
    pen = torch.zeros((), dtype=hedge.dtype) if penalty is None else penalty.value(leaf, hedge)
    total = hedge - pen
    if not torch.isfinite(total):
        raise FloatingPointError(f"robust objective not finite: hedge={float(hedge)}, penalty={float(pen)}")
    (gx_h,) = torch.autograd.grad(hedge, x, retain_graph=True)
    if pen.requires_grad:
        gx_p, gv_p = _zero_none(torch.autograd.grad(pen, (x, vals), allow_unused=True), (x, vals))
    else:
        gx_p, gv_p = torch.zeros_like(x), torch.zeros_like(vals)
    g_hedge = [torch.zeros_like(p) for p in xi]
    g_pen = [torch.zeros_like(p) for p in xi]
    for i in range(0, noise.batch, chunk):
        b = generator(chunk_noise(i))
        xc = trading_gains(strategy, b) - payoff_call(b, strike)
        sl = slice(i, i + chunk)
        s_h = (gx_h[sl] * xc).sum()
        s_p = (gx_p[sl] * xc).sum() + (gv_p[sl] * b.values).sum()
        for acc, g in zip(g_hedge, _zero_none(torch.autograd.grad(s_h, xi, retain_graph=True, allow_unused=True), xi)):
            acc += g
        for acc, g in zip(g_pen, _zero_none(torch.autograd.grad(s_p, xi, allow_unused=True), xi)):
            acc += g
    return ObjectiveParts(total.detach(), hedge.detach(), pen.detach()), g_hedge, g_pen


@dataclass
class GanConfig:
    epochs: int = 1000
    batch: int = 2**16
    gen_lr: float = 1e-4
    hedger_lr: float = 1e-3
    ratio: int = 1
    seed: int = 0
    scale: float = 1.0
    freeze_generator: bool = False
    chunk: int = CHUNK  # paths per backward pass; memory bound only, results do not depend on it beyond rounding

    def __post_init__(self):
        if min(self.epochs, self.batch, self.ratio) < 1 or self.gen_lr <= 0 or self.hedger_lr <= 0:
            raise ValueError("GAN schedule entries must be positive")
        if not 0 < self.scale <= 1:
            raise ValueError("scale must lie in (0, 1]")

    @property
    def scaled_epochs(self) -> int:
        return max(1, int(round(self.epochs * self.scale)))


@dataclass
class HistoryRow:
    epoch: int
    gen_objective: float
    hedger_objective: float
    penalty: float
    xi_summary: str
    penalty_grad_share: float = float("nan")
    hedger_step_norm: float = float("nan")


@dataclass
class GanResult:
    strategy: NetStrategy
    generator: torch.nn.Module
    history: list[HistoryRow] = field(default_factory=list)

    def write_history(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "gen_objective", "hedger_objective", "penalty", "xi_summary"])
            for r in self.history:
                w.writerow([r.epoch, repr(r.gen_objective), repr(r.hedger_objective), repr(r.penalty), r.xi_summary])


def _flat_norm(gs: Sequence[torch.Tensor]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in gs))


def train_robust_gan(
    pretrained: NetStrategy,
    reference,
    penalty: Penalty | None,
    cfg: GanConfig,
    grid: TimeGrid,
    risk_spec: RiskMeasure,
    strike: float = 1.0,
) -> GanResult:
    """Alternate one generator ascent step with ``cfg.ratio`` hedger descent steps per epoch.

    The pretrained strategy is copied, not modified. Hedger step k draws noise
    from stream STREAM_FLAT + k, the same stream a flat deep-hedge schedule
    uses, so a frozen generator reproduces that run exactly.
    """
    strategy = copy.deepcopy(pretrained)
    gen = genkit.trainable(reference) if not isinstance(reference, torch.nn.Module) else copy.deepcopy(reference)
    theta = list(strategy.net.parameters())
    xi = list(gen.parameters())
    h_opt = Adam(theta, lr=cfg.hedger_lr)
    g_opt = Adam(xi, lr=cfg.gen_lr)
    dim = gen.noise_dim
    history: list[HistoryRow] = []
    k = 0
    for epoch in range(cfg.scaled_epochs):
        share = float("nan")
        if cfg.freeze_generator:
            gen_obj = pen_val = float("nan")
        else:
            noise = genkit.sample_noise(cfg.seed, cfg.batch, grid, dim, STREAM_GEN + epoch)
            for p in theta:
                p.requires_grad_(False)
            parts, g_hedge, g_pen = generator_step_grads(strategy, gen, noise, risk_spec, strike, penalty, cfg.chunk)
            for p in theta:
                p.requires_grad_(True)
            nh, npen = _flat_norm(g_hedge), _flat_norm(g_pen)
            share = npen / (nh + npen) if nh + npen > 0 else float("nan")
            # ascent on hedge - penalty: descend its negative
            g_opt.step([-(a - b) for a, b in zip(g_hedge, g_pen)])
            gen.project_()
            gen_obj, pen_val = float(parts.total.detach()), float(parts.penalty.detach())
        for _ in range(cfg.ratio):
            noise = genkit.sample_noise(cfg.seed, cfg.batch, grid, dim, STREAM_FLAT + k)
            with torch.no_grad():
                paths = gen(noise).detach()
            obj, grads = hedge_loss_and_grad(strategy, paths, risk_spec, strike, theta, cfg.chunk)
            if not torch.isfinite(obj):
                raise FloatingPointError(f"hedger objective diverged at epoch {epoch}; history so far: {history[-5:]}")
            step_norm = h_opt.step(grads)
            k += 1
        history.append(HistoryRow(epoch, gen_obj, float(obj.detach()), pen_val, gen.summary(), share, step_norm))
    return GanResult(strategy, gen, history)
