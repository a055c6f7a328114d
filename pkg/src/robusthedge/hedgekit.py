"""Hedging strategies, trading gains, risk measures and the deep-hedge trainer.

Sign convention: a risk measure maps a P&L sample to a monetary risk (lower is
better). The hedger minimizes ``loss(risk, gains - payoff)``. For the
exponential utility, which is a utility rather than a risk, ``loss`` flips
the sign so the same minimization applies.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Protocol, Sequence

import numpy as np
import torch
from scipy.stats import norm

from . import genkit, nnkit
from .genkit import BSParams, GeneratorParams, HestonParams, NoiseBatch, PathBatch, TimeGrid
from .nnkit import DTYPE, Adam, Mlp

# noise stream namespaces so that independent phases never share draws
STREAM_PRETRAIN = 1 << 20
STREAM_FLAT = 2 << 20
STREAM_EVAL = 3 << 20


# ---------------------------------------------------------------------------
# closed-form Black-Scholes companions


def _d1(t, s, sigma, strike, maturity):
    tau = np.maximum(maturity - np.asarray(t, dtype=float), 1e-300)
    return (np.log(np.asarray(s, dtype=float) / strike) + 0.5 * sigma**2 * tau) / (sigma * np.sqrt(tau)), tau


def bs_call_price(t, s, sigma: float, strike: float, maturity: float):
    d1, tau = _d1(t, s, sigma, strike, maturity)
    d2 = d1 - sigma * np.sqrt(tau)
    return s * norm.cdf(d1) - strike * norm.cdf(d2)


def bs_delta(t, s, sigma: float, strike: float, maturity: float):
    d1, _ = _d1(t, s, sigma, strike, maturity)
    return norm.cdf(d1)


def bs_gamma(t, s, sigma: float, strike: float, maturity: float):
    d1, tau = _d1(t, s, sigma, strike, maturity)
    return norm.pdf(d1) / (np.asarray(s, dtype=float) * sigma * np.sqrt(tau))


# ---------------------------------------------------------------------------
# strategies


class Strategy(Protocol):
    def positions(self, batch: PathBatch) -> torch.Tensor:
        """Holdings [batch, steps, tradables] decided at t_0 .. t_{N-1}."""


@dataclass
class NetStrategy:
    """One network shared across steps, fed with normalized time and channel levels.

    A feature named ``log-<role>`` feeds the logarithm of that channel instead of its level.
    """

    net: Mlp
    features: tuple[str, ...] = ("time", "asset")
    trade: tuple[str, ...] | None = None  # restrict trading to these channels; default all tradables

    def __post_init__(self):
        if self.net.layer_sizes[0] != len(self.features):
            raise ValueError(f"network takes {self.net.layer_sizes[0]} inputs, {len(self.features)} features declared")
        if self.trade is not None and len(self.trade) != self.output_dim:
            raise ValueError("one network output per traded channel expected")

    @property
    def output_dim(self) -> int:
        return self.net.layer_sizes[-1]

    def feature_tensor(self, batch: PathBatch) -> torch.Tensor:
        n = batch.grid.n_steps
        cols = []
        for name in self.features:
            if name == "time":
                t = torch.from_numpy(batch.grid.normalized()[:-1])
                cols.append(t.expand(batch.batch, n))
            else:
                role, log = (name[4:], True) if name.startswith("log-") else (name, False)
                try:
                    x = batch.channel(role)[:, :-1]
                except KeyError:
                    raise ValueError(f"feature {name!r} not available; channels are {batch.roles}") from None
                cols.append(torch.log(x) if log else x)
        return torch.stack(cols, dim=-1)

    def positions(self, batch: PathBatch) -> torch.Tensor:
        n_trad = len(self.trade) if self.trade is not None else sum(batch.tradable)
        if n_trad != self.output_dim:
            raise ValueError(f"strategy trades {self.output_dim} instruments, batch has {n_trad} tradables")
        return self.net(self.feature_tensor(batch))

    def evaluate(self, t_norm: float, **levels) -> np.ndarray:
        """Holdings at normalized time ``t_norm`` on a grid of feature levels (keyword per channel)."""
        size = max(np.size(v) for v in levels.values())
        cols = []
        for name in self.features:
            if name == "time":
                cols.append(np.full(size, t_norm))
            else:
                log = name.startswith("log-")
                x = np.broadcast_to(np.asarray(levels[name[4:] if log else name], dtype=float), (size,))
                cols.append(np.log(x) if log else x)
        with torch.no_grad():
            return self.net(torch.from_numpy(np.stack(cols, axis=-1))).numpy()


@dataclass
class PositionTable:
    """Explicit per-path, per-step holdings."""

    table: torch.Tensor  # [batch, steps, tradables]

    def positions(self, batch: PathBatch) -> torch.Tensor:
        if self.table.shape[0] != batch.batch or self.table.shape[1] != batch.grid.n_steps:
            raise ValueError("position table does not match the batch")
        return self.table


@dataclass
class ZeroStrategy:
    def positions(self, batch: PathBatch) -> torch.Tensor:
        return torch.zeros(batch.batch, batch.grid.n_steps, sum(batch.tradable), dtype=DTYPE)


@dataclass
class DeltaStrategy:
    """Black-Scholes delta of a call, recomputed at each trading time."""

    sigma: float
    strike: float = 1.0

    def positions(self, batch: PathBatch) -> torch.Tensor:
        t = torch.from_numpy(batch.grid.times[:-1])
        tau = batch.grid.maturity - t
        s = batch.channel("asset")[:, :-1]
        d1 = (torch.log(s / self.strike) + 0.5 * self.sigma**2 * tau) / (self.sigma * torch.sqrt(tau))
        return torch.special.ndtr(d1).unsqueeze(-1)


def trading_gains(strategy: Strategy, batch: PathBatch) -> torch.Tensor:
    """Per-path sum over steps of holdings at t_{n-1} times the tradables' increment to t_n."""
    trade = getattr(strategy, "trade", None)
    if trade is None:
        traded = batch.tradable_values()
    else:
        for role in trade:
            if role not in batch.roles or not batch.tradable[batch.roles.index(role)]:
                raise ValueError(f"channel {role!r} is not tradable in this batch")
        traded = torch.stack([batch.channel(r) for r in trade], dim=-1)
    pos = strategy.positions(batch)
    if pos.shape != (batch.batch, batch.grid.n_steps, traded.shape[2]):
        raise ValueError(f"positions have shape {tuple(pos.shape)}, expected {(batch.batch, batch.grid.n_steps, traded.shape[2])}")
    return (pos * (traded[:, 1:] - traded[:, :-1])).sum(dim=(1, 2))


def payoff_call(batch: PathBatch, strike: float = 1.0) -> torch.Tensor:
    try:
        s_t = batch.channel("asset")[:, -1]
    except KeyError:
        raise ValueError("payoff needs an asset channel") from None
    return torch.relu(s_t - strike)


# ---------------------------------------------------------------------------
# risk measures


def _weights(x: torch.Tensor, weights) -> torch.Tensor:
    if weights is None:
        return torch.full_like(x, 1.0 / x.numel())
    w = torch.as_tensor(weights, dtype=x.dtype)
    if w.shape != x.shape or torch.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative, non-zero and shaped like the sample")
    return w / w.sum()


@dataclass(frozen=True)
class Entropic:
    lam: float
    is_utility = False

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("risk aversion must be positive")

    def value(self, x: torch.Tensor, weights=None) -> torch.Tensor:
        w = _weights(x, weights)
        mask = w > 0
        out = torch.logsumexp(-self.lam * x[mask] + torch.log(w[mask]), dim=0) / self.lam
        if not torch.isfinite(out):
            raise FloatingPointError("entropic risk overflowed after stabilization")
        return out

    def describe(self) -> dict:
        return {"variant": "entropic", "lam": self.lam}


@dataclass(frozen=True)
class ExpUtility:
    lam: float
    is_utility = True

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("risk aversion must be positive")

    def value(self, x: torch.Tensor, weights=None) -> torch.Tensor:
        w = _weights(x, weights)
        out = (w * (1 - torch.exp(-self.lam * x))).sum() / self.lam
        if not torch.isfinite(out):
            raise FloatingPointError("exponential utility overflowed")
        return out

    def describe(self) -> dict:
        return {"variant": "exp-utility", "lam": self.lam}


@dataclass(frozen=True)
class OCE:
    """inf_w { w + E[u(-X - w)] } for a convex non-decreasing loss function u.

    ``kinks`` lists the breakpoints when u is piecewise linear; the infimum is
    then attained at one of the candidates -x_i - kink and is found exactly.
    Otherwise golden-section search on [-10 max|X|, 10 max|X|] to 1e-8.
    """

    u: Callable[[torch.Tensor], torch.Tensor]
    name: str = "custom"
    kinks: tuple[float, ...] | None = None
    params: tuple = ()
    tol: float = 1e-8
    is_utility = False

    @classmethod
    def linear(cls) -> "OCE":
        return cls(lambda y: y, "linear", kinks=(0.0,))

    @classmethod
    def entropic(cls, lam: float) -> "OCE":
        return cls(lambda y: torch.expm1(lam * y) / lam, "entropic", params=(lam,))

    @classmethod
    def cvar(cls, alpha: float) -> "OCE":
        if not 0 <= alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        return cls(lambda y: torch.relu(y) / (1 - alpha), "cvar", kinks=(0.0,), params=(alpha,))

    @classmethod
    def piecewise_linear(cls, knots: Sequence[float], slopes: Sequence[float]) -> "OCE":
        """u(0)=0 continuous, slope ``slopes[j]`` between ``knots[j-1]`` and ``knots[j]``."""
        knots = [float(k) for k in knots]
        slopes = [float(s) for s in slopes]
        if len(slopes) != len(knots) + 1 or any(b < a for a, b in zip(slopes, slopes[1:])) or slopes[0] < 0:
            raise ValueError("slopes must be nonnegative, non-decreasing and one more than knots")

        def u(y):
            out = slopes[0] * y
            for k, (a, b) in zip(knots, zip(slopes, slopes[1:])):
                out = out + (b - a) * (torch.relu(y - k) - max(-k, 0.0))
            return out

        return cls(u, "piecewise", kinks=tuple(knots), params=(tuple(knots), tuple(slopes)))

    def _objective(self, w, x, p):
        return w + (p * self.u(-x - w)).sum()

    def argmin(self, x: torch.Tensor, weights=None) -> float:
        p = _weights(x, weights).detach()
        xd = x.detach()
        if self.kinks is not None:
            cand = (-xd[p > 0][:, None] - torch.tensor(self.kinks, dtype=x.dtype)[None]).reshape(-1)
            vals = torch.cat([
                chunk + (p[None] * self.u(-xd[None] - chunk[:, None])).sum(dim=1)
                for chunk in torch.split(cand, 256)
            ])
            return float(cand[torch.argmin(vals)])
        m = float(xd.abs().max())
        lo, hi = -10 * max(m, 1e-3), 10 * max(m, 1e-3)
        g = (math.sqrt(5) - 1) / 2
        a, b = lo + (1 - g) * (hi - lo), lo + g * (hi - lo)
        fa, fb = float(self._objective(a, xd, p)), float(self._objective(b, xd, p))
        while hi - lo > self.tol:
            if fa <= fb:
                hi, b, fb = b, a, fa
                a = lo + (1 - g) * (hi - lo)
                fa = float(self._objective(a, xd, p))
            else:
                lo, a, fa = a, b, fb
                b = lo + g * (hi - lo)
                fb = float(self._objective(b, xd, p))
        return 0.5 * (lo + hi)

    def value(self, x: torch.Tensor, weights=None) -> torch.Tensor:
        # envelope theorem: the minimizer is held fixed when differentiating
        w = self.argmin(x, weights)
        return self._objective(torch.tensor(w, dtype=x.dtype), x, _weights(x, weights))

    def describe(self) -> dict:
        return {"variant": "oce", "u": self.name, "params": list(self.params)}


RiskMeasure = Entropic | ExpUtility | OCE


def risk(spec: RiskMeasure, sample, weights=None) -> torch.Tensor:
    """Value of the risk functional (for ExpUtility: the utility) on a sample."""
    x = torch.as_tensor(sample, dtype=DTYPE)
    if x.numel() == 0:
        raise ValueError("empty sample")
    return spec.value(x.reshape(-1), weights)


def loss(spec: RiskMeasure, sample, weights=None) -> torch.Tensor:
    """Objective the hedger minimizes: the risk, or minus the utility."""
    v = risk(spec, sample, weights)
    return -v if spec.is_utility else v


def risk_from_dict(d: dict) -> RiskMeasure:
    kind = d.get("variant", "entropic")
    if kind == "entropic":
        return Entropic(float(d["lam"]))
    if kind == "exp-utility":
        return ExpUtility(float(d["lam"]))
    if kind == "oce":
        u = d.get("u", "linear")
        if u == "linear":
            return OCE.linear()
        if u == "entropic":
            return OCE.entropic(float(d["params"][0]))
        if u == "cvar":
            return OCE.cvar(float(d["params"][0]))
    raise ValueError(f"unsupported risk measure {d!r}")


# ---------------------------------------------------------------------------
# training


@dataclass
class Schedule:
    """Escalating batch sizes; each pass regenerates a pool of paths and walks it in minibatches."""

    batch_sizes: tuple[int, ...] = (2**8, 2**10, 2**12, 2**14)
    passes: int = 5
    pool: int = 2**16
    lr: float = 1e-3
    scale: float = 1.0

    def plan(self) -> list[tuple[int, int]]:
        pool = max(1, int(round(self.pool * self.scale)))
        out = []
        for bs in self.batch_sizes:
            bs = min(bs, pool)
            out.extend([(pool, bs)] * self.passes)
        return out


@dataclass
class FlatSchedule:
    """``steps`` updates, each on a fresh batch; step k uses noise stream STREAM_FLAT + offset + k."""

    steps: int
    batch: int
    lr: float = 1e-3
    offset: int = 0


def as_generator(gen) -> Callable[[NoiseBatch], PathBatch]:
    if isinstance(gen, (BSParams, HestonParams, genkit.NsdeParams, genkit.NsdeNets)):
        return lambda noise: genkit.generate(gen, noise)
    return gen


def generator_noise_dim(gen) -> int:
    if isinstance(gen, (BSParams, HestonParams, genkit.NsdeParams, genkit.NsdeNets)):
        return genkit.noise_dim(gen)
    return gen.noise_dim


def hedge_objective(strategy: Strategy, batch: PathBatch, risk_spec: RiskMeasure, strike: float) -> torch.Tensor:
    return loss(risk_spec, trading_gains(strategy, batch) - payoff_call(batch, strike))


CHUNK = 2**13


def slice_batch(batch: PathBatch, start: int, stop: int) -> PathBatch:
    return PathBatch(batch.values[start:stop], batch.grid, batch.roles, batch.tradable)


def pnl_no_grad(strategy: Strategy, batch: PathBatch, strike: float, chunk: int = CHUNK) -> torch.Tensor:
    with torch.no_grad():
        parts = []
        for i in range(0, batch.batch, chunk):
            b = slice_batch(batch, i, i + chunk)
            parts.append(trading_gains(strategy, b) - payoff_call(b, strike))
        return torch.cat(parts)


def _grads_or_zero(out, params, **kw) -> list[torch.Tensor]:
    gs = torch.autograd.grad(out, params, allow_unused=True, **kw)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]


def hedge_loss_and_grad(
    strategy: NetStrategy, batch: PathBatch, risk_spec: RiskMeasure, strike: float, params: Sequence[torch.Tensor], chunk: int = CHUNK
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Hedge loss and its gradient in ``params``.

    Batches above ``chunk`` paths are handled in two passes: the loss gradient
    with respect to each path's P&L is taken first, then pushed through the
    network one chunk at a time. Same gradient, bounded memory.
    """
    if batch.batch <= chunk:
        obj = hedge_objective(strategy, batch, risk_spec, strike)
        return obj.detach(), _grads_or_zero(obj, params)
    x = pnl_no_grad(strategy, batch, strike, chunk).requires_grad_(True)
    obj = loss(risk_spec, x)
    (gx,) = torch.autograd.grad(obj, x)
    total = [torch.zeros_like(p) for p in params]
    for i in range(0, batch.batch, chunk):
        b = slice_batch(batch, i, i + chunk)
        xc = trading_gains(strategy, b) - payoff_call(b, strike)
        for acc, g in zip(total, _grads_or_zero((gx[i : i + chunk] * xc).sum(), params)):
            acc += g
    return obj.detach(), total


def batch_stream(gen, schedule: Schedule | FlatSchedule, seed: int, grid: TimeGrid) -> Iterator[PathBatch]:
    """Training batches for a schedule; the generator is evaluated without gradients."""
    fn, dim = as_generator(gen), generator_noise_dim(gen)
    if isinstance(schedule, FlatSchedule):
        for k in range(schedule.steps):
            noise = genkit.sample_noise(seed, schedule.batch, grid, dim, STREAM_FLAT + schedule.offset + k)
            with torch.no_grad():
                paths = fn(noise).detach()
            yield paths
        return
    for p, (pool, bs) in enumerate(schedule.plan()):
        noise = genkit.sample_noise(seed, pool, grid, dim, STREAM_PRETRAIN + p)
        with torch.no_grad():
            paths = fn(noise).detach()
        for j in range(pool // bs):
            yield PathBatch(paths.values[j * bs : (j + 1) * bs], grid, paths.roles, paths.tradable)


@dataclass
class HedgeRun:
    strategy: NetStrategy
    generator: object
    risk: RiskMeasure
    strike: float
    schedule: Schedule | FlatSchedule
    seed: int
    final_objective: float
    history: list[float] = field(default_factory=list)

    def metadata(self) -> dict:
        gen = self.generator
        gdesc = {"variant": gen.variant, "summary": gen.summary()} if hasattr(gen, "summary") else {"variant": type(gen).__name__}
        return {
            "generator": gdesc,
            "risk": self.risk.describe(),
            "strike": self.strike,
            "schedule": {"kind": type(self.schedule).__name__, **asdict(self.schedule)},
            "seed": self.seed,
            "final_objective": self.final_objective,
            "features": list(self.strategy.features),
        }

    def save(self, directory: str | Path, name: str = "hedge") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        nnkit.save_checkpoint(d / f"{name}.ckpt", self.strategy.net, seed=self.seed, step=len(self.history))
        (d / f"{name}.json").write_text(json.dumps(self.metadata(), indent=2, sort_keys=True), encoding="utf-8")


def new_strategy(
    features: Sequence[str], n_trade: int, hidden: Sequence[int] = (128, 128), seed: int = 0, trade: Sequence[str] | None = None
) -> NetStrategy:
    return NetStrategy(Mlp([len(features), *hidden, n_trade], seed=seed), tuple(features), tuple(trade) if trade else None)


def evaluate_objective(strategy: Strategy, gen, risk_spec: RiskMeasure, strike: float, grid: TimeGrid, n_paths: int, seed: int, stream: int = STREAM_EVAL) -> float:
    noise = genkit.sample_noise(seed, n_paths, grid, generator_noise_dim(gen), stream)
    with torch.no_grad():
        return float(hedge_objective(strategy, as_generator(gen)(noise), risk_spec, strike))


def train_deep_hedge(
    generator,
    risk_spec: RiskMeasure,
    strike: float,
    schedule: Schedule | FlatSchedule,
    seed: int,
    grid: TimeGrid,
    strategy: NetStrategy | None = None,
    features: Sequence[str] = ("time", "asset"),
    hidden: Sequence[int] = (128, 128),
    eval_paths: int = 2**14,
    trade: Sequence[str] | None = None,
) -> HedgeRun:
    """Minimize the hedge loss over network weights; returns the run with a held-out objective."""
    fn = as_generator(generator)
    if strategy is None:
        probe = fn(genkit.sample_noise(seed, 1, grid, generator_noise_dim(generator)))
        n_trade = len(trade) if trade else sum(probe.tradable)
        strategy = new_strategy(features, n_trade, hidden, seed, trade)
    params = list(strategy.net.parameters())
    opt = Adam(params, lr=schedule.lr)
    history = []
    for batch in batch_stream(generator, schedule, seed, grid):
        obj, grads = hedge_loss_and_grad(strategy, batch, risk_spec, strike, params)
        if not torch.isfinite(obj):
            raise FloatingPointError(f"hedge objective diverged after {len(history)} steps (last finite {history[-1:] })")
        opt.step(grads)
        history.append(float(obj.detach()))
    final = evaluate_objective(strategy, generator, risk_spec, strike, grid, eval_paths, seed)
    return HedgeRun(strategy, generator, risk_spec, strike, schedule, seed, final, history)


def indifference_price(
    generator,
    risk_spec: RiskMeasure,
    strike: float | None,
    schedule: Schedule | FlatSchedule,
    seed: int,
    grid: TimeGrid,
    claim: Callable[[PathBatch], torch.Tensor] | None = None,
    eval_paths: int = 2**14,
    **kw,
) -> float:
    """pi(-C) - pi(0): optimized loss with the claim minus optimized loss without it.

    Both runs share seed, schedule and noise; both optima are evaluated on the
    same held-out batch. ``claim`` defaults to a call with ``strike``.
    """
    if claim is None:
        claim = lambda b: payoff_call(b, strike)  # noqa: E731
    zero = lambda b: torch.zeros(b.batch, dtype=DTYPE)  # noqa: E731

    def optimize(c):
        fn = as_generator(generator)
        probe = fn(genkit.sample_noise(seed, 1, grid, generator_noise_dim(generator)))
        strat = new_strategy(kw.get("features", ("time", "asset")), sum(probe.tradable), kw.get("hidden", (128, 128)), seed)
        params = list(strat.net.parameters())
        opt = Adam(params, lr=schedule.lr)
        for batch in batch_stream(generator, schedule, seed, grid):
            obj = loss(risk_spec, trading_gains(strat, batch) - c(batch))
            opt.step(torch.autograd.grad(obj, params))
        noise = genkit.sample_noise(seed, eval_paths, grid, generator_noise_dim(generator), STREAM_EVAL)
        with torch.no_grad():
            b = fn(noise)
            # the zero strategy is always admissible
            trained = float(loss(risk_spec, trading_gains(strat, b) - c(b)))
            return min(trained, float(loss(risk_spec, -c(b))))

    return optimize(claim) - optimize(zero)
