"""Brownian noise and path generators (Black-Scholes, Heston with volatility swap, neural SDE).

Generators are deterministic maps from a :class:`NoiseBatch` to a
:class:`PathBatch`. Parameters may be python floats or torch tensors; tensors
either are scalars (with ``requires_grad`` for adversarial training) or carry
one value per path, which is how pooled multi-scenario batches are built.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch
from torch import nn

from . import sigkit
from .nnkit import DTYPE, Adam, Mlp, MlpParams

BLOCK = 1024  # paths per RNG substream

Scalar = Union[float, torch.Tensor]


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        object.__setattr__(self, "times", t)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a time grid needs at least two points")
        if t[0] < 0 or np.any(np.diff(t) <= 0):
            raise ValueError("times must start at t0 >= 0 and increase strictly")

    @classmethod
    def uniform(cls, n_steps: int, dt: float, t0: float = 0.0) -> "TimeGrid":
        if n_steps < 1 or dt <= 0:
            raise ValueError("need n_steps >= 1 and dt > 0")
        return cls(t0 + dt * np.arange(n_steps + 1))

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def dt(self) -> float:
        return float(self.dts[0])

    @property
    def maturity(self) -> float:
        return float(self.times[-1])

    def normalized(self) -> np.ndarray:
        return (self.times - self.times[0]) / (self.times[-1] - self.times[0])


@dataclass(frozen=True)
class NoiseBatch:
    increments: torch.Tensor  # [batch, steps, dim], variance dt per step
    seed: int
    grid: TimeGrid
    stream: int = 0

    @property
    def batch(self) -> int:
        return self.increments.shape[0]

    @property
    def dim(self) -> int:
        return self.increments.shape[2]


ROLES = ("asset", "variance", "vol-swap", "hidden")


@dataclass(frozen=True)
class PathBatch:
    values: torch.Tensor  # [batch, steps + 1, channels]
    grid: TimeGrid
    roles: tuple[str, ...]
    tradable: tuple[bool, ...]

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] != len(self.roles) or len(self.roles) != len(self.tradable):
            raise ValueError("values, roles and tradable flags are inconsistent")
        if self.values.shape[1] != self.grid.times.size:
            raise ValueError("time dimension does not match the grid")
        for r in self.roles:
            if r not in ROLES:
                raise ValueError(f"unknown channel role {r!r}")

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def tradable_mask(self) -> tuple[bool, ...]:
        return self.tradable

    def tradable_values(self) -> torch.Tensor:
        idx = [i for i, f in enumerate(self.tradable) if f]
        return self.values[:, :, idx]

    def channel(self, role: str) -> torch.Tensor:
        if role not in self.roles:
            raise KeyError(f"no {role!r} channel; channels are {self.roles}")
        return self.values[:, :, self.roles.index(role)]

    def detach(self) -> "PathBatch":
        return replace(self, values=self.values.detach())

    def export(self, path: str | Path) -> None:
        """Write ``path`` (row-major little-endian float64) and ``path.json`` sidecar."""
        path = Path(path)
        arr = np.ascontiguousarray(self.values.detach().numpy().astype("<f8"))
        path.write_bytes(arr.tobytes())
        meta = {
            "batch": int(arr.shape[0]),
            "steps": int(arr.shape[1] - 1),
            "dims": int(arr.shape[2]),
            "roles": list(self.roles),
            "tradable": list(self.tradable),
            "times": self.grid.times.tolist(),
        }
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PathBatch":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
        shape = (meta["batch"], meta["steps"] + 1, meta["dims"])
        arr = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(shape).astype(np.float64)
        return cls(torch.from_numpy(arr.copy()), TimeGrid(np.asarray(meta["times"])), tuple(meta["roles"]), tuple(meta["tradable"]))


# ---------------------------------------------------------------------------
# noise


def _block_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream), int(block)]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_noise(seed: int, batch: int, grid: TimeGrid, dim: int = 1, stream: int = 0) -> NoiseBatch:
    """Gaussian increments with variance dt per step.

    Paths are drawn in blocks of 1024, each block from its own Philox key
    derived from (seed, stream, block). A batch of n paths is therefore a prefix
    of any larger batch with the same seed and stream.
    """
    if batch < 1 or dim < 1:
        raise ValueError("batch and dim must be >= 1")
    n = grid.n_steps
    out = np.empty((batch, n, dim))
    for b in range(math.ceil(batch / BLOCK)):
        lo, hi = b * BLOCK, min(batch, (b + 1) * BLOCK)
        out[lo:hi] = _block_rng(seed, stream, b).standard_normal((hi - lo, n, dim))
    out *= np.sqrt(grid.dts)[None, :, None]
    return NoiseBatch(torch.from_numpy(out), int(seed), grid, int(stream))


def substream(seed: int, stream: int) -> np.random.Generator:
    """A Philox generator keyed on (seed, stream), for draws other than path noise."""
    return _block_rng(seed, stream, 0)


# ---------------------------------------------------------------------------
# parameters


def _as_tensor(x: Scalar) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.tensor(float(x), dtype=DTYPE)


def _per_path(x: Scalar) -> torch.Tensor:
    t = _as_tensor(x)
    return t[:, None] if t.ndim == 1 else t


def _val(x: Scalar) -> np.ndarray:
    return x.detach().numpy() if isinstance(x, torch.Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class BSParams:
    sigma: Scalar
    s0: Scalar = 1.0
    variant = "bs"
    fields = ("sigma",)

    def validate(self, allow_zero: bool = False) -> None:
        sig, s0 = _val(self.sigma), _val(self.s0)
        if np.any(sig < 0) or (not allow_zero and np.any(sig == 0)):
            raise ValueError(f"BS volatility must be positive, got {sig}")
        if np.any(s0 <= 0):
            raise ValueError("initial price must be positive")

    def vector(self) -> np.ndarray:
        return np.array([float(_val(self.sigma))])

    def summary(self) -> str:
        return f"sigma={float(_val(self.sigma)):.6g}"


@dataclass
class HestonParams:
    kappa: Scalar
    beta: Scalar
    sigma: Scalar
    rho: Scalar
    s0: Scalar = 1.0
    variant = "heston"
    fields = ("kappa", "beta", "sigma", "rho")

    @property
    def v0(self) -> Scalar:
        return self.beta

    def validate(self, allow_zero_vol: bool = False) -> None:
        k, b, s, r = (_val(getattr(self, f)) for f in self.fields)
        if np.any(k <= 0) or np.any(b <= 0):
            raise ValueError("Heston kappa and beta must be positive")
        if np.any(s < 0) or (not allow_zero_vol and np.any(s == 0)):
            raise ValueError("Heston vol-of-vol must be positive")
        if np.any(np.abs(r) > 1):
            raise ValueError("Heston correlation must lie in [-1, 1]")
        if np.any(_val(self.s0) <= 0):
            raise ValueError("initial price must be positive")

    def vector(self) -> np.ndarray:
        return np.array([float(_val(getattr(self, f))) for f in self.fields])

    def summary(self) -> str:
        return " ".join(f"{f}={float(_val(getattr(self, f))):.6g}" for f in self.fields)


@dataclass
class NsdeParams:
    drift: MlpParams
    diffusion: MlpParams
    s0: tuple[float, ...] = (1.0, 0.04)
    noise_dim: int = 2
    variant = "nsde"

    def validate(self) -> None:
        d = self.noise_dim
        if len(self.s0) != d:
            raise ValueError("s0 must have one entry per noise dimension")
        if self.drift.layer_sizes[0] != d or self.drift.layer_sizes[-1] != d:
            raise ValueError("drift net must map R^d' to R^d'")
        if self.diffusion.layer_sizes[0] != d or self.diffusion.layer_sizes[-1] != d * d:
            raise ValueError("diffusion net must map R^d' to R^(d' x d')")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.drift.flat(), self.diffusion.flat()])

    def summary(self) -> str:
        return f"nsde[{self.vector().size} weights]"


GeneratorParams = Union[BSParams, HestonParams, NsdeParams]


# ---------------------------------------------------------------------------
# generators


def generate_bs(params: BSParams, noise: NoiseBatch) -> PathBatch:
    """Exact log scheme S_t = s0 exp(-sigma^2 t / 2 + sigma W_t); one tradable asset."""
    params.validate(allow_zero=True)
    sigma, s0 = _per_path(params.sigma), _per_path(params.s0)
    grid = noise.grid
    dw = noise.increments[:, :, 0]
    w = torch.cat([torch.zeros(noise.batch, 1, dtype=DTYPE), torch.cumsum(dw, dim=1)], dim=1)
    t = torch.from_numpy(grid.times - grid.times[0])
    s = s0 * torch.exp(-0.5 * sigma**2 * t + sigma * w)
    return PathBatch(s.unsqueeze(-1), grid, ("asset",), (True,))


class _SafeSqrt(torch.autograd.Function):
    # sqrt of a nonnegative input with zero gradient at 0 instead of inf
    @staticmethod
    def forward(ctx, x):
        y = torch.sqrt(x)
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved_tensors
        safe = torch.where(y > 0, y, torch.ones_like(y))
        return torch.where(y > 0, g / (2 * safe), torch.zeros_like(g))


def safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    return _SafeSqrt.apply(torch.clamp(x, min=0.0))


def generate_heston(params: HestonParams, noise: NoiseBatch) -> PathBatch:
    """Full-truncation Euler for the variance, log-Euler for the asset, plus the volatility swap.

    Channels: asset (tradable), variance v+ (observable), vol-swap (tradable).
    The swap is the realized left-Riemann integral of v+ plus the conditional
    expectation of the remaining variance, so it equals the realized integral at T.
    """
    params.validate(allow_zero_vol=True)
    if noise.dim != 2:
        raise ValueError("Heston needs two-dimensional noise")
    # scalars or one value per path
    kappa, beta, sigma, rho, s0 = (_as_tensor(getattr(params, f)) for f in (*params.fields, "s0"))
    grid = noise.grid
    dts = torch.from_numpy(grid.dts)
    z1 = noise.increments[:, :, 0]
    z2 = rho.reshape(-1, 1) * z1 + safe_sqrt(1 - rho.reshape(-1, 1) ** 2) * noise.increments[:, :, 1]
    b = noise.batch
    v = beta * torch.ones(b, dtype=DTYPE)
    logs = torch.log(s0) * torch.ones(b, dtype=DTYPE)
    integral = torch.zeros(b, dtype=DTYPE)
    vs, ss, ints = [v], [logs], [integral]
    for n in range(grid.n_steps):
        dt = dts[n]
        vp = torch.relu(v)
        sv = safe_sqrt(vp)
        logs = logs - 0.5 * vp * dt + sv * z1[:, n]
        integral = integral + vp * dt
        v = v + kappa * (beta - vp) * dt + sigma * sv * z2[:, n]
        vs.append(v)
        ss.append(logs)
        ints.append(integral)
    vplus = torch.relu(torch.stack(vs, dim=1))
    asset = torch.exp(torch.stack(ss, dim=1))
    tau = torch.from_numpy(grid.maturity - grid.times)
    k = kappa.reshape(-1, 1) if kappa.ndim else kappa
    bt = beta.reshape(-1, 1) if beta.ndim else beta
    swap = torch.stack(ints, dim=1) + (vplus - bt) / k * (1 - torch.exp(-k * tau)) + bt * tau
    values = torch.stack([asset, vplus, swap], dim=-1)
    return PathBatch(values, grid, ("asset", "variance", "vol-swap"), (True, False, True))


class NsdeNets(nn.Module):
    """Drift and diffusion networks of a neural SDE with the output filters applied."""

    def __init__(self, noise_dim: int = 2, hidden: Sequence[int] = (36, 36, 36), seed: int = 0, s0=(1.0, 0.04), trainable_s0: bool = False):
        super().__init__()
        d = noise_dim
        self.noise_dim = d
        self.drift = Mlp([d, *hidden, d], seed=seed)
        self.diffusion = Mlp([d, *hidden, d * d], seed=seed + 1)
        start = torch.tensor(list(s0), dtype=DTYPE)
        if trainable_s0:
            self.s0 = nn.Parameter(start)
        else:
            self.register_buffer("s0", start)

    def mu(self, x: torch.Tensor) -> torch.Tensor:
        out = self.drift(x)
        # the traded coordinate is kept driftless
        return torch.cat([torch.zeros_like(out[:, :1]), out[:, 1:]], dim=1)

    def sig(self, x: torch.Tensor) -> torch.Tensor:
        d = self.noise_dim
        return torch.abs(self.diffusion(x)).reshape(-1, d, d)

    def to_params(self) -> NsdeParams:
        return NsdeParams(self.drift.to_params(), self.diffusion.to_params(), tuple(self.s0.detach().tolist()), self.noise_dim)

    @classmethod
    def from_params(cls, p: NsdeParams) -> "NsdeNets":
        hidden = p.drift.layer_sizes[1:-1]
        nets = cls(p.noise_dim, hidden, s0=p.s0)
        nets.drift.load_params(p.drift)
        nets.diffusion.load_params(p.diffusion)
        return nets


def generate_nsde(params: NsdeParams | NsdeNets, noise: NoiseBatch) -> PathBatch:
    """Euler-Maruyama S_n = S_{n-1} + mu(S_{n-1}) dt + sigma(S_{n-1}) dW_n without a time input."""
    nets = params if isinstance(params, NsdeNets) else NsdeNets.from_params(params)
    if not isinstance(params, NsdeNets):
        params.validate()
    d = nets.noise_dim
    if noise.dim != d:
        raise ValueError(f"noise has dimension {noise.dim}, generator expects {d}")
    dts = noise.grid.dts
    x = nets.s0.expand(noise.batch, d)
    out = [x]
    for n in range(noise.grid.n_steps):
        x = x + nets.mu(x) * dts[n] + torch.bmm(nets.sig(x), noise.increments[:, n, :, None])[:, :, 0]
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"neural SDE state became non-finite at step {n + 1}")
        out.append(x)
    values = torch.stack(out, dim=1)
    roles = ("asset", "variance") + ("hidden",) * (d - 2) if d >= 2 else ("asset",)
    return PathBatch(values, noise.grid, roles, (True,) + (False,) * (d - 1))


def noise_dim(params: GeneratorParams | NsdeNets) -> int:
    if isinstance(params, BSParams):
        return 1
    if isinstance(params, HestonParams):
        return 2
    return params.noise_dim


def generate(params: GeneratorParams | NsdeNets, noise: NoiseBatch) -> PathBatch:
    if isinstance(params, BSParams):
        return generate_bs(params, noise)
    if isinstance(params, HestonParams):
        return generate_heston(params, noise)
    return generate_nsde(params, noise)


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationResult:
    params: GeneratorParams
    objective: float
    converged: bool = True
    flagged: bool = False
    history: list[float] = field(default_factory=list)


def realized_vol(batch: PathBatch | torch.Tensor, dt: float | None = None) -> float:
    """Annualized unbiased std of the asset's log-returns, pooled over paths and steps."""
    if isinstance(batch, PathBatch):
        s, dt = batch.channel("asset"), batch.grid.dt
    else:
        s = batch
    r = torch.log(s[:, 1:] / s[:, :-1]).detach().reshape(-1).numpy()
    if r.size < 2:
        raise ValueError("need at least two log-returns")
    return float(np.std(r, ddof=1) / math.sqrt(dt))


def calibrate(family: str, target, method: str | None = None, **kw) -> CalibrationResult:
    """Fit generator parameters to a target.

    ``bs``/``realized-vol``: target is a PathBatch or a realized-vol value.
    ``heston``/``fixed``: target is a HestonParams passed through.
    ``nsde``/``sig-mmd-gradient``: target is a PathBatch; keyword arguments go
    to :func:`calibrate_nsde`.
    """
    family = family.lower()
    if family == "bs":
        if method not in (None, "realized-vol"):
            raise ValueError("BS calibration supports method 'realized-vol'")
        sigma = float(target) if isinstance(target, (int, float)) else realized_vol(target)
        s0 = kw.get("s0", 1.0)
        if isinstance(target, PathBatch):
            s0 = float(target.channel("asset")[0, 0])
        return CalibrationResult(BSParams(sigma, s0), 0.0, True, flagged=sigma == 0.0)
    if family == "heston":
        if method not in (None, "fixed"):
            raise ValueError("Heston calibration supports method 'fixed'")
        target.validate()
        return CalibrationResult(target, 0.0)
    if family == "nsde":
        if method not in (None, "sig-mmd-gradient"):
            raise ValueError("NSDE calibration supports method 'sig-mmd-gradient'")
        return calibrate_nsde(target, **kw)
    raise ValueError(f"unknown generator family {family!r}")


def calibrate_nsde(
    target: PathBatch,
    *,
    nets: NsdeNets | None = None,
    channels: Sequence[int] = (0, 1),
    depth: int = 2,
    chain: Sequence[str] = ("time", "lead-lag"),
    steps: int = 300,
    batch: int = 2048,
    lr: float = 1e-3,
    seed: int = 0,
    tol: float = 0.0,
    patience: int = 50,
) -> CalibrationResult:
    """Adam on the SigMMD between generated and target paths, fresh noise each step.

    Stops after ``steps`` iterations or when the best objective has not improved
    by a relative ``tol`` for ``patience`` steps.
    """
    grid = target.grid
    s0 = tuple(float(x) for x in target.values[0, 0, list(channels)])
    nets = nets or NsdeNets(len(channels), seed=seed, s0=s0)
    opt = Adam(list(nets.parameters()), lr=lr)
    ref = target.values[:, :, list(channels)].detach()
    times = grid.times
    history: list[float] = []
    best, since = math.inf, 0
    for it in range(steps):
        noise = sample_noise(seed, batch, grid, nets.noise_dim, stream=1000 + it)
        def objective():
            gen = generate_nsde(nets, noise).values
            return sigkit.sig_mmd_tensor(gen, ref, depth, chain, times)
        val = objective()
        g = torch.autograd.grad(val, list(nets.parameters()), allow_unused=True)
        g = [torch.zeros_like(p) if gi is None else gi for p, gi in zip(nets.parameters(), g)]
        opt.step(g)
        history.append(float(val.detach()))
        if history[-1] < best * (1 - tol):
            best, since = history[-1], 0
        else:
            since += 1
            if since >= patience:
                break
    with torch.no_grad():
        noise = sample_noise(seed, batch, grid, nets.noise_dim, stream=999)
        final = float(sigkit.sig_mmd_tensor(generate_nsde(nets, noise).values, ref, depth, chain, times))
    return CalibrationResult(nets.to_params(), final, converged=math.isfinite(final), history=history)


# ---------------------------------------------------------------------------
# scenario parameter files

BS_HEADER = ["variant", "sigma", "s0"]
HESTON_HEADER = ["variant", "kappa", "beta", "sigma", "rho", "s0"]


def write_scenario_csv(path: str | Path, params: Sequence[BSParams | HestonParams]) -> None:
    rows = list(params)
    if not rows:
        raise ValueError("no scenarios to write")
    heston = isinstance(rows[0], HestonParams)
    header = HESTON_HEADER if heston else BS_HEADER
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for p in rows:
            w.writerow([p.variant] + [repr(float(_val(getattr(p, c)))) for c in header[1:]])


def read_scenario_csv(path: str | Path, validate: bool = True) -> list[BSParams | HestonParams]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header not in (BS_HEADER, HESTON_HEADER):
            raise ValueError(f"{path}: unexpected header {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                vals = [float(x) for x in row[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if header == HESTON_HEADER:
                if row[0] != "heston":
                    raise ValueError(f"{path}:{lineno}: variant must be 'heston'")
                p = HestonParams(*vals)
            else:
                if row[0] != "bs":
                    raise ValueError(f"{path}:{lineno}: variant must be 'bs'")
                p = BSParams(*vals)
            if validate:
                p.validate()
            out.append(p)
    return out


# ---------------------------------------------------------------------------
# trainable generators


class BSGenerator(nn.Module):
    noise_dim = 1
    variant = "bs"

    def __init__(self, params: BSParams):
        super().__init__()
        self.sigma = nn.Parameter(torch.tensor(float(_val(params.sigma)), dtype=DTYPE))
        self.s0 = float(_val(params.s0))

    def forward(self, noise: NoiseBatch) -> PathBatch:
        return generate_bs(BSParams(self.sigma, self.s0), noise)

    def project_(self) -> None:
        with torch.no_grad():
            self.sigma.clamp_(min=1e-6)

    def to_params(self) -> BSParams:
        return BSParams(float(self.sigma.detach()), self.s0)

    def summary(self) -> str:
        return self.to_params().summary()


class HestonGenerator(nn.Module):
    noise_dim = 2
    variant = "heston"

    def __init__(self, params: HestonParams):
        super().__init__()
        self.xi = nn.Parameter(torch.tensor(params.vector(), dtype=DTYPE))
        self.s0 = float(_val(params.s0))

    def forward(self, noise: NoiseBatch) -> PathBatch:
        k, b, s, r = self.xi
        return generate_heston(HestonParams(k, b, s, r, self.s0), noise)

    def project_(self) -> None:
        with torch.no_grad():
            self.xi[:3].clamp_(min=1e-6)
            self.xi[3].clamp_(-1.0, 1.0)

    def to_params(self) -> HestonParams:
        return HestonParams(*(float(x) for x in self.xi.detach()), self.s0)

    def summary(self) -> str:
        return self.to_params().summary()


class NsdeGenerator(nn.Module):
    variant = "nsde"

    def __init__(self, params: NsdeParams | NsdeNets):
        super().__init__()
        self.nets = params if isinstance(params, NsdeNets) else NsdeNets.from_params(params)
        self.noise_dim = self.nets.noise_dim

    def forward(self, noise: NoiseBatch) -> PathBatch:
        return generate_nsde(self.nets, noise)

    def project_(self) -> None:
        pass

    def to_params(self) -> NsdeParams:
        return self.nets.to_params()

    def summary(self) -> str:
        return self.to_params().summary()


def trainable(params: GeneratorParams | NsdeNets) -> nn.Module:
    """Wrap generator parameters in a module whose parameters carry gradients."""
    if isinstance(params, BSParams):
        return BSGenerator(params)
    if isinstance(params, HestonParams):
        return HestonGenerator(params)
    return NsdeGenerator(params)
