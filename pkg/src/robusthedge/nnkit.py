"""Dense networks, gradients and a functional Adam optimizer.

Reverse-mode differentiation is delegated to torch autograd in float64. The
network is a plain ReLU MLP with identity output; weights can be moved in and
out of the torch module as numpy arrays and saved to a small binary format.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
_MAGIC = b"RHCK"
_VERSION = 1


@dataclass
class MlpParams:
    """Plain-array view of an MLP: ``weights[i]`` has shape (out, in)."""

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_sizes) < 2 or any(int(n) < 1 for n in self.layer_sizes):
            raise ValueError("layer_sizes needs at least two positive entries")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias per layer expected")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {i}: got {w.shape}/{b.shape}, expected {shape}/({shape[0]},)")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite entries")

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]) -> "MlpParams":
        sizes = list(layer_sizes)
        return cls(
            sizes,
            [np.zeros((sizes[i + 1], sizes[i])) for i in range(len(sizes) - 1)],
            [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)],
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Affine + ReLU layers with identity output; ``x`` is a vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.layer_sizes[0]:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {params.layer_sizes[0]}")
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


class Mlp(nn.Module):
    """ReLU network with identity output, He-uniform weights and zero biases."""

    def __init__(self, layer_sizes: Sequence[int], seed: int = 0):
        super().__init__()
        sizes = [int(n) for n in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("layer_sizes needs at least two positive entries")
        self.layer_sizes = sizes
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        self.layers = nn.ModuleList()
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            lin = nn.Linear(n_in, n_out, dtype=DTYPE)
            bound = math.sqrt(6.0 / n_in)
            with torch.no_grad():
                lin.weight.copy_(torch.rand(n_out, n_in, generator=gen, dtype=DTYPE) * 2 * bound - bound)
                lin.bias.zero_()
            self.layers.append(lin)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.layer_sizes[0]:
            raise ValueError(f"input has {x.shape[-1]} features, network expects {self.layer_sizes[0]}")
        for lin in self.layers[:-1]:
            x = torch.relu(lin(x))
        return self.layers[-1](x)

    def to_params(self) -> MlpParams:
        return MlpParams(
            list(self.layer_sizes),
            [lin.weight.detach().numpy().copy() for lin in self.layers],
            [lin.bias.detach().numpy().copy() for lin in self.layers],
        )

    @classmethod
    def from_params(cls, params: MlpParams, seed: int = 0) -> "Mlp":
        net = cls(params.layer_sizes, seed)
        net.load_params(params)
        return net

    def load_params(self, params: MlpParams) -> None:
        if list(params.layer_sizes) != self.layer_sizes:
            raise ValueError("layer sizes differ")
        with torch.no_grad():
            for lin, w, b in zip(self.layers, params.weights, params.biases):
                lin.weight.copy_(torch.from_numpy(w))
                lin.bias.copy_(torch.from_numpy(b))

    def flat(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])


def grad(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse-mode gradient of the scalar ``fn()`` with respect to ``params``.

    Parameters that do not influence the output get a zero gradient.
    """
    params = list(params)
    out = fn()
    if out.ndim != 0:
        raise ValueError("fn must return a scalar")
    if not torch.isfinite(out):
        raise FloatingPointError(f"objective is not finite: {out.item()}")
    gs = torch.autograd.grad(out, params, allow_unused=True)
    res = [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]
    for g in res:
        if not torch.isfinite(g).all():
            raise FloatingPointError("non-finite gradient")
    return res


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], lr: float = 1e-3, **kw) -> "OptState":
        return cls(
            lr=lr,
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
            **kw,
        )


def adam_step(
    state: OptState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor]
) -> tuple[list[torch.Tensor], OptState]:
    """One Adam update. Returns new parameter tensors and the new state; inputs are untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must have the same length")
    t = state.step + 1
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    new_p, new_m, new_v = [], [], []
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if p.shape != g.shape or p.shape != m.shape:
                raise ValueError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}")
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            step = state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps)
            new_p.append(p.detach() - step)
            new_m.append(m)
            new_v.append(v)
    new_state = OptState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)
    return new_p, new_state


class Adam:
    """Stateful wrapper applying :func:`adam_step` to live module parameters in place."""

    def __init__(self, params: Sequence[torch.nn.Parameter], lr: float = 1e-3, **kw):
        self.params = list(params)
        self.state = OptState.for_params(self.params, lr=lr, **kw)

    def step(self, grads: Sequence[torch.Tensor]) -> float:
        """Apply one update; returns the l2 norm of the parameter change."""
        new, self.state = adam_step(self.state, self.params, grads)
        sq = 0.0
        with torch.no_grad():
            for p, q in zip(self.params, new):
                sq += float(((q - p) ** 2).sum())
                p.copy_(q)
        return math.sqrt(sq)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, net: Mlp | MlpParams, *, seed: int = 0, step: int = 0, extra: dict | None = None) -> None:
    """Write ``magic | version | header length | JSON header | float64 LE weights``."""
    params = net.to_params() if isinstance(net, Mlp) else net
    header = {
        "layer_sizes": params.layer_sizes,
        "activation": params.hidden_activation,
        "seed": int(seed),
        "step": int(step),
    }
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = params.flat().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(hbytes)) + hbytes + body)


def load_checkpoint(path: str | Path) -> tuple[MlpParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a weight checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    flat = np.frombuffer(raw[12 + hlen :], dtype="<f8").astype(np.float64)
    sizes = header["layer_sizes"]
    weights, biases, pos = [], [], 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos : pos + n_in * n_out].reshape(n_out, n_in).copy())
        pos += n_in * n_out
        biases.append(flat[pos : pos + n_out].copy())
        pos += n_out
    if pos != flat.size:
        raise ValueError(f"{path}: weight payload does not match layer sizes")
    return MlpParams(sizes, weights, biases, header.get("activation", "relu")), header
