"""Truncated path signatures, path augmentations and signature distances.

Paths are treated as piecewise-linear interpolations of their samples. The
signature of each linear segment is the truncated tensor exponential of its
increment; segments are glued with Chen's identity. Everything is written in
torch (float64) so that penalties built from these distances can be
differentiated with respect to generator parameters.

Coefficient layout is level-major with lexicographic word order inside a
level, level 0 included: ``[1, x_1..x_d, x_11, x_12, ..., x_dd, ...]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

AUGMENTATIONS = ("time", "visibility", "lead-lag")

__all__ = [
    "AUGMENTATIONS",
    "AugmentedPath",
    "TruncatedSig",
    "augment",
    "augment_tensor",
    "signature",
    "signature_tensor",
    "siglength",
    "tensor_product",
    "expected_signature",
    "expected_signature_tensor",
    "sig_w1",
    "sig_mmd",
    "sig_mmd_tensor",
]


def siglength(dim: int, depth: int) -> int:
    """Number of coefficients of a depth-``depth`` signature, level 0 included."""
    return sum(dim**k for k in range(depth + 1))


def _level_slices(dim: int, depth: int) -> list[slice]:
    out, start = [], 0
    for k in range(depth + 1):
        out.append(slice(start, start + dim**k))
        start += dim**k
    return out


@dataclass(frozen=True)
class AugmentedPath:
    """A single path after augmentation.

    ``data_mask`` marks the channels that carry path data (as opposed to the
    time and visibility channels); lead-lag only duplicates data channels.
    """

    values: np.ndarray
    provenance: tuple[str, ...] = ()
    data_mask: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] < 2:
            raise ValueError("augmented path needs shape (num_points >= 2, dim)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("augmented path contains non-finite values")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def num_points(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class TruncatedSig:
    """Element of the truncated tensor algebra T^M(R^d)."""

    depth: int
    dim: int
    coeffs: np.ndarray
    chain: tuple[str, ...] = ()

    def __post_init__(self):
        if self.depth < 1 or self.dim < 1:
            raise ValueError("depth and dim must be >= 1")
        if self.coeffs.shape != (siglength(self.dim, self.depth),):
            raise ValueError(
                f"coeffs has shape {self.coeffs.shape}, expected "
                f"({siglength(self.dim, self.depth)},) for dim={self.dim}, depth={self.depth}"
            )
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("signature coefficients must be finite")

    def level(self, k: int) -> np.ndarray:
        """Level-k coefficients reshaped to a (dim,)*k tensor."""
        sl = _level_slices(self.dim, self.depth)[k]
        return self.coeffs[sl].reshape((self.dim,) * k)

    def to_json(self) -> str:
        header = {"depth": self.depth, "dim": self.dim, "chain": list(self.chain)}
        return json.dumps({"header": header, "coeffs": self.coeffs.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "TruncatedSig":
        obj = json.loads(text)
        h = obj["header"]
        return cls(h["depth"], h["dim"], np.asarray(obj["coeffs"], dtype=np.float64), tuple(h["chain"]))


# ---------------------------------------------------------------------------
# augmentations


def _check_chain(chain: Sequence[str]) -> tuple[str, ...]:
    chain = tuple(chain)
    for name in chain:
        if name not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {name!r}; expected one of {AUGMENTATIONS}")
    return chain


def augment_tensor(
    values: torch.Tensor,
    chain: Sequence[str],
    times: torch.Tensor | np.ndarray | None = None,
    data_mask: Sequence[bool] | None = None,
) -> tuple[torch.Tensor, tuple[bool, ...]]:
    """Augment a batch of paths ``values[batch, num_points, dim]``.

    Returns the augmented batch and the data-channel mask. ``times`` are the
    sampling times of the points; they are normalised to [0, 1]. When omitted
    a uniform grid is assumed.
    """
    chain = _check_chain(chain)
    if values.ndim != 3:
        raise ValueError("expected values of shape (batch, num_points, dim)")
    n = values.shape[1]
    if n < 2:
        raise ValueError("a path needs at least 2 points")
    mask = list(data_mask) if data_mask is not None else [True] * values.shape[2]
    x = values
    if times is None:
        tn = torch.linspace(0.0, 1.0, n, dtype=x.dtype)
    else:
        t = torch.as_tensor(times, dtype=x.dtype)
        if t.shape != (n,):
            raise ValueError("times must have one entry per point")
        tn = (t - t[0]) / (t[-1] - t[0])
    for name in chain:
        b, m, _ = x.shape
        if name == "time":
            if tn.shape[0] != m:
                # grid was reshaped by an earlier augmentation; follow the point index
                tn = torch.linspace(0.0, 1.0, m, dtype=x.dtype)
            x = torch.cat([x, tn.expand(b, m).unsqueeze(-1)], dim=-1)
            mask.append(False)
        elif name == "visibility":
            first = x[:, :1, :].clone()
            dm = torch.tensor(mask, dtype=torch.bool)
            first = torch.where(dm, torch.zeros_like(first), first)
            x = torch.cat([first, x], dim=1)
            ind = torch.ones(b, m + 1, 1, dtype=x.dtype)
            ind[:, 0, 0] = 0.0
            x = torch.cat([x, ind], dim=-1)
            mask.append(False)
            tn = torch.cat([tn[:1], tn])
        else:  # lead-lag
            idx = torch.arange(2 * m - 1)
            lead = x[:, (idx + 1) // 2, :]
            data_idx = [i for i, flag in enumerate(mask) if flag]
            lag = x[:, idx // 2, :][:, :, data_idx]
            x = torch.cat([lead, lag], dim=-1)
            mask = mask + [True] * len(data_idx)
            tn = tn[(idx + 1) // 2]
    return x, tuple(mask)


def augment(path, chain: Sequence[str] = (), times=None) -> AugmentedPath:
    """Augment a single path ``path[n, d]`` with the augmentations in ``chain``.

    ``time`` appends t_k/T; ``visibility`` prepends a basepoint at the origin
    and appends a 0/1 indicator; ``lead-lag`` interleaves the data channels with
    their lagged copies on a grid of 2n-1 points. Applied left to right.
    """
    arr = np.asarray(path, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError("path must be a (n, d) matrix")
    if arr.shape[0] < 2:
        raise ValueError("a path needs at least 2 points")
    chain = _check_chain(chain)
    out, mask = augment_tensor(torch.from_numpy(arr)[None], chain, times)
    return AugmentedPath(out[0].numpy().copy(), chain, mask)


# ---------------------------------------------------------------------------
# signatures


def _mul_exp(levels: list[torch.Tensor], inc: torch.Tensor, depth: int) -> list[torch.Tensor]:
    # Chen: levels ⊗ exp(inc), Horner form, levels are (batch, dim**k)
    b, d = inc.shape
    new = [levels[0]]
    for k in range(1, depth + 1):
        acc = levels[0] * (inc / k)
        for i in range(1, k):
            acc = acc + levels[i]
            acc = (acc.unsqueeze(-1) * (inc / (k - i)).unsqueeze(1)).reshape(b, -1)
        new.append(acc + levels[k])
    return new


def signature_tensor(values: torch.Tensor, depth: int) -> torch.Tensor:
    """Signatures of a batch of piecewise-linear paths ``values[batch, n, dim]``."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if not torch.isfinite(values).all():
        raise ValueError("path values must be finite")
    b, n, d = values.shape
    inc = values[:, 1:, :] - values[:, :-1, :]
    levels = [torch.ones(b, 1, dtype=values.dtype)]
    levels += [torch.zeros(b, d**k, dtype=values.dtype) for k in range(1, depth + 1)]
    for j in range(n - 1):
        levels = _mul_exp(levels, inc[:, j, :], depth)
    return torch.cat(levels, dim=-1)


def signature(path, depth: int) -> TruncatedSig:
    """Truncated signature of a (possibly augmented) path."""
    if isinstance(path, AugmentedPath):
        arr, chain = path.values, path.provenance
    else:
        arr, chain = np.asarray(path, dtype=np.float64), ()
        if arr.ndim == 1:
            arr = arr[:, None]
    if depth < 1:
        raise ValueError("depth must be >= 1")
    sig = signature_tensor(torch.from_numpy(np.ascontiguousarray(arr))[None], depth)[0]
    return TruncatedSig(depth, arr.shape[1], sig.numpy().copy(), chain)


def tensor_product(a: TruncatedSig, b: TruncatedSig) -> TruncatedSig:
    """Product in the truncated tensor algebra, truncated at the common depth."""
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    depth = min(a.depth, b.depth)
    d = a.dim
    out = []
    for k in range(depth + 1):
        acc = np.zeros(d**k)
        for i in range(k + 1):
            acc += np.outer(a.level(i).ravel(), b.level(k - i).ravel()).ravel()
        out.append(acc)
    return TruncatedSig(depth, d, np.concatenate(out), a.chain)


# ---------------------------------------------------------------------------
# expected signatures and distances


def _batch_values(batch, channels: Sequence[int] | None):
    # accepts a PathBatch-like object, a tensor or an array
    if isinstance(batch, (torch.Tensor, np.ndarray)):
        values, times = batch, None
    else:
        values, times = batch.values, batch.grid.times
    values = torch.as_tensor(values, dtype=torch.float64)
    if values.ndim == 2:
        values = values[None]
    if channels is not None:
        values = values[:, :, list(channels)]
    return values, times


def expected_signature_tensor(
    values: torch.Tensor, depth: int, chain: Sequence[str] = (), times=None
) -> torch.Tensor:
    if values.shape[0] == 0:
        raise ValueError("empty batch")
    aug, _ = augment_tensor(values, chain, times)
    return signature_tensor(aug, depth).mean(dim=0)


def expected_signature(batch, depth: int, chain: Sequence[str] = (), channels=None) -> TruncatedSig:
    """Mean of the per-path signatures of the augmented paths in ``batch``."""
    values, times = _batch_values(batch, channels)
    chain = _check_chain(chain)
    es = expected_signature_tensor(values, depth, chain, times).detach()
    dim = augment_tensor(values[:1], chain, times)[0].shape[-1]
    return TruncatedSig(depth, dim, es.numpy().copy(), chain)


def sig_mmd_tensor(
    values_p: torch.Tensor,
    values_q: torch.Tensor,
    depth: int,
    chain: Sequence[str] = (),
    times=None,
) -> torch.Tensor:
    """Squared l2 distance of expected signatures (level 0 excluded), differentiable."""
    if values_p.shape[0] == 0 or values_q.shape[0] == 0:
        raise ValueError("empty batch")
    if values_p.shape[2] != values_q.shape[2]:
        raise ValueError(
            f"dimension mismatch: {values_p.shape[2]} vs {values_q.shape[2]} channels"
        )
    ep = expected_signature_tensor(values_p, depth, chain, times)
    eq = expected_signature_tensor(values_q, depth, chain, times)
    diff = (ep - eq)[1:]
    return (diff * diff).sum()


def sig_mmd(batch_p, batch_q, depth: int = 2, chain: Sequence[str] = ("time", "lead-lag"), channels=None) -> float:
    """Signature MMD with the truncated signature as feature map; equals sig_w1**2."""
    vp, tp = _batch_values(batch_p, channels)
    vq, _ = _batch_values(batch_q, channels)
    with torch.no_grad():
        return float(sig_mmd_tensor(vp, vq, depth, chain, tp))


def sig_w1(batch_p, batch_q, depth: int = 2, chain: Sequence[str] = ("time", "lead-lag"), channels=None) -> float:
    """l2 norm of the difference of expected truncated signatures."""
    return math.sqrt(sig_mmd(batch_p, batch_q, depth, chain, channels))
