"""Scenario parameter sets: inverse-calibrated BS vols and differenced Heston parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import genkit
from ..genkit import BSParams, HestonParams

STREAM_SCENARIOS = 5 << 20


@dataclass
class ScenarioSet:
    params: list
    provenance: str
    dropped: int = 0
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in ("bs-inverse", "heston-differenced", "file"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        for p in self.params:
            p.validate()

    @property
    def M(self) -> int:
        return len(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def to_csv(self, path: str | Path) -> None:
        genkit.write_scenario_csv(path, self.params)

    @classmethod
    def from_csv(cls, path: str | Path) -> "ScenarioSet":
        return cls(genkit.read_scenario_csv(path), "file")


def inverse_calibrate_bs(sigma_target: float, z) -> float:
    """Volatility that makes the standardized draws ``z`` show realized vol ``sigma_target``."""
    z = np.asarray(z, dtype=np.float64)
    if z.size < 2:
        raise ValueError("need at least two draws")
    sd = np.std(z, ddof=1)
    if sd == 0:
        raise ValueError("draws have zero sample std")
    return float(sigma_target / sd)


def build_bs_scenarios(sigma_ref: float, n_obs: int = 45, M: int = 200, seed: int = 0, s0: float = 1.0) -> ScenarioSet:
    """M volatilities sigma_ref / std(z_m), each z_m a fresh draw of ``n_obs`` standard normals."""
    if n_obs < 2 or M < 1:
        raise ValueError("need n_obs >= 2 and M >= 1")
    z = genkit.substream(seed, STREAM_SCENARIOS).standard_normal((M, n_obs))
    sig = [inverse_calibrate_bs(sigma_ref, row) for row in z]
    return ScenarioSet([BSParams(s, s0) for s in sig], "bs-inverse", notes={"n_obs": n_obs, "sigma_ref": sigma_ref})


def _clamp_heston(vec: np.ndarray, s0: float) -> HestonParams | None:
    kappa, beta, sigma, rho = vec
    rho = min(rho, 1.0)
    sigma = abs(sigma)
    if kappa <= 0 or beta <= 0 or sigma == 0 or rho < -1:
        return None
    return HestonParams(float(kappa), float(beta), float(sigma), float(rho), s0)


def build_heston_scenarios(xi_ref: HestonParams, daily, lags: int = 10) -> ScenarioSet:
    """Shift the reference by observed l-day parameter changes, l = 1..lags.

    ``daily`` is a scenario CSV path or a list of HestonParams ordered by day.
    For every day m with m > lags and every l <= lags the scenario is
    xi_ref + (xi_m - xi_{m-l}). Correlations above 1 are capped at 1 and
    vol-of-vol is replaced by its absolute value; rows still outside the
    parameter domain are dropped and counted.
    """
    rows = genkit.read_scenario_csv(daily, validate=False) if isinstance(daily, (str, Path)) else list(daily)
    if not rows or not all(isinstance(r, HestonParams) for r in rows):
        raise ValueError("daily parameter file must contain Heston rows")
    if not 1 <= lags <= 10:
        raise ValueError("lags must lie in 1..10")
    if len(rows) < lags + 1:
        raise ValueError(f"need at least {lags + 1} daily rows for {lags} lags, got {len(rows)}")
    vecs = np.array([r.vector() for r in rows])
    ref = xi_ref.vector()
    out, dropped, lag_of = [], 0, []
    for m in range(lags, len(rows)):
        for l in range(1, lags + 1):
            p = _clamp_heston(ref + (vecs[m] - vecs[m - l]), float(xi_ref.s0))
            if p is None:
                dropped += 1
            else:
                out.append(p)
                lag_of.append(l)
    return ScenarioSet(out, "heston-differenced", dropped, notes={"lags": lag_of})


def ar1_daily_params(xi_ref: HestonParams, days: int, seed: int = 0, phi: float = 0.9, scale=(0.05, 0.002, 0.01, 0.03)) -> list[HestonParams]:
    """Synthetic daily Heston calibrations: an AR(1) walk around the reference (for tests and demos)."""
    rng = genkit.substream(seed, STREAM_SCENARIOS + 1)
    ref = xi_ref.vector()
    x = np.zeros(4)
    out = []
    for _ in range(days):
        x = phi * x + rng.standard_normal(4) * np.asarray(scale)
        k, b, s, r = ref + x
        out.append(HestonParams(float(k), float(b), float(s), float(max(min(r, 1.0), -1.0)), float(xi_ref.s0)))
    return out


def parameter_distance(params, reference) -> float:
    """Euclidean distance between parameter vectors."""
    return float(math.dist(params.vector(), reference.vector()))
