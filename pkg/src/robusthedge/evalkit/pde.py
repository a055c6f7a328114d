"""Finite-difference benchmark for the first-order correction of the delta under volatility uncertainty.

Solves, backward from w(T, s) = 0,

    w_t + 0.5 sigma^2 s^2 w_ss + T (sigma s^2 Gamma_BS)^2 / 4 = 0

with Crank-Nicolson on a uniform s-grid and w = 0 at both ends. The source
concentrates like tau^{-1/2} around the strike as tau = T - t -> 0, so it is
integrated exactly over each space cell (closed form in log-space) and by
Gauss-Legendre in sqrt(tau) over each time step. Pointwise sampling would drop
the spatial order to about one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import erf

from ..hedgekit import bs_delta, bs_gamma


@dataclass
class PdeGrid:
    s: np.ndarray
    t: np.ndarray
    w: np.ndarray  # [len(t), len(s)]
    delta_u: np.ndarray  # central differences in s
    sigma: float
    strike: float
    maturity: float

    def at(self, t: float, field: str = "w") -> np.ndarray:
        """Values at time ``t`` by linear interpolation between stored time levels."""
        arr = getattr(self, field)
        j = int(np.searchsorted(self.t, t))
        if j < len(self.t) and math.isclose(self.t[j], t, abs_tol=1e-14):
            return arr[j].copy()
        j = min(max(j, 1), len(self.t) - 1)
        a = (t - self.t[j - 1]) / (self.t[j] - self.t[j - 1])
        return (1 - a) * arr[j - 1] + a * arr[j]

    def delta_gamma(self, t: float, s, gamma: float) -> np.ndarray:
        """delta_BS + gamma * delta_U at (t, s)."""
        du = np.interp(s, self.s, self.at(t, "delta_u"))
        return bs_delta(t, s, self.sigma, self.strike, self.maturity) + gamma * du


def _cell_source(tau: float, edges: np.ndarray, sigma: float, strike: float, maturity: float) -> np.ndarray:
    """Integral over each s-cell of T s^2 exp(-d1^2) / (8 pi tau) at time-to-maturity tau."""
    v = sigma * math.sqrt(tau)
    m = math.log(strike) - 0.5 * sigma**2 * tau
    x = np.log(edges)
    # int e^{3x} e^{-(x-m)^2/v^2} dx = e^{3m + 9v^2/4} (v sqrt(pi)/2) erf((x - m - 3v^2/2)/v)
    c = math.exp(3 * m + 2.25 * v * v) * v * math.sqrt(math.pi) / 2
    anti = c * erf((x - m - 1.5 * v * v) / v)
    return maturity * np.diff(anti) / (8 * math.pi * tau)


def _step_source(tau_a: float, tau_b: float, edges, sigma, strike, maturity, order: int = 6) -> np.ndarray:
    # Gauss-Legendre in u = sqrt(tau), which removes the tau^{-1/2} endpoint behaviour
    nodes, weights = np.polynomial.legendre.leggauss(order)
    ua, ub = math.sqrt(tau_a), math.sqrt(tau_b)
    out = 0.0
    for xg, wg in zip(nodes, weights):
        u = 0.5 * (ub - ua) * xg + 0.5 * (ub + ua)
        out = out + wg * 0.5 * (ub - ua) * 2 * u * _cell_source(u * u, edges, sigma, strike, maturity)
    return out


def hms_pde_solve(
    sigma: float = 0.2,
    maturity: float = 90 / 255,
    strike: float = 1.0,
    s0: float = 1.0,
    bounds: tuple[float, float] = (0.5, 2.0),
    n_space: int = 400,
    n_time: int = 400,
    source_scale: float = 1.0,
) -> PdeGrid:
    """Crank-Nicolson march in tau on a grid graded toward maturity; ``source_scale`` = 0 switches the source off."""
    lo, hi = bounds[0] * s0, bounds[1] * s0
    if lo > 0.5 * s0 or hi < 2.0 * s0:
        raise ValueError("grid must bracket [0.5, 2.0] * s0")
    if n_space < 200:
        raise ValueError("use at least 200 space nodes")
    s = np.linspace(lo, hi, n_space + 1)
    h = s[1] - s[0]
    inner = s[1:-1]
    edges = np.concatenate([[inner[0] - h / 2], inner + h / 2])
    # graded in tau: small steps where the source is steep
    taus = maturity * (np.arange(n_time + 1) / n_time) ** 2
    a = 0.5 * sigma**2 * inner**2 / h**2
    n = inner.size
    w = np.zeros(n)
    ws = [np.zeros(s.size)]
    for j in range(n_time):
        dt = taus[j + 1] - taus[j]
        src = source_scale * _step_source(max(taus[j], 0.0), taus[j + 1], edges, sigma, strike, maturity) / h
        # L w = a (w_{i-1} - 2 w_i + w_{i+1})
        lw = -2 * a * w
        lw[1:] += a[1:] * w[:-1]
        lw[:-1] += a[:-1] * w[1:]
        rhs = w + 0.5 * dt * lw + src
        ab = np.zeros((3, n))
        ab[0, 1:] = -0.5 * dt * a[:-1]
        ab[1] = 1 + dt * a
        ab[2, :-1] = -0.5 * dt * a[1:]
        w = solve_banded((1, 1), ab, rhs)
        if not np.all(np.isfinite(w)):
            raise FloatingPointError(f"PDE march produced non-finite values at step {j + 1}")
        ws.append(np.concatenate([[0.0], w, [0.0]]))
    t = (maturity - taus)[::-1]
    wgrid = np.array(ws[::-1])
    du = np.gradient(wgrid, s, axis=1, edge_order=2)
    return PdeGrid(s, t, wgrid, du, sigma, strike, maturity)


def observed_order(sigma: float = 0.2, maturity: float = 90 / 255, n_space=(200, 400, 800), n_time: int = 400, t_eval: float | None = None, window=(0.8, 1.2)) -> float:
    """Richardson estimate of the spatial order from three nested grids (max norm on shared nodes)."""
    t_eval = maturity / 2 if t_eval is None else t_eval
    sols = []
    for n in n_space:
        g = hms_pde_solve(sigma, maturity, n_space=n, n_time=n_time)
        sols.append((g.s, g.at(t_eval)))
    base = sols[0][0]
    mask = (base >= window[0]) & (base <= window[1])
    coarse = sols[0][1][mask]
    mid = np.interp(base[mask], *sols[1])
    fine = np.interp(base[mask], *sols[2])
    e1 = np.max(np.abs(coarse - mid))
    e2 = np.max(np.abs(mid - fine))
    return float(math.log2(e1 / e2))


@dataclass
class HmsComparison:
    s: np.ndarray
    diff: np.ndarray
    scaled_delta_u: np.ndarray
    correlation: float

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["s", "strategy_difference", "scaled_delta_u"])
            for row in zip(self.s, self.diff, self.scaled_delta_u):
                w.writerow([repr(float(x)) for x in row])


def compare_to_hms(robust, deep, pde: PdeGrid, gamma: float, t_eval: float | None = None, window=(0.8, 1.2)) -> HmsComparison:
    """Tabulate phi_robust - phi_deep against gamma * delta_U at ``t_eval`` on the PDE nodes in ``window``."""
    t_eval = pde.maturity / 2 if t_eval is None else t_eval
    mask = (pde.s >= window[0]) & (pde.s <= window[1])
    s = pde.s[mask]
    if s.size < 3:
        raise ValueError("comparison window holds fewer than three grid nodes")
    t_norm = t_eval / pde.maturity
    diff = robust.evaluate(t_norm, asset=s)[:, 0] - deep.evaluate(t_norm, asset=s)[:, 0]
    du = gamma * pde.at(t_eval, "delta_u")[mask]
    if np.std(diff) == 0 or np.std(du) == 0:
        corr = float("nan")
    else:
        corr = float(np.corrcoef(diff, du)[0, 1])
    return HmsComparison(s, diff, du, corr)
