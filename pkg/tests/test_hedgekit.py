import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fdcheck import central_diff, rel_error
from robusthedge import genkit, hedgekit
from robusthedge.genkit import BSParams, TimeGrid, sample_noise
from robusthedge.hedgekit import (
    OCE,
    DeltaStrategy,
    Entropic,
    ExpUtility,
    FlatSchedule,
    PositionTable,
    ZeroStrategy,
    payoff_call,
    risk,
    trading_gains,
)

GRID = TimeGrid.uniform(18, 5 / 255)
T = GRID.maturity


def const_batch(values):
    v = torch.tensor(values, dtype=torch.float64).reshape(len(values), -1, 1)
    grid = TimeGrid.uniform(v.shape[1] - 1, 0.1)
    return genkit.PathBatch(v, grid, ("asset",), (True,))


class TestPayoffAndGains:
    def test_call(self):
        b = const_batch([[1.0, 1.2], [1.0, 0.8]])
        assert payoff_call(b, 1.0).tolist() == pytest.approx([0.2, 0.0])

    def test_missing_asset(self):
        b = genkit.PathBatch(torch.ones(2, 3, 1, dtype=torch.float64), TimeGrid.uniform(2, 0.1), ("variance",), (False,))
        with pytest.raises(ValueError):
            payoff_call(b)

    def test_bs_price_oracle(self):
        paths = genkit.generate_bs(BSParams(0.2), sample_noise(3, 2**14, GRID))
        c = payoff_call(paths, 1.0)
        price = hedgekit.bs_call_price(0.0, 1.0, 0.2, 1.0, T)
        assert abs(c.mean().item() - price) < 3 * c.std().item() / math.sqrt(2**14)

    def test_unit_holding_telescopes(self):
        paths = genkit.generate_bs(BSParams(0.2), sample_noise(1, 64, GRID))
        ones = PositionTable(torch.ones(64, 18, 1, dtype=torch.float64))
        s = paths.channel("asset")
        assert torch.allclose(trading_gains(ones, paths), s[:, -1] - s[:, 0], atol=1e-14)
        assert torch.all(trading_gains(ZeroStrategy(), paths) == 0)

    def test_delta_hedging_error_shrinks_with_steps(self):
        price = hedgekit.bs_call_price(0.0, 1.0, 0.2, 1.0, T)
        errs = []
        for n in (9, 36, 144):
            grid = TimeGrid.uniform(n, T / n)
            paths = genkit.generate_bs(BSParams(0.2), sample_noise(2, 4096, grid))
            pnl = trading_gains(DeltaStrategy(0.2), paths) - payoff_call(paths) + price
            errs.append(pnl.var().item())
        assert errs[0] > errs[1] > errs[2]

    def test_adaptedness(self):
        strat = hedgekit.new_strategy(("time", "asset"), 1, (8,), seed=0)
        paths = genkit.generate_bs(BSParams(0.2), sample_noise(4, 16, GRID))
        k = 7
        perm = paths.values.clone()
        perm[:, k + 1 :] = perm[torch.randperm(16), k + 1 :]
        other = genkit.PathBatch(perm, GRID, paths.roles, paths.tradable)
        with torch.no_grad():
            a, b = strat.positions(paths), strat.positions(other)
        assert torch.equal(a[:, : k + 1], b[:, : k + 1])

    def test_feature_mismatch(self):
        strat = hedgekit.new_strategy(("time", "variance"), 1, (4,))
        with pytest.raises(ValueError):
            trading_gains(strat, genkit.generate_bs(BSParams(0.2), sample_noise(0, 4, GRID)))


class TestRisk:
    @pytest.mark.parametrize("spec", [Entropic(3.0), OCE.linear(), OCE.cvar(0.9), OCE.entropic(2.0)])
    def test_constant_sample(self, spec):
        assert risk(spec, torch.full((10,), 0.7, dtype=torch.float64)).item() == pytest.approx(-0.7, abs=1e-9)

    def test_oce_linear_is_mean_loss(self):
        x = torch.randn(50, dtype=torch.float64)
        assert risk(OCE.linear(), x).item() == pytest.approx(-x.mean().item(), abs=1e-12)

    def test_entropic_closed_form(self):
        v = risk(Entropic(1.0), torch.tensor([-1.0, 1.0], dtype=torch.float64)).item()
        assert v == pytest.approx(math.log(math.cosh(1.0)), abs=1e-12)
        assert v == pytest.approx(0.433781, abs=1e-6)

    def test_entropic_matches_oce_form(self):
        x = torch.randn(200, dtype=torch.float64) * 0.1
        a = risk(Entropic(5.0), x).item()
        b = risk(OCE.entropic(5.0), x).item()
        assert a == pytest.approx(b, abs=1e-10)

    def test_cvar_matches_tail_mean(self):
        x = torch.arange(100, dtype=torch.float64)
        # losses -x; the worst 10% are -0..-9, mean -4.5
        assert risk(OCE.cvar(0.9), x).item() == pytest.approx(-4.5, abs=1e-12)

    def test_exp_utility_orientation(self):
        x = torch.randn(100, dtype=torch.float64) * 0.01
        u = ExpUtility(130.0)
        assert hedgekit.loss(u, x).item() == -risk(u, x).item()
        # same minimizer as the entropic risk: monotone transform of E exp(-lam X)
        e = risk(Entropic(130.0), x).item()
        assert risk(u, x).item() == pytest.approx((1 - math.exp(130 * e)) / 130, rel=1e-10)

    @given(seed=st.integers(0, 10_000), c=st.floats(-2, 2))
    @settings(max_examples=40, deadline=None)
    def test_cash_invariance(self, seed, c):
        x = torch.from_numpy(np.random.default_rng(seed).standard_normal(64) * 0.3)
        for spec in (Entropic(4.0), OCE.cvar(0.8), OCE.piecewise_linear([0.0, 0.5], [0.2, 1.0, 3.0]), OCE.entropic(2.0)):
            a, b = risk(spec, x + c).item(), risk(spec, x).item() - c
            assert a == pytest.approx(b, abs=1e-10)

    def test_overflow_and_empty(self):
        with pytest.raises(ValueError):
            risk(Entropic(1.0), torch.zeros(0, dtype=torch.float64))
        with pytest.raises(FloatingPointError):
            risk(ExpUtility(1.0), torch.tensor([-1e6], dtype=torch.float64))

    def test_weighted_entropic(self):
        x = torch.tensor([0.0, 1.0, 2.0], dtype=torch.float64)
        w = torch.tensor([1.0, 2.0, 0.0], dtype=torch.float64)
        dup = torch.tensor([0.0, 1.0, 1.0], dtype=torch.float64)
        assert risk(Entropic(2.0), x, w).item() == pytest.approx(risk(Entropic(2.0), dup).item(), abs=1e-14)

    def test_entropic_gradient_fd(self):
        x = torch.randn(16, dtype=torch.float64, requires_grad=True)
        f = lambda: risk(Entropic(3.0), x)  # noqa: E731
        auto = torch.autograd.grad(f(), [x])[0].numpy()
        assert rel_error([auto], central_diff(f, [x])) < 1e-6

    def test_oce_gradient_fd(self):
        x = (torch.randn(16, dtype=torch.float64) * 0.2).requires_grad_()
        f = lambda: risk(OCE.entropic(2.0), x)  # noqa: E731
        auto = torch.autograd.grad(f(), [x])[0].numpy()
        assert rel_error([auto], central_diff(f, [x], h=1e-5)) < 1e-4


def test_zero_vol_smoke():
    # deterministic market: no trading helps, loss equals risk of the constant payoff
    run = hedgekit.train_deep_hedge(BSParams(0.0, 1.0), Entropic(10.0), 0.9, FlatSchedule(5, 64), 0, GRID, hidden=(8,))
    assert run.final_objective == pytest.approx(-(0.0 - 0.1), abs=1e-12)


def test_training_reduces_loss_and_is_deterministic(tmp_path):
    sched = FlatSchedule(60, 512, lr=3e-3)
    a = hedgekit.train_deep_hedge(BSParams(0.2), Entropic(130.0), 1.0, sched, 3, GRID, hidden=(16, 16))
    b = hedgekit.train_deep_hedge(BSParams(0.2), Entropic(130.0), 1.0, sched, 3, GRID, hidden=(16, 16))
    assert torch.equal(a.strategy.net.flat(), b.strategy.net.flat())
    assert np.mean(a.history[-10:]) < np.mean(a.history[:10])
    a.save(tmp_path)
    assert (tmp_path / "hedge.ckpt").exists() and '"final_objective"' in (tmp_path / "hedge.json").read_text()


def test_escalating_schedule_plan():
    s = hedgekit.Schedule(scale=1 / 64)
    plan = s.plan()
    assert len(plan) == 20 and plan[0] == (1024, 256) and plan[-1] == (1024, 1024)


def test_zero_claim_price_is_zero():
    p = hedgekit.indifference_price(
        BSParams(0.2), Entropic(130.0), None, FlatSchedule(5, 128), 0, GRID,
        claim=lambda b: torch.zeros(b.batch, dtype=torch.float64), hidden=(8,), eval_paths=1024,
    )
    assert p == 0.0


def test_trade_restriction():
    grid = TimeGrid.uniform(18, 5 / 255)
    paths = genkit.generate_heston(genkit.HestonParams(1.0, 0.04, 0.2, 0.8), sample_noise(0, 32, grid, 2))
    strat = hedgekit.new_strategy(("time", "asset"), 1, (4,), trade=("asset",))
    with torch.no_grad():
        pos = strat.positions(paths)[:, :, 0]
        s = paths.channel("asset")
        expect = (pos * (s[:, 1:] - s[:, :-1])).sum(dim=1)
        assert torch.allclose(trading_gains(strat, paths), expect, rtol=0, atol=1e-15)
    bad = hedgekit.new_strategy(("time", "asset"), 1, (4,), trade=("variance",))
    with pytest.raises(ValueError):
        trading_gains(bad, paths)
