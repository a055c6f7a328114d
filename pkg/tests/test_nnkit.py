import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fdcheck import central_diff, rel_error
from robusthedge import nnkit
from robusthedge.nnkit import Adam, Mlp, MlpParams, OptState, adam_step, mlp_forward


def test_zero_net_gives_zero():
    p = MlpParams.zeros([3, 5, 2])
    np.testing.assert_array_equal(mlp_forward(p, np.array([1.0, -2.0, 3.0])), [0.0, 0.0])


def test_single_layer_identity_plus_bias():
    p = MlpParams([2, 2], [np.eye(2)], [np.array([0.5, -1.0])])
    np.testing.assert_allclose(mlp_forward(p, np.array([3.0, 4.0])), [3.5, 3.0])


def test_hand_computed_two_by_two():
    # h = relu(W1 x + b1) = relu([1*1 - 2*2 + 0.5, 3*1 + 1*2 - 1]) = relu([-2.5, 4]) = [0, 4]
    # y = W2 h + b2 = 2*0 - 0.5*4 + 0.25 = -1.75
    p = MlpParams(
        [2, 2, 1],
        [np.array([[1.0, -2.0], [3.0, 1.0]]), np.array([[2.0, -0.5]])],
        [np.array([0.5, -1.0]), np.array([0.25])],
    )
    assert mlp_forward(p, np.array([1.0, 2.0]))[0] == pytest.approx(-1.75, abs=0)
    net = Mlp.from_params(p)
    assert net(torch.tensor([[1.0, 2.0]], dtype=torch.float64)).item() == -1.75


def test_shape_mismatch():
    with pytest.raises(ValueError):
        mlp_forward(MlpParams.zeros([3, 1]), np.zeros(2))
    with pytest.raises(ValueError):
        Mlp([3, 1])(torch.zeros(1, 2, dtype=torch.float64))


def test_he_uniform_init_is_seeded():
    a, b, c = Mlp([2, 128, 1], seed=5), Mlp([2, 128, 1], seed=5), Mlp([2, 128, 1], seed=6)
    assert torch.equal(a.flat(), b.flat()) and not torch.equal(a.flat(), c.flat())
    w = a.layers[0].weight
    assert w.abs().max() <= np.sqrt(6 / 2) and a.layers[0].bias.abs().max() == 0


def test_grad_of_half_squared_norm():
    theta = torch.randn(7, dtype=torch.float64, requires_grad=True)
    (g,) = nnkit.grad(lambda: 0.5 * (theta**2).sum(), [theta])
    assert torch.allclose(g, theta.detach())


@given(seed=st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_grad_entropic_pnl_matches_finite_differences(seed):
    torch.manual_seed(seed)
    net = Mlp([2, 4, 1], seed=seed)
    x = torch.randn(8, 2, dtype=torch.float64)
    ds = torch.randn(8, dtype=torch.float64) * 0.1
    lam = 3.0

    def f():
        pnl = net(x)[:, 0] * ds - 0.05
        return torch.logsumexp(-lam * pnl, 0) / lam - np.log(8) / lam

    params = list(net.parameters())
    auto = [g.numpy() for g in nnkit.grad(f, params)]
    assert rel_error(auto, central_diff(f, params)) < 1e-4


def test_adam_zero_gradient_leaves_params():
    p = [torch.tensor([1.0, -2.0], dtype=torch.float64)]
    st_ = OptState.for_params(p, lr=0.1)
    new, st2 = adam_step(st_, p, [torch.zeros(2, dtype=torch.float64)])
    assert torch.equal(new[0], p[0]) and st2.step == 1


def test_adam_constant_gradient_direction():
    p = [torch.zeros(3, dtype=torch.float64)]
    g = [torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)]
    st_ = OptState.for_params(p, lr=0.01)
    for _ in range(50):
        p, st_ = adam_step(st_, p, g)
    assert torch.equal(torch.sign(p[0]), -torch.sign(g[0]))


def test_adam_quadratic_bowl():
    theta = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
    opt = Adam([theta], lr=1e-2)
    for _ in range(5000):
        opt.step(nnkit.grad(lambda: ((theta - 3.0) ** 2).sum(), [theta]))
    assert abs(theta.item() - 3.0) < 1e-3


def test_adam_shape_mismatch():
    p = [torch.zeros(2, dtype=torch.float64)]
    with pytest.raises(ValueError):
        adam_step(OptState.for_params(p), p, [torch.zeros(3, dtype=torch.float64)])


def test_training_is_deterministic():
    def run():
        net = Mlp([2, 16, 1], seed=1)
        opt = Adam(list(net.parameters()), lr=1e-2)
        x = torch.linspace(-1, 1, 64, dtype=torch.float64).reshape(32, 2)
        for _ in range(30):
            opt.step(nnkit.grad(lambda: (net(x) ** 2).mean(), list(net.parameters())))
        return net.flat()

    assert torch.equal(run(), run())


def test_checkpoint_roundtrip(tmp_path):
    net = Mlp([2, 8, 8, 1], seed=3)
    nnkit.save_checkpoint(tmp_path / "w.bin", net, seed=3, step=42)
    params, header = nnkit.load_checkpoint(tmp_path / "w.bin")
    assert header["layer_sizes"] == [2, 8, 8, 1] and header["step"] == 42 and header["activation"] == "relu"
    assert torch.equal(Mlp.from_params(params).flat(), net.flat())
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        nnkit.load_checkpoint(tmp_path / "bad.bin")
