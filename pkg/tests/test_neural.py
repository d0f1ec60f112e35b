import itertools
import math
from collections import OrderedDict

import numpy as np
import pytest
import torch

from organqa.neural import (
    Adam,
    AdamState,
    CheckpointError,
    Conv3d,
    GraphError,
    adam_step,
    checkpoint_bytes,
    conv3d_forward,
    conv_transpose3d_forward,
    dense,
    finite_difference_check,
    gradients,
    instance_norm_forward,
    kl_divergence,
    load_checkpoint,
    parse_checkpoint,
    prelu,
    save_checkpoint,
    sigmoid,
    soft_dice_loss,
)

FD_TOL = 1e-4


def loop_conv(x, w, b, stride, padding):
    """Seven nested loops over (n, o, i, x, y, z, kernel) in float64."""
    n_b, c_in, nx, ny, nz = x.shape
    c_out, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    ox, oy, oz = ((d + 2 * padding - k) // stride + 1 for d in (nx, ny, nz))
    out = np.zeros((n_b, c_out, ox, oy, oz))
    for n in range(n_b):
        for o in range(c_out):
            for i in range(c_in):
                for px in range(ox):
                    for py in range(oy):
                        for pz in range(oz):
                            acc = 0.0
                            for a, bb, c in itertools.product(range(k), repeat=3):
                                acc += xp[n, i, px * stride + a, py * stride + bb, pz * stride + c] * w[o, i, a, bb, c]
                            out[n, o, px, py, pz] += acc
            out[n, o] += b[o]
    return out


def rand(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


# -- forward -------------------------------------------------------------------


def test_conv_identity_kernel():
    x = rand(1, 1, 5, 4, 6, dtype=torch.float32)
    w = torch.zeros(1, 1, 3, 3, 3)
    w[0, 0, 1, 1, 1] = 1
    assert torch.equal(conv3d_forward(x, w), x)


def test_conv_all_ones_interior():
    y = conv3d_forward(torch.ones(1, 1, 6, 6, 6), torch.ones(1, 1, 3, 3, 3))
    assert torch.all(y[0, 0, 1:-1, 1:-1, 1:-1] == 27)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_loop_oracle(stride):
    rng = np.random.default_rng(stride)
    x = rng.normal(size=(2, 2, 5, 4, 6)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    got = conv3d_forward(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b), stride, 1).numpy()
    np.testing.assert_allclose(got, loop_conv(x.astype(float), w.astype(float), b, stride, 1), atol=1e-5)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        conv3d_forward(torch.ones(1, 2, 4, 4, 4), torch.ones(1, 3, 3, 3, 3))


@pytest.mark.parametrize("dims", [(4, 4, 4), (6, 2, 8), (2, 2, 2)])
def test_shape_contracts(dims):
    x = torch.ones(1, 2, *dims)
    assert conv3d_forward(x, torch.ones(3, 2, 3, 3, 3)).shape[2:] == dims
    down = conv3d_forward(x, torch.ones(3, 2, 3, 3, 3), stride=2)
    assert down.shape[2:] == tuple(d // 2 for d in dims)
    up = conv_transpose3d_forward(down, torch.ones(3, 2, 3, 3, 3), stride=2)
    assert up.shape[2:] == dims


def test_transpose_conv_is_adjoint_of_conv():
    x = rand(1, 2, 6, 4, 4, seed=1)
    y = rand(1, 3, 3, 2, 2, seed=2)
    w = rand(3, 2, 3, 3, 3, seed=3)
    lhs = (conv3d_forward(x, w, stride=2) * y).sum()
    rhs = (x * conv_transpose3d_forward(y, w, stride=2)).sum()
    assert float(lhs) == pytest.approx(float(rhs), rel=1e-12)


def test_instance_norm_examples():
    x = torch.full((1, 2, 3, 3, 3), 4.0)
    assert torch.all(instance_norm_forward(x, torch.ones(2), torch.zeros(2)) == 0)
    r = rand(2, 3, 4, 5, 6, seed=4)
    beta = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    a = instance_norm_forward(r, torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    b = instance_norm_forward(r, torch.ones(3, dtype=torch.float64), beta)
    assert torch.allclose(b - beta.reshape(1, 3, 1, 1, 1), a, rtol=0, atol=1e-15)


def test_instance_norm_moments():
    r = rand(2, 3, 6, 5, 4, seed=5) * 3 + 7
    gamma = torch.tensor([0.5, 2.0, 1.5], dtype=torch.float64)
    beta = torch.tensor([1.0, -2.0, 0.0], dtype=torch.float64)
    y = instance_norm_forward(r, gamma, beta).numpy()
    for n, c in itertools.product(range(2), range(3)):
        v = y[n, c].ravel()
        assert v.mean() == pytest.approx(float(beta[c]), abs=1e-4)
        assert v.std() == pytest.approx(float(gamma[c]), abs=1e-4)


def test_soft_dice_saturation_and_empty():
    t = torch.zeros(1, 2, 4, 4, 4)
    t[0, 0, :2] = 1
    logits = torch.where(t > 0, 50.0, -50.0)
    assert float(soft_dice_loss(logits, t)) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValueError):
        soft_dice_loss(logits, t[:, :1])


def test_kl_matches_closed_form():
    mean = torch.tensor([[0.5, -1.0], [0.0, 0.0]], dtype=torch.float64)
    logvar = torch.tensor([[0.2, -0.3], [0.0, 0.0]], dtype=torch.float64)
    per = [sum(0.5 * (math.exp(lv) + m * m - 1 - lv) for m, lv in zip(mr, lr))
           for mr, lr in zip(mean.tolist(), logvar.tolist())]
    assert float(kl_divergence(mean, logvar)) == pytest.approx(sum(per) / 2, rel=1e-14)
    assert float(kl_divergence(torch.zeros(3, 4), torch.zeros(3, 4))) == 0.0


# -- gradients -----------------------------------------------------------------

SHAPES = [(1, 1, 3, 3, 3), (1, 2, 4, 3, 2), (2, 1, 2, 4, 3), (1, 3, 2, 2, 2), (2, 2, 3, 2, 4),
          (1, 1, 5, 2, 2), (1, 2, 2, 5, 3), (2, 1, 4, 4, 2), (1, 1, 2, 2, 6), (1, 2, 3, 3, 2)]


def away_from_zero(x):
    return torch.sign(x) * (x.abs() + 0.05)


@pytest.mark.parametrize("shape", SHAPES)
def test_fd_conv(shape):
    x = rand(*shape, seed=1)
    w = rand(2, shape[1], 3, 3, 3, seed=2)
    b = rand(2, seed=3)
    stride = 2 if min(shape[2:]) >= 4 else 1
    fn = lambda x, w, b: (conv3d_forward(x, w, b, stride, 1) ** 2).sum()
    assert finite_difference_check(fn, [x, w, b]) <= FD_TOL


@pytest.mark.parametrize("shape", SHAPES)
def test_fd_transpose_conv(shape):
    x = rand(*shape, seed=4)
    w = rand(shape[1], 2, 3, 3, 3, seed=5)
    b = rand(2, seed=6)
    fn = lambda x, w, b: (conv_transpose3d_forward(x, w, b, 2, 1) ** 2).sum()
    assert finite_difference_check(fn, [x, w, b]) <= FD_TOL


@pytest.mark.parametrize("shape", SHAPES)
def test_fd_instance_norm(shape):
    x = rand(*shape, seed=7)
    g = rand(shape[1], seed=8)
    b = rand(shape[1], seed=9)
    proj = rand(*shape, seed=10)
    fn = lambda x, g, b: (instance_norm_forward(x, g, b) * proj).sum()
    assert finite_difference_check(fn, [x, g, b]) <= FD_TOL


@pytest.mark.parametrize("shape", SHAPES)
def test_fd_prelu(shape):
    x = away_from_zero(rand(*shape, seed=11))
    slope = torch.tensor([0.25], dtype=torch.float64)
    proj = rand(*shape, seed=12)
    fn = lambda x, a: (prelu(x, a) * proj).sum()
    assert finite_difference_check(fn, [x, slope]) <= FD_TOL


@pytest.mark.parametrize("shape", SHAPES)
def test_fd_sigmoid(shape):
    proj = rand(*shape, seed=13)
    fn = lambda x: (sigmoid(x) * proj).sum()
    assert finite_difference_check(fn, [rand(*shape, seed=14)]) <= FD_TOL


@pytest.mark.parametrize("shape", SHAPES)
def test_fd_dense(shape):
    n, f = shape[0], int(np.prod(shape[1:]))
    x = rand(n, f, seed=15)
    w = rand(3, f, seed=16)
    b = rand(3, seed=17)
    fn = lambda x, w, b: (torch.tanh(dense(x, w, b)) ** 2).sum()
    assert finite_difference_check(fn, [x, w, b]) <= FD_TOL


@pytest.mark.parametrize("shape", SHAPES)
def test_fd_soft_dice(shape):
    t = (rand(*shape, seed=18) > 0).double()
    fn = lambda z: soft_dice_loss(z, t)
    assert finite_difference_check(fn, [rand(*shape, seed=19)]) <= FD_TOL


def test_fd_kl():
    fn = lambda m, lv: kl_divergence(m, lv)
    assert finite_difference_check(fn, [rand(3, 5, seed=20), rand(3, 5, seed=21) * 0.3]) <= FD_TOL


def test_chain_conv_then_prelu_composes():
    x = rand(1, 2, 4, 4, 4, seed=22)
    w = rand(3, 2, 3, 3, 3, seed=23)
    slope = torch.tensor([0.1], dtype=torch.float64)
    proj = rand(1, 3, 4, 4, 4, seed=24)
    fn = lambda x, w: (prelu(conv3d_forward(x, w), slope) * proj).sum()
    assert finite_difference_check(fn, [x, w]) <= FD_TOL
    # product rule by hand: dL/dy from the outer stage, then the conv input VJP
    # (a transposed convolution with the same weights)
    xr = x.clone().requires_grad_(True)
    y = conv3d_forward(xr, w).detach().requires_grad_(True)
    (g_y,) = gradients((prelu(y, slope) * proj).sum(), [y])
    composed = conv_transpose3d_forward(g_y, w, stride=1, padding=1, output_padding=0)
    (end_to_end,) = gradients(fn(xr, w), [xr])
    assert torch.allclose(composed, end_to_end, rtol=1e-12, atol=1e-12)


def test_constant_input_weight_gradient_closed_form():
    c = 1.5
    x = torch.full((1, 1, 5, 5, 5), c, dtype=torch.float64)
    w = rand(2, 1, 3, 3, 3, seed=25).requires_grad_(True)
    (gw,) = gradients(conv3d_forward(x, w, padding=0).sum(), [w])
    assert torch.allclose(gw, torch.full_like(gw, c * 27))  # 3^3 output positions


def test_gradients_without_forward_graph():
    with pytest.raises(GraphError):
        gradients(torch.tensor(1.0), [torch.zeros(1, requires_grad=True)])


def test_forward_is_deterministic():
    g1, g2 = torch.Generator().manual_seed(3), torch.Generator().manual_seed(3)
    a, b = Conv3d(2, 4, generator=g1), Conv3d(2, 4, generator=g2)
    x = rand(1, 2, 6, 6, 6, dtype=torch.float32)
    assert torch.equal(a(x), b(x))


# -- Adam ----------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = torch.tensor([1.0, -2.0])
    s = AdamState(torch.zeros(2), torch.zeros(2))
    adam_step([p], [torch.zeros(2)], [s])
    assert torch.equal(p, torch.tensor([1.0, -2.0])) and s.t == 1


def test_adam_scalar_recurrence():
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    p = torch.tensor([0.7], dtype=torch.float64)
    s = AdamState(torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
    ref, m, v = 0.7, 0.0, 0.0
    grads = [1.0, 1.0, -0.5, 2.0]
    for t, g in enumerate(grads, 1):
        adam_step([p], [torch.tensor([g], dtype=torch.float64)], [s], lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert float(p) == pytest.approx(ref, abs=1e-15)
    # first step with g=1 moves by lr (up to eps)
    q = torch.zeros(1, dtype=torch.float64)
    z = torch.zeros(1, dtype=torch.float64)
    adam_step([q], [torch.ones(1, dtype=torch.float64)], [AdamState(z.clone(), z.clone())])
    assert float(q) == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_minimizes_quadratic():
    p = torch.tensor([3.0, -2.0], requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(300):
        opt.step((p**2).sum())
    assert float(p.detach().abs().max()) < 0.05


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    state = OrderedDict(a=rand(2, 3, dtype=torch.float32), b=torch.arange(5.0), c=torch.tensor(2.5))
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path)
    back = load_checkpoint(path)
    assert list(back) == list(state)
    for k in state:
        assert torch.equal(back[k], state[k])


def test_checkpoint_rejects_corruption():
    raw = checkpoint_bytes(OrderedDict(w=torch.ones(4)))
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"XXXXX" + raw[5:])
    with pytest.raises(CheckpointError):
        parse_checkpoint(raw[:-1])
    with pytest.raises(CheckpointError):
        parse_checkpoint(raw + b"\0")
    with pytest.raises(CheckpointError):
        checkpoint_bytes(OrderedDict([("bad name", torch.ones(1))]))
