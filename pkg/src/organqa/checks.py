"""Finite-difference gradient report over every primitive and the desk networks."""

from __future__ import annotations

from collections import OrderedDict

import torch

from .nets import NetKind, NetworkSpec, build_unet, build_vae, vae_loss
from .neural import (
    conv3d_forward,
    conv_transpose3d_forward,
    dense,
    finite_difference_check,
    instance_norm_forward,
    kl_divergence,
    prelu,
    sigmoid,
    soft_dice_loss,
)

GRAD_TOL = 1e-4
DESK_UNET = NetworkSpec(NetKind.DAE, 7, 7, (8, 16, 32), (2, 2), num_res_units=2)
DESK_VAE = NetworkSpec(NetKind.VAE_MULTI, 7, 7, (8, 16, 32), (2, 2, 1), latent_size=100)


def _network_check(model, forward, seed: int, h: float) -> float:
    names = [n for n, _ in model.named_parameters()]
    params = [p.detach().clone() for p in model.parameters()]

    def loss(*ps):
        return forward(lambda x, **kw: torch.func.functional_call(model, dict(zip(names, ps)), (x,), kw))

    return finite_difference_check(loss, params, h=h, max_entries=3, seed=seed, scale="global")


def gradient_report(seed: int = 0) -> "OrderedDict[str, float]":
    """Max relative error (autograd vs central differences, float64) per check.

    Primitives use ``h = 1e-3``. For the whole networks a 1e-3 step moves
    enough pre-activations across the PReLU kink to spoil central differences,
    so the U-Net is checked twice: with unit PReLU slopes at ``h = 1e-3`` and as
    initialized at ``h = 1e-6``. The VAE uses ``h = 1e-6`` with fixed latent
    noise. Network errors are relative to the largest derivative over all
    parameters (see ``finite_difference_check``).
    """
    g = torch.Generator().manual_seed(seed)

    def r(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    x, w, b = r(2, 2, 4, 4, 4), r(3, 2, 3, 3, 3), r(3)
    proj = r(2, 2, 4, 4, 4)
    t = (torch.rand(2, 2, 4, 4, 4, generator=g) < 0.4).double()
    pos = r(2, 2, 4, 4, 4)
    pos = torch.sign(pos) * (pos.abs() + 0.05)  # keep PReLU inputs off the kink
    out = OrderedDict()
    out["conv3d"] = finite_difference_check(lambda x, w, b: (conv3d_forward(x, w, b, 2, 1) ** 2).sum(), [x, w, b])
    wt = r(2, 3, 3, 3, 3)
    out["conv_transpose3d"] = finite_difference_check(
        lambda x, w, b: (conv_transpose3d_forward(x, w, b, 2, 1) ** 2).sum(), [x, wt, b])
    out["instance_norm"] = finite_difference_check(
        lambda x, gm, bt: (instance_norm_forward(x, gm, bt) * proj).sum(), [x, r(2), r(2)])
    out["prelu"] = finite_difference_check(lambda x, a: (prelu(x, a) * proj).sum(),
                                           [pos, torch.tensor([0.25], dtype=torch.float64)])
    out["sigmoid"] = finite_difference_check(lambda x: (sigmoid(x) * proj).sum(), [x])
    out["dense"] = finite_difference_check(lambda x, w, b: (torch.tanh(dense(x, w, b)) ** 2).sum(),
                                           [r(3, 10), r(4, 10), r(4)])
    out["soft_dice"] = finite_difference_check(lambda z: soft_dice_loss(z, t), [x])
    out["kl_divergence"] = finite_difference_check(kl_divergence, [r(3, 5), 0.3 * r(3, 5)])
    out["chain_conv_prelu"] = finite_difference_check(
        lambda x, w: (prelu(conv3d_forward(x, w), torch.tensor([0.1], dtype=torch.float64)) ** 2).sum(),
        [x, r(2, 2, 3, 3, 3)])

    xin = torch.rand(1, 7, 8, 8, 8, generator=g, dtype=torch.float64)
    target = (torch.rand(1, 7, 8, 8, 8, generator=g) < 0.3).double()
    unet = build_unet(DESK_UNET, (8, 8, 8), seed=seed).double()
    out["unet_desk"] = _network_check(unet, lambda f: soft_dice_loss(f(xin), target), seed, 1e-6)
    for name, p in unet.named_parameters():
        if name.endswith("slope"):
            p.data.fill_(1.0)
    out["unet_desk_unit_slopes"] = _network_check(unet, lambda f: soft_dice_loss(f(xin), target), seed, 1e-3)

    vae = build_vae(DESK_VAE, (8, 8, 8), seed=seed).double()
    eps = torch.randn(1, DESK_VAE.latent_size, generator=g, dtype=torch.float64)

    def vae_forward(f):
        logits, mean, logvar = f(xin, noise=eps)
        return vae_loss(logits, target, mean, logvar, DESK_VAE.kl_weight)

    out["vae_desk"] = _network_check(vae, vae_forward, seed, 1e-6)
    return out
