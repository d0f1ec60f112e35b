"""3D network primitives on torch tensors, Adam, gradient checking and checkpoints.

Reverse-mode differentiation is delegated to torch autograd. Every primitive is
a plain function so it can be checked against central finite differences in
float64 (see ``finite_difference_check``).
"""

from __future__ import annotations

import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

KERNEL = 3
NORM_EPS = 1e-5
DICE_SMOOTH = 1e-5


class GraphError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# primitives


def conv3d_forward(x, weight, bias=None, stride: int = 1, padding: int = 1):
    """Cross-correlation; output size ``floor((n + 2*padding - k) / stride) + 1``."""
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    return F.conv3d(x, weight, bias, stride=stride, padding=padding)


def conv_transpose3d_forward(x, weight, bias=None, stride: int = 1, padding: int = 1,
                             output_padding: Optional[int] = None):
    """Transpose of ``conv3d_forward``.

    ``output_padding`` defaults to ``stride - 1``, which makes stride 2 exactly
    double even input sizes when kernel 3 and padding 1 are used.
    """
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {weight.shape[0]}")
    if output_padding is None:
        output_padding = stride - 1
    return F.conv_transpose3d(x, weight, bias, stride=stride, padding=padding, output_padding=output_padding)


def instance_norm_forward(x, gamma=None, beta=None, eps: float = NORM_EPS):
    """Per-sample, per-channel standardization over the spatial axes, then affine."""
    dims = tuple(range(2, x.dim()))
    mean = x.mean(dim=dims, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=dims, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    shape = (1, -1) + (1,) * len(dims)
    if gamma is not None:
        y = y * gamma.reshape(shape)
    if beta is not None:
        y = y + beta.reshape(shape)
    return y


def prelu(x, slope):
    return torch.where(x > 0, x, slope * x)


def sigmoid(x):
    return torch.sigmoid(x)


def dense(x, weight, bias=None):
    y = x @ weight.t()
    return y if bias is None else y + bias


def soft_dice_loss(logits, target, smooth: float = DICE_SMOOTH):
    """Mean over batch and channels of ``1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)``."""
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
    p = torch.sigmoid(logits)
    dims = tuple(range(2, logits.dim()))
    inter = (p * target).sum(dim=dims)
    denom = p.sum(dim=dims) + target.sum(dim=dims)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def kl_divergence(mean, logvar):
    """Batch mean of ``KL(N(mean, exp(logvar)) || N(0, I))``."""
    kl = 0.5 * (torch.exp(logvar) + mean**2 - 1.0 - logvar).sum(dim=tuple(range(1, mean.dim())))
    return kl.mean()


def gradients(loss, tensors: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` with respect to ``tensors``."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise GraphError("loss has no recorded forward graph; run the forward pass first")
    grads = torch.autograd.grad(loss, list(tensors), allow_unused=True)
    return [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]


# ---------------------------------------------------------------------------
# layers


def _uniform(shape, bound, generator, dtype=torch.float32, device=None):
    if device is not None and torch.device(device).type == "meta":
        return torch.empty(shape, dtype=dtype, device=device)
    t = torch.rand(shape, generator=generator, dtype=torch.float64) * 2.0 - 1.0
    return (t * bound).to(dtype)


class Conv3d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel=KERNEL, stride=1, generator=None, device=None):
        super().__init__()
        fan_in = in_ch * kernel**3
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = nn.Parameter(_uniform((out_ch, in_ch, kernel, kernel, kernel), bound, generator, device=device))
        self.bias = nn.Parameter(_uniform((out_ch,), bound, generator, device=device))
        self.stride = stride
        self.padding = kernel // 2

    def forward(self, x):
        return conv3d_forward(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(nn.Module):
    def __init__(self, in_ch, out_ch, stride=2, generator=None, device=None):
        super().__init__()
        bound = 1.0 / math.sqrt(out_ch * KERNEL**3)
        self.weight = nn.Parameter(_uniform((in_ch, out_ch, KERNEL, KERNEL, KERNEL), bound, generator, device=device))
        self.bias = nn.Parameter(_uniform((out_ch,), bound, generator, device=device))
        self.stride = stride

    def forward(self, x):
        return conv_transpose3d_forward(x, self.weight, self.bias, self.stride, 1)


class InstanceNorm3d(nn.Module):
    def __init__(self, channels, device=None):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(channels, device=device))
        self.beta = nn.Parameter(torch.zeros(channels, device=device))

    def forward(self, x):
        return instance_norm_forward(x, self.gamma, self.beta)


class PReLU(nn.Module):
    def __init__(self, init=0.25, device=None):
        super().__init__()
        self.slope = nn.Parameter(torch.full((1,), float(init), device=device))

    def forward(self, x):
        return prelu(x, self.slope)


class Dense(nn.Module):
    def __init__(self, in_features, out_features, generator=None, device=None):
        super().__init__()
        bound = 1.0 / math.sqrt(in_features)
        self.weight = nn.Parameter(_uniform((out_features, in_features), bound, generator, device=device))
        self.bias = nn.Parameter(_uniform((out_features,), bound, generator, device=device))

    def forward(self, x):
        return dense(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    t: int = 0


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], states: Sequence[AdamState],
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    with torch.no_grad():
        for p, g, s in zip(params, grads, states):
            if p.shape != g.shape or s.m.shape != p.shape:
                raise ValueError(f"shape mismatch for parameter of shape {tuple(p.shape)}")
            s.t += 1
            s.m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            s.v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            m_hat = s.m / (1.0 - beta1**s.t)
            v_hat = s.v / (1.0 - beta2**s.t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


class Adam:
    def __init__(self, params: Iterable[torch.Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.states = [AdamState(torch.zeros_like(p), torch.zeros_like(p)) for p in self.params]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, loss) -> None:
        grads = gradients(loss, self.params)
        adam_step(self.params, grads, self.states, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    h: float = 1e-3,
    max_entries: Optional[int] = None,
    seed: int = 0,
    scale: str = "tensor",
) -> float:
    """Largest relative error between autograd and central differences.

    ``fn`` maps the (float64) ``inputs`` to a scalar. With ``scale="tensor"``
    the error of each input is ``max|analytic - numeric| / max(max|numeric|, 1e-8)``
    over its checked entries (all of them, or ``max_entries`` sampled ones),
    and the worst input is reported. With ``scale="global"`` the denominator is
    the largest numeric derivative over all inputs, which is the meaningful
    choice for whole networks: some parameters (e.g. a conv bias feeding an
    instance norm) have an exactly zero derivative, and their difference
    quotients contain only rounding noise.
    """
    if scale not in ("tensor", "global"):
        raise ValueError(f"scale must be 'tensor' or 'global', got {scale!r}")
    inputs = [t.detach().clone().double().requires_grad_(True) for t in inputs]
    analytic = gradients(fn(*inputs), inputs)
    rng = np.random.default_rng(seed)
    diffs, sizes = [], []
    for t, g in zip(inputs, analytic):
        flat = t.data.view(-1)
        n = flat.numel()
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        numeric = np.empty(len(idx))
        with torch.no_grad():
            for k, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = fn(*inputs).item()
                flat[i] = orig - h
                f_minus = fn(*inputs).item()
                flat[i] = orig
                numeric[k] = (f_plus - f_minus) / (2.0 * h)
        a = g.detach().reshape(-1)[torch.as_tensor(idx)].numpy()
        diffs.append(float(np.abs(a - numeric).max(initial=0.0)))
        sizes.append(float(np.abs(numeric).max(initial=0.0)))
    if scale == "global":
        return max(diffs, default=0.0) / max(max(sizes, default=0.0), 1e-8)
    return max((d / max(s, 1e-8) for d, s in zip(diffs, sizes)), default=0.0)


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


CHECKPOINT_MAGIC = "DAEW1"


def checkpoint_bytes(state: "OrderedDict[str, torch.Tensor]") -> bytes:
    lines = [f"{CHECKPOINT_MAGIC} {len(state)}"]
    payload = []
    for name, t in state.items():
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        lines.append(" ".join([name, str(arr.ndim)] + [str(d) for d in arr.shape]))
        payload.append(np.ascontiguousarray(arr).tobytes())
    return ("\n".join(lines) + "\n\n").encode("ascii") + b"".join(payload)


def save_checkpoint(state, path) -> None:
    data = checkpoint_bytes(state)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def parse_checkpoint(raw: bytes) -> "OrderedDict[str, torch.Tensor]":
    end = raw.find(b"\n\n")
    if end < 0:
        raise CheckpointError("missing header terminator")
    header = raw[:end].decode("ascii").split("\n")
    first = header[0].split()
    if len(first) != 2 or first[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"expected {CHECKPOINT_MAGIC} header, got {header[0][:32]!r}")
    n = int(first[1])
    if len(header) != n + 1:
        raise CheckpointError(f"header lists {len(header) - 1} tensors, expected {n}")
    pos = end + 2
    state = OrderedDict()
    for line in header[1:]:
        name, rank, *dims = line.split()
        shape = tuple(int(d) for d in dims)
        if len(shape) != int(rank):
            raise CheckpointError(f"rank mismatch for {name}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise CheckpointError(f"payload truncated at {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after payload")
    return state


def load_checkpoint(path) -> "OrderedDict[str, torch.Tensor]":
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
