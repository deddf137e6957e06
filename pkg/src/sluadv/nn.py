"""Differentiable building blocks on top of torch autograd.

Only the handful of ops the SLU models need: dense layers, token convolution,
masked max-pooling, softmax cross-entropy, Adam with per-group gating, the
Noam schedule, a central-difference gradient checker and a checkpoint file.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

ACTIVATIONS = {
    "gelu": F.gelu,
    "relu": F.relu,
    "identity": lambda x: x,
}


class NonFiniteError(FloatingPointError):
    pass


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def dense(x, W, b, activation: str = "identity"):
    """``activation(x @ W.T + b)`` over the last axis of ``x``."""
    if x.shape[-1] != W.shape[1] or W.shape[0] != b.shape[0]:
        raise ValueError(f"dense shape mismatch: x{tuple(x.shape)} W{tuple(W.shape)} b{tuple(b.shape)}")
    return ACTIVATIONS[activation](x @ W.transpose(0, 1) + b)


def conv_tokens(H, K, b, mask):
    """Width-3 same-padded convolution along tokens, ReLU, masked rows zeroed.

    H is ``[..., T, d_in]``, K is ``[d_out, 3, d_in]``. Masked input rows are
    treated as zero padding so they never influence valid positions.
    """
    if K.dim() != 3 or K.shape[1] != 3 or K.shape[2] != H.shape[-1] or K.shape[0] != b.shape[0]:
        raise ValueError(f"conv shape mismatch: H{tuple(H.shape)} K{tuple(K.shape)} b{tuple(b.shape)}")
    m = mask.unsqueeze(-1).to(H.dtype)
    H = H * m
    zero = torch.zeros_like(H[..., :1, :])
    prev = torch.cat([zero, H[..., :-1, :]], dim=-2)
    nxt = torch.cat([H[..., 1:, :], zero], dim=-2)
    out = prev @ K[:, 0, :].T + H @ K[:, 1, :].T + nxt @ K[:, 2, :].T + b
    return F.relu(out) * m


def masked_max_pool(H, mask):
    """Per-feature max over valid tokens; gradient goes to the first argmax."""
    if not mask.any(dim=-1).all():
        raise ValueError("masked_max_pool needs at least one valid position per sequence")
    filled = H.masked_fill(~mask.unsqueeze(-1), float("-inf"))
    idx = filled.argmax(dim=-2, keepdim=True)
    # argmax returns the first maximal index; gather keeps autograd on H only.
    return H.gather(-2, idx).squeeze(-2)


def softmax_xent(logits, target):
    """Return ``(p, loss)`` with ``loss = -log p[target]`` per row."""
    n = logits.shape[-1]
    if n < 2:
        raise ValueError("softmax_xent needs at least two classes")
    target = torch.as_tensor(target, device=logits.device)
    if (target < 0).any() or (target >= n).any():
        raise ValueError(f"target out of range for {n} classes")
    shifted = logits - logits.max(dim=-1, keepdim=True).values.detach()
    logp = shifted - torch.logsumexp(shifted, dim=-1, keepdim=True)
    loss = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    return logp.exp(), loss


def dropout(x, rate: float, train: bool):
    if not train or rate <= 0.0:
        return x
    keep = (torch.rand_like(x) >= rate).to(x.dtype)
    return x * keep / (1.0 - rate)


def _init_matrix(shape, fan_in, generator=None, dtype=torch.float64):
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * bound


class Dense(nn.Module):
    def __init__(self, d_in, d_out, activation="identity", dtype=torch.float64):
        super().__init__()
        self.W = nn.Parameter(_init_matrix((d_out, d_in), d_in, dtype=dtype))
        self.b = nn.Parameter(torch.zeros(d_out, dtype=dtype))
        self.activation = activation

    def forward(self, x):
        return dense(x, self.W, self.b, self.activation)


class FeedForward(nn.Module):
    """Stack of gelu dense layers, each followed by dropout."""

    def __init__(self, d_in, hidden, n_layers, rate, dtype=torch.float64):
        super().__init__()
        dims = [d_in] + [hidden] * n_layers
        self.layers = nn.ModuleList(Dense(a, b, "gelu", dtype) for a, b in zip(dims, dims[1:]))
        self.rate = rate
        self.d_out = dims[-1]

    def forward(self, x, train=False):
        for layer in self.layers:
            x = dropout(layer(x), self.rate, train)
        return x


# -- optimisation --------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              trainable: Callable[[str], bool] = lambda name: True,
              betas=(0.9, 0.999), eps=1e-8) -> None:
    """In-place Adam update of every trainable parameter that has a gradient.

    Moments and bias correction are tracked per parameter so tensors frozen
    for some steps resume with a correct correction factor.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    b1, b2 = betas
    state.step += 1
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None or not trainable(name):
                continue
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
                state.t[name] = 0
            state.t[name] += 1
            t = state.t[name]
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


class Adam:
    def __init__(self, named_params: Iterable, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.betas, self.eps = betas, eps
        self.state = OptimizerState()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr, trainable=lambda name: True):
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state, lr, trainable, self.betas, self.eps)


def noam_lr(step: int, d_model: int, warmup: int, scale: float) -> float:
    if step < 1:
        raise ValueError("noam step counts from 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


# -- gradient oracle -----------------------------------------------------------

def grad_check(loss_fn, params, eps: float = 1e-5, max_per_tensor: int | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` maps the list ``params`` (float64 leaf tensors) to a scalar.
    With ``max_per_tensor`` only a random subset of entries is probed.
    """
    params = list(params)
    for p in params:
        p.grad = None
        p.requires_grad_(True)
    loss = loss_fn(params)
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            a = torch.zeros_like(p) if a is None else a
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_per_tensor is not None and flat.numel() > max_per_tensor:
                idx = rng.choice(flat.numel(), max_per_tensor, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn(params))
                flat[i] = orig - eps
                down = float(loss_fn(params))
                flat[i] = orig
                num = (up - down) / (2 * eps)
                an = a.view(-1)[i].item()
                err = abs(an - num) / max(abs(an), abs(num), 1e-8)
                worst = max(worst, err)
    return worst


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"SLUADV1\n"


def save_checkpoint(path, groups: dict[str, dict[str, torch.Tensor]], seed: int, step: int, meta: dict | None = None):
    """Write ``(group, name, shape, values)`` records as a binary container.

    Layout: magic line, 8-byte little-endian header length, JSON header,
    then concatenated little-endian float64 payloads in header order.
    """
    records, payload = [], []
    for group, tensors in groups.items():
        for name, t in tensors.items():
            arr = t.detach().cpu().to(torch.float64).contiguous().numpy()
            records.append({"group": group, "name": name, "shape": list(arr.shape)})
            payload.append(arr.astype("<f8").tobytes())
    header = json.dumps({"seed": seed, "step": step, "meta": meta or {}, "records": records},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path):
    """Return ``(groups, seed, step, meta)`` from :func:`save_checkpoint` output."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not an SLUADV1 checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        groups: dict[str, dict[str, torch.Tensor]] = {}
        for rec in header["records"]:
            count = int(np.prod(rec["shape"])) if rec["shape"] else 1
            arr = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(rec["shape"])
            groups.setdefault(rec["group"], {})[rec["name"]] = torch.from_numpy(arr.copy())
    return groups, header["seed"], header["step"], header["meta"]
