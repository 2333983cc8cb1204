"""Functional layers over a :class:`ParamStore` and a small AdamW training loop.

Parameters live in flat stores keyed ``<prefix>.w`` / ``<prefix>.b``; every
layer here reads its tensors by prefix, so the same store can be cast to
float64 for finite-difference checks or have entries frozen without touching
any module objects.
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .params import ParamStore

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """Raised when a training loss becomes NaN/inf; the store is rolled back."""

    def __init__(self, step: int, last_good_step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}; "
                         f"trainables restored to step {last_good_step}")
        self.step = step
        self.last_good_step = last_good_step


# -- initialisation ---------------------------------------------------------

def conv_init(gen: torch.Generator, cout: int, cin: int, k: int, groups: int = 1):
    fan_in = (cin // groups) * k * k
    bound = 1.0 / math.sqrt(fan_in)
    w = (torch.rand(cout, cin // groups, k, k, generator=gen) * 2 - 1) * bound
    b = (torch.rand(cout, generator=gen) * 2 - 1) * bound
    return w, b


def linear_init(gen: torch.Generator, dout: int, din: int):
    bound = 1.0 / math.sqrt(din)
    w = (torch.rand(dout, din, generator=gen) * 2 - 1) * bound
    b = (torch.rand(dout, generator=gen) * 2 - 1) * bound
    return w, b


def add_conv(store: ParamStore, gen, name, cout, cin, k, groups=1, scale=1.0):
    w, b = conv_init(gen, cout, cin, k, groups)
    store[name + ".w"] = w * scale
    store[name + ".b"] = b * scale


def add_linear(store: ParamStore, gen, name, dout, din, scale=1.0):
    w, b = linear_init(gen, dout, din)
    store[name + ".w"] = w * scale
    store[name + ".b"] = b * scale


def add_norm(store: ParamStore, name, c):
    store[name + ".w"] = torch.ones(c)
    store[name + ".b"] = torch.zeros(c)


# -- layers -----------------------------------------------------------------

def conv(p: ParamStore, name: str, x, stride=1, groups=1):
    w = p[name + ".w"]
    return F.conv2d(x, w, p[name + ".b"], stride=stride, padding=w.shape[-1] // 2,
                    groups=groups)


def linear(p: ParamStore, name: str, x):
    """Affine map; adds the low-rank update when ``<name>.lora_A`` exists."""
    w = p[name + ".w"]
    a = p.tensors.get(name + ".lora_A")
    if a is not None:
        w = w + p[name + ".lora_scale"] * (p[name + ".lora_B"] @ a)
    return F.linear(x, w, p[name + ".b"])


def group_norm(p: ParamStore, name: str, x, groups: int = 8):
    c = x.shape[1]
    return F.group_norm(x, min(groups, c), p[name + ".w"], p[name + ".b"], eps=1e-5)


def layer_norm(p: ParamStore, name: str, x):
    return F.layer_norm(x, x.shape[-1:], p[name + ".w"], p[name + ".b"], eps=1e-5)


def attention(p: ParamStore, name: str, q_in, kv_in, heads: int):
    """Multi-head attention; ``q_in`` (B, Nq, D), ``kv_in`` (B, Nk, D)."""
    q = linear(p, name + ".q", q_in)
    k = linear(p, name + ".k", kv_in)
    v = linear(p, name + ".v", kv_in)
    b, nq, d = q.shape
    nk = k.shape[1]
    dh = d // heads
    q = q.reshape(b, nq, heads, dh).transpose(1, 2)
    k = k.reshape(b, nk, heads, dh).transpose(1, 2)
    v = v.reshape(b, nk, heads, dh).transpose(1, 2)
    att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    out = (att @ v).transpose(1, 2).reshape(b, nq, d)
    return linear(p, name + ".o", out)


def add_attention(store: ParamStore, gen, name: str, dim: int):
    for proj in ("q", "k", "v", "o"):
        add_linear(store, gen, f"{name}.{proj}", dim, dim)


def sinusoidal_embedding(t, dim: int, dtype=torch.float32):
    """Standard transformer-style timestep embedding, ``t`` scalar or (B,)."""
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(dtype)


# -- training loop ----------------------------------------------------------

def fit(store: ParamStore, loss_fn: Callable[[int], torch.Tensor], steps: int, *,
        lr: float = 2e-4, weight_decay: float = 1e-2, names: Sequence[str] | None = None,
        snapshot_every: int = 100, log_every: int = 0, grad_clip: float | None = 1.0
        ) -> list[float]:
    """Minimise ``loss_fn(step)`` with AdamW over the trainable entries of ``store``.

    Frozen entries never receive gradients or updates, so they stay
    bit-identical. Returns the per-step loss curve.
    """
    names = list(store.trainable_names() if names is None else names)
    curve: list[float] = []
    if steps <= 0 or not names:
        return curve
    params = []
    for n in names:
        t = store[n].detach().clone().requires_grad_(True)
        store[n] = t
        params.append(t)
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    good = [t.detach().clone() for t in params]
    good_step = 0
    try:
        for step in range(steps):
            opt.zero_grad(set_to_none=True)
            loss = loss_fn(step)
            val = float(loss.detach())
            if not np.isfinite(val):
                with torch.no_grad():
                    for t, g in zip(params, good):
                        t.copy_(g)
                raise NonFiniteLossError(step, good_step, val)
            loss.backward()
            if grad_clip:
                torch.nn.utils.clip_grad_norm_(params, grad_clip)
            opt.step()
            curve.append(val)
            if snapshot_every and (step + 1) % snapshot_every == 0:
                good = [t.detach().clone() for t in params]
                good_step = step + 1
            if log_every and step % log_every == 0:
                log.info("step %d loss %.6f", step, val)
    finally:
        for n in names:
            store[n] = store[n].detach()
    return curve
