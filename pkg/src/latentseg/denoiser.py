"""Mini denoising U-Net, its toy pretraining, channel expansion and LoRA.

The network is a two-level U-Net with residual blocks, timestep conditioning
and self-attention at the lowest resolution. Its native head/tail width is
``UNetConfig.base_channels_in_out`` (4, like an image-VAE latent); wider
segmentation latents are handled by :func:`cre_expand` (or one of the
alternatives in :func:`expand_channels`).
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from . import nn
from .params import ParamStore
from .schedule import NoiseSchedule

PREFIX = "unet/"
HEAD = ("unet/head.w", "unet/head.b")
TAIL = ("unet/tail.w", "unet/tail.b")
EXPANSIONS = ("cre", "adapter", "new_head")


@dataclass
class UNetConfig:
    base_channels_in_out: int = 4
    seg_channels: int = 32
    depth: int = 2
    attn_at: list[int] = field(default_factory=lambda: [1])
    time_embed_dim: int = 64
    width: int = 32
    heads: int = 4

    def __post_init__(self):
        if self.seg_channels % self.base_channels_in_out:
            raise ValueError("seg_channels must be a multiple of base_channels_in_out")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def expansion(self) -> int:
        return self.seg_channels // self.base_channels_in_out

    def widths(self) -> list[int]:
        return [self.width * 2 ** i for i in range(self.depth)]


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 8.0
    target: tuple[str, ...] = ("q", "k", "v", "o")


# -- network ----------------------------------------------------------------

def _add_resblock(store, gen, name, cin, cout, temb):
    nn.add_norm(store, name + ".n1", cin)
    nn.add_conv(store, gen, name + ".c1", cout, cin, 3)
    nn.add_linear(store, gen, name + ".t", cout, temb)
    nn.add_norm(store, name + ".n2", cout)
    nn.add_conv(store, gen, name + ".c2", cout, cout, 3)
    if cin != cout:
        nn.add_conv(store, gen, name + ".skip", cout, cin, 1)


def _resblock(p, name, x, emb):
    h = nn.conv(p, name + ".c1", F.silu(nn.group_norm(p, name + ".n1", x)))
    h = h + nn.linear(p, name + ".t", F.silu(emb))[:, :, None, None]
    h = nn.conv(p, name + ".c2", F.silu(nn.group_norm(p, name + ".n2", h)))
    skip = nn.conv(p, name + ".skip", x) if name + ".skip.w" in p else x
    return skip + h


def _spatial_attn(p, name, x, heads):
    b, c, h, w = x.shape
    tok = nn.group_norm(p, name + ".n", x).reshape(b, c, h * w).transpose(1, 2)
    out = nn.attention(p, name, tok, tok, heads)
    return x + out.transpose(1, 2).reshape(b, c, h, w)


def init_mini_unet(cfg: UNetConfig, seed: int) -> ParamStore:
    """Deterministic initialisation of the native (narrow head/tail) U-Net."""
    gen = torch.Generator().manual_seed(int(seed))
    s = ParamStore()
    ws = cfg.widths()
    te = cfg.time_embed_dim
    nn.add_linear(s, gen, PREFIX + "temb.l1", te, te)
    nn.add_linear(s, gen, PREFIX + "temb.l2", te, te)
    nn.add_conv(s, gen, PREFIX + "head", ws[0], cfg.base_channels_in_out, 3)
    for i, w in enumerate(ws):
        _add_resblock(s, gen, f"{PREFIX}down{i}.res", w, w, te)
        if i in cfg.attn_at:
            nn.add_norm(s, f"{PREFIX}down{i}.attn.n", w)
            nn.add_attention(s, gen, f"{PREFIX}down{i}.attn", w)
        if i < cfg.depth - 1:
            nn.add_conv(s, gen, f"{PREFIX}down{i}.ds", ws[i + 1], w, 3)
    for i in reversed(range(cfg.depth - 1)):
        nn.add_conv(s, gen, f"{PREFIX}up{i}.us", ws[i], ws[i + 1], 3)
        _add_resblock(s, gen, f"{PREFIX}up{i}.res", 2 * ws[i], ws[i], te)
    nn.add_norm(s, PREFIX + "tail.n", ws[0])
    # small tail init keeps early noise predictions near zero
    nn.add_conv(s, gen, PREFIX + "tail", cfg.base_channels_in_out, ws[0], 3, scale=0.1)
    _set_meta(s, cfg)
    return s


def _set_meta(s: ParamStore, cfg: UNetConfig) -> None:
    # architecture scalars travel with the store (and its checkpoint) as frozen entries
    s[PREFIX + "meta.depth"] = torch.tensor(float(cfg.depth))
    s[PREFIX + "meta.heads"] = torch.tensor(float(cfg.heads))
    s.freeze([PREFIX + "meta.depth", PREFIX + "meta.heads"])


def predict_noise(p: ParamStore, z: torch.Tensor, t) -> torch.Tensor:
    """Noise prediction for latent ``z`` (B, C, H, W) at timestep(s) ``t``."""
    cin = _input_channels(p)
    if z.ndim != 4 or z.shape[1] != cin:
        raise ValueError(f"expected (B, {cin}, H, W) latent, got {tuple(z.shape)}")
    depth = int(p[PREFIX + "meta.depth"])
    heads = int(p[PREFIX + "meta.heads"])
    if z.shape[-1] % 2 ** (depth - 1) or z.shape[-2] % 2 ** (depth - 1):
        raise ValueError("spatial size must be divisible by 2**(depth-1)")
    te = p[PREFIX + "temb.l1.w"].shape[1]
    tt = torch.as_tensor(t).reshape(-1)
    emb = nn.sinusoidal_embedding(tt, te, z.dtype)
    if emb.shape[0] == 1:
        emb = emb.expand(z.shape[0], -1)
    emb = nn.linear(p, PREFIX + "temb.l2", F.silu(nn.linear(p, PREFIX + "temb.l1", emb)))

    x = z
    if PREFIX + "adapt_in.w" in p:
        x = nn.conv(p, PREFIX + "adapt_in", x)
    h = nn.conv(p, PREFIX + "head", x)
    skips = []
    for i in range(depth):
        h = _resblock(p, f"{PREFIX}down{i}.res", h, emb)
        if f"{PREFIX}down{i}.attn.q.w" in p:
            h = _spatial_attn(p, f"{PREFIX}down{i}.attn", h, heads)
        if i < depth - 1:
            skips.append(h)
            h = nn.conv(p, f"{PREFIX}down{i}.ds", h, stride=2)
    for i in reversed(range(depth - 1)):
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = nn.conv(p, f"{PREFIX}up{i}.us", h)
        h = _resblock(p, f"{PREFIX}up{i}.res", torch.cat([h, skips[i]], dim=1), emb)
    out = nn.conv(p, PREFIX + "tail", F.silu(nn.group_norm(p, PREFIX + "tail.n", h)))
    if PREFIX + "adapt_out.w" in p:
        out = nn.conv(p, PREFIX + "adapt_out", out)
    return out


def _input_channels(p: ParamStore) -> int:
    if PREFIX + "adapt_in.w" in p:
        return p[PREFIX + "adapt_in.w"].shape[1]
    return p[PREFIX + "head.w"].shape[1]


def make_denoiser(p: ParamStore):
    """Bind a store into the ``denoiser(u, t)`` callable the GLE formulas expect."""
    return lambda u, t: predict_noise(p, u, t)


# -- toy pretraining --------------------------------------------------------

def smooth_field_corpus(n: int, channels: int = 4, size: int = 16, seed: int = 0
                        ) -> torch.Tensor:
    """Gaussian-filtered white noise, each field standardised to unit variance."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, channels, size, size), dtype=np.float32)
    for i in range(n):
        sigma = rng.uniform(1.0, 3.0)
        noise = rng.standard_normal((channels, size, size))
        f = gaussian_filter(noise, sigma=(0, sigma, sigma), mode="wrap")
        f = f - f.mean(axis=(1, 2), keepdims=True)
        out[i] = f / (f.std() + 1e-8)
    return torch.from_numpy(out)


def denoising_loss(p: ParamStore, z: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                   sched: NoiseSchedule) -> torch.Tensor:
    ab = torch.as_tensor(sched.alpha_bar[t.numpy()], dtype=z.dtype)[:, None, None, None]
    z_t = ab.sqrt() * z + (1 - ab).sqrt() * eps
    return F.mse_loss(predict_noise(p, z_t, t), eps)


def pretrain_denoiser(p: ParamStore, sched: NoiseSchedule, corpus: torch.Tensor,
                      steps: int, seed: int, *, batch_size: int = 16, lr: float = 1e-3
                      ) -> tuple[ParamStore, list[float]]:
    """Epsilon-prediction training on a corpus of narrow latents.

    Returns a new store (the input is not modified) and the loss curve.
    """
    cin = _input_channels(p)
    if corpus.shape[1] != cin:
        raise ValueError(f"corpus has {corpus.shape[1]} channels, head expects {cin}")
    out = p.copy()
    gen = torch.Generator().manual_seed(int(seed))

    def loss_fn(step):
        idx = torch.randint(0, corpus.shape[0], (batch_size,), generator=gen)
        t = torch.randint(0, sched.num_steps, (batch_size,), generator=gen)
        eps = torch.randn(corpus[idx].shape, generator=gen)
        return denoising_loss(out, corpus[idx], t, eps, sched)

    curve = nn.fit(out, loss_fn, steps, lr=lr, weight_decay=0.0)
    return out, curve


# -- channel expansion ------------------------------------------------------

def cre_expand(p: ParamStore, k: int) -> ParamStore:
    """Replicate head weights along input channels and tail weights/bias along
    output channels ``k`` times; the expanded head/tail are frozen.

    Head bias is kept once. No rescaling is applied to the copies.
    """
    if int(k) != k or k < 1:
        raise ValueError(f"expansion factor must be a positive integer, got {k}")
    k = int(k)
    out = p.copy()
    if k == 1:
        return out
    out[HEAD[0]] = torch.cat([p[HEAD[0]]] * k, dim=1)
    out[TAIL[0]] = torch.cat([p[TAIL[0]]] * k, dim=0)
    out[TAIL[1]] = torch.cat([p[TAIL[1]]] * k, dim=0)
    out.freeze(HEAD + TAIL)
    return out


def expand_channels(p: ParamStore, k: int, method: str = "cre", seed: int = 0) -> ParamStore:
    """Widen the denoiser's latent interface by ``k``.

    ``cre``: replicate pretrained head/tail (frozen).
    ``adapter``: keep the narrow U-Net and add trainable 1x1 projections
    ``k*c -> c`` before the head and ``c -> k*c`` after the tail.
    ``new_head``: discard the head/tail and train freshly initialised wide ones.
    """
    if method == "cre":
        return cre_expand(p, k)
    if int(k) != k or k < 1:
        raise ValueError(f"expansion factor must be a positive integer, got {k}")
    k = int(k)
    gen = torch.Generator().manual_seed(int(seed))
    out = p.copy()
    c = p[HEAD[0]].shape[1]
    if method == "adapter":
        nn.add_conv(out, gen, PREFIX + "adapt_in", c, c * k, 1)
        nn.add_conv(out, gen, PREFIX + "adapt_out", c * k, c, 1)
    elif method == "new_head":
        w0 = p[HEAD[0]].shape[0]
        nn.add_conv(out, gen, PREFIX + "head", w0, c * k, 3)
        nn.add_conv(out, gen, PREFIX + "tail", c * k, w0, 3, scale=0.1)
        out.unfreeze(HEAD + TAIL)
    else:
        raise ValueError(f"unknown expansion method {method!r}; choose from {EXPANSIONS}")
    out[PREFIX + "meta.expansion"] = torch.tensor(float(EXPANSIONS.index(method)))
    out.freeze([PREFIX + "meta.expansion"])
    return out


def expansion_names(p: ParamStore) -> list[str]:
    """Newly initialised interface layers that stay trainable next to LoRA."""
    if PREFIX + "meta.expansion" not in p:
        return []
    method = EXPANSIONS[int(p[PREFIX + "meta.expansion"])]
    if method == "adapter":
        return [n for n in p.names(PREFIX) if n.startswith((PREFIX + "adapt_in.", PREFIX + "adapt_out."))]
    if method == "new_head":
        return list(HEAD + TAIL)
    return []


# -- LoRA -------------------------------------------------------------------

def attention_projections(p: ParamStore, target=("q", "k", "v", "o")) -> list[str]:
    """Names (without ``.w``) of attention projection weights in the U-Net."""
    out = []
    for n in p.names(PREFIX):
        parts = n.split(".")
        if len(parts) >= 3 and parts[-1] == "w" and parts[-2] in target and ".attn." in n:
            out.append(n[:-2])
    return out


def attach_lora(p: ParamStore, lcfg: LoraConfig, seed: int) -> ParamStore:
    """Add ``A`` (random) and ``B`` (zero) factors to every attention projection.

    Everything except the LoRA factors (and freshly initialised interface
    layers from :func:`expand_channels`) is frozen afterwards.
    """
    targets = attention_projections(p, lcfg.target)
    if not targets:
        raise ValueError("no attention projections found to adapt")
    gen = torch.Generator().manual_seed(int(seed))
    out = p.copy()
    out.freeze_all()
    out.unfreeze(expansion_names(p))
    for name in targets:
        dout, din = p[name + ".w"].shape
        if lcfg.rank > min(dout, din):
            raise ValueError(f"LoRA rank {lcfg.rank} exceeds min dim of {name} ({dout}x{din})")
        out[name + ".lora_A"] = torch.randn(lcfg.rank, din, generator=gen) / np.sqrt(din)
        out[name + ".lora_B"] = torch.zeros(dout, lcfg.rank)
        out[name + ".lora_scale"] = torch.tensor(lcfg.alpha / lcfg.rank)
        out.freeze([name + ".lora_scale"])
    return out


def lora_names(p: ParamStore) -> list[str]:
    return [n for n in p.names(PREFIX) if n.endswith((".lora_A", ".lora_B"))]


def lora_param_count(p: ParamStore) -> int:
    return p.num_params(lora_names(p))


def config_dict(cfg: UNetConfig) -> dict:
    return asdict(cfg)
