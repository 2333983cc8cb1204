"""Toy promptable segmenter: image encoder, prompt encoder, mask decoder.

The encoder maps a 64x64 RGB image to a ``seg_channels`` x 16 x 16 latent whose
per-sample standard deviation is fixed to ``latent_scale``. Prompts are points
or boxes in pixel coordinates ``(row, col)``; they are embedded with a learned
random-Fourier positional code plus a learned type vector. The decoder runs a
mask token and the prompt tokens through one two-way attention block against
the latent, upsamples the latent with two transposed convolutions and takes a
dot product with a hypernetwork vector from the mask token.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import nn
from .losses import dice_loss, focal_loss
from .params import ParamStore

ENC, PE, DEC = "seg/enc.", "seg/pe.", "seg/dec."
MASK_TOKEN = DEC + "mask_token"
POINT, BOX_TL, BOX_BR = 0, 1, 2


@dataclass
class SegConfig:
    image_size: int = 64
    seg_channels: int = 32
    stride: int = 4
    enc_width: int = 32
    heads: int = 4
    up_channels: tuple[int, int] = (16, 8)
    latent_scale: float = 0.2

    @property
    def latent_size(self) -> int:
        return self.image_size // self.stride


@dataclass
class PromptSet:
    kind: str                                    # "points" | "box" | "noise_box"
    points: tuple[tuple[float, float], ...] = ()
    box: tuple[float, float, float, float] | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("points", "box", "noise_box"):
            raise ValueError(f"unknown prompt kind {self.kind!r}")
        if self.kind == "points" and not self.points:
            raise ValueError("empty point prompt")
        if self.kind != "points":
            if self.box is None:
                raise ValueError("box prompt without box")
            r0, c0, r1, c1 = self.box
            if r1 < r0 or c1 < c0:
                raise ValueError(f"box has non-positive area: {self.box}")

    def coords(self) -> list[tuple[float, float]]:
        if self.kind == "points":
            return [tuple(map(float, p)) for p in self.points]
        r0, c0, r1, c1 = self.box
        return [(float(r0), float(c0)), (float(r1), float(c1))]

    def types(self) -> list[int]:
        return [POINT] * len(self.points) if self.kind == "points" else [BOX_TL, BOX_BR]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "points": [list(p) for p in self.points],
                "box": None if self.box is None else list(self.box), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSet":
        return cls(d["kind"], tuple(tuple(p) for p in d.get("points") or ()),
                   None if d.get("box") is None else tuple(d["box"]), d.get("seed"))


# -- prompt generation ------------------------------------------------------

def _fg(mask) -> np.ndarray:
    return np.asarray(mask) > 0


def sample_point_prompts(mask, n: int = 3, seed: int = 0) -> PromptSet:
    """``n`` distinct foreground pixels, uniformly without replacement."""
    fg = np.argwhere(_fg(mask))
    if len(fg) < n:
        raise ValueError(f"mask has {len(fg)} foreground pixels, need {n}")
    idx = np.random.default_rng(seed).choice(len(fg), size=n, replace=False)
    return PromptSet("points", tuple((int(r), int(c)) for r, c in fg[idx]), seed=seed)


def box_from_mask(mask) -> PromptSet:
    fg = np.argwhere(_fg(mask))
    if not len(fg):
        raise ValueError("empty mask has no bounding box")
    (r0, c0), (r1, c1) = fg.min(0), fg.max(0)
    return PromptSet("box", box=(int(r0), int(c0), int(r1), int(c1)))


def noise_box(box: PromptSet, scale: float = 0.2, seed: int = 0,
              image_shape: tuple[int, int] = (64, 64)) -> PromptSet:
    """Jitter a box: centre shift within +-scale*half-extent per axis, each side
    length scaled by an independent factor in [1-scale, 1+scale], then clipped."""
    if not 0 <= scale < 1:
        raise ValueError("scale must lie in [0, 1)")
    r0, c0, r1, c1 = box.box
    if scale == 0:
        return PromptSet("noise_box", box=(r0, c0, r1, c1), seed=seed)
    rng = np.random.default_rng(seed)
    cy, cx = (r0 + r1) / 2, (c0 + c1) / 2
    hh, hw = (r1 - r0) / 2, (c1 - c0) / 2
    dy, dx = rng.uniform(-scale, scale, size=2)
    fy, fx = rng.uniform(1 - scale, 1 + scale, size=2)
    cy, cx = cy + dy * hh, cx + dx * hw
    hh, hw = hh * fy, hw * fx
    h, w = image_shape
    nr0, nr1 = max(0.0, cy - hh), min(h - 1.0, cy + hh)
    nc0, nc1 = max(0.0, cx - hw), min(w - 1.0, cx + hw)
    if nr1 < nr0 or nc1 < nc0:
        raise ValueError("noisy box degenerated after clipping")
    return PromptSet("noise_box", box=(float(nr0), float(nc0), float(nr1), float(nc1)),
                     seed=seed)


def make_prompt(mask, mode: str, seed: int, n_points: int = 3,
                noise_scale: float = 0.2) -> PromptSet:
    """Prompt of the given evaluation mode drawn from a ground-truth mask."""
    if mode == "points":
        return sample_point_prompts(mask, n_points, seed)
    if mode == "box":
        return box_from_mask(mask)
    if mode == "noise_box":
        return noise_box(box_from_mask(mask), noise_scale, seed, np.shape(mask)[:2])
    raise ValueError(f"unknown prompt mode {mode!r}")


# -- parameters -------------------------------------------------------------

def init_segmenter(cfg: SegConfig, seed: int) -> ParamStore:
    gen = torch.Generator().manual_seed(int(seed))
    p = ParamStore()
    w, d = cfg.enc_width, cfg.seg_channels
    nn.add_conv(p, gen, ENC + "c1", w // 2, 3, 3)
    nn.add_conv(p, gen, ENC + "c2", w, w // 2, 3)
    nn.add_conv(p, gen, ENC + "c3", w, w, 3)
    nn.add_conv(p, gen, ENC + "c4", w, w, 3)
    nn.add_conv(p, gen, ENC + "proj", d, w, 1)
    p[ENC + "scale"] = torch.tensor(float(cfg.latent_scale))
    p.freeze([ENC + "scale"])

    p[PE + "gauss"] = torch.randn(2, d // 2, generator=gen)
    p[PE + "types"] = torch.randn(3, d, generator=gen) * 0.1

    p[MASK_TOKEN] = torch.randn(1, d, generator=gen) * 0.1
    for blk in ("self", "t2i", "i2t", "final"):
        nn.add_attention(p, gen, DEC + blk, d)
    for ln in ("ln1", "ln2", "ln3", "ln4", "ln5"):
        nn.add_norm(p, DEC + ln, d)
    nn.add_linear(p, gen, DEC + "mlp1", 2 * d, d)
    nn.add_linear(p, gen, DEC + "mlp2", d, 2 * d)
    u1, u2 = cfg.up_channels
    _add_convT(p, gen, DEC + "up1", d, u1)
    _add_convT(p, gen, DEC + "up2", u1, u2)
    nn.add_linear(p, gen, DEC + "hyper1", d, d)
    nn.add_linear(p, gen, DEC + "hyper2", u2, d)
    p[DEC + "heads"] = torch.tensor(float(cfg.heads))
    p.freeze([DEC + "heads"])
    return p


def _add_convT(p, gen, name, cin, cout):
    bound = 1.0 / math.sqrt(cin * 4)
    p[name + ".w"] = (torch.rand(cin, cout, 2, 2, generator=gen) * 2 - 1) * bound
    p[name + ".b"] = (torch.rand(cout, generator=gen) * 2 - 1) * bound


def encoder_names(p: ParamStore) -> list[str]:
    return p.names(ENC)


def prompt_encoder_names(p: ParamStore) -> list[str]:
    return p.names(PE)


def decoder_names(p: ParamStore, mode: str = "FT-D") -> list[str]:
    if mode == "FT-T":
        return [MASK_TOKEN]
    if mode == "FT-D":
        return [n for n in p.names(DEC) if n != DEC + "heads"]
    raise ValueError(f"decoder fine-tune mode must be FT-T or FT-D, got {mode!r}")


# -- forward passes ---------------------------------------------------------

def to_tensor_images(images) -> torch.Tensor:
    """(H, W, 3) or (B, H, W, 3) arrays in [0, 1] (or uint8) -> (B, 3, H, W) float."""
    x = np.asarray(images)
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / 255.0
    if x.ndim == 3:
        x = x[None]
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=np.float32))


def encode_image(p: ParamStore, x: torch.Tensor, image_size: int | None = None) -> torch.Tensor:
    """Latent (B, C, H/4, W/4) of a (B, 3, H, W) image batch."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
    if image_size is not None and tuple(x.shape[-2:]) != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {tuple(x.shape[-2:])}")
    h = F.gelu(nn.conv(p, ENC + "c1", x))
    h = F.gelu(nn.conv(p, ENC + "c2", h, stride=2))
    h = F.gelu(nn.conv(p, ENC + "c3", h, stride=2))
    h = h + F.gelu(nn.conv(p, ENC + "c4", h))
    z = nn.conv(p, ENC + "proj", h)
    return F.group_norm(z, 1, eps=1e-5) * p[ENC + "scale"]


def _fourier(p: ParamStore, coords01: torch.Tensor) -> torch.Tensor:
    proj = 2 * math.pi * (2 * coords01 - 1) @ p[PE + "gauss"].to(coords01.dtype)
    return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


def prompt_tensors(prompts: Sequence[PromptSet], image_size: int, dtype=torch.float32):
    """Stack prompts into normalised (B, N, 2) coords and (B, N) type ids."""
    n = {len(pr.coords()) for pr in prompts}
    if len(n) != 1:
        raise ValueError("prompts in a batch must have the same number of entries")
    coords = torch.tensor([[((r + 0.5) / image_size, (c + 0.5) / image_size)
                            for r, c in pr.coords()] for pr in prompts], dtype=dtype)
    types = torch.tensor([pr.types() for pr in prompts], dtype=torch.long)
    return coords, types


def embed_prompts(p: ParamStore, coords: torch.Tensor, types: torch.Tensor) -> torch.Tensor:
    return _fourier(p, coords) + p[PE + "types"][types]


def encode_prompt(p: ParamStore, prompt: PromptSet, image_size: int = 64) -> torch.Tensor:
    """Embeddings (N, D): one per point, or two for a box's corner pair."""
    coords, types = prompt_tensors([prompt], image_size, p[PE + "gauss"].dtype)
    return embed_prompts(p, coords, types)[0]


def dense_positional(p: ParamStore, h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    rr, cc = torch.meshgrid((torch.arange(h, dtype=dtype) + 0.5) / h,
                            (torch.arange(w, dtype=dtype) + 0.5) / w, indexing="ij")
    return _fourier(p, torch.stack([rr, cc], dim=-1).reshape(h * w, 2))


def decode_mask(p: ParamStore, z: torch.Tensor, prompt_emb: torch.Tensor) -> torch.Tensor:
    """Mask logits (B, 4h, 4w) from latent (B, C, h, w) and prompts (B, N, C)."""
    b, c, h, w = z.shape
    if prompt_emb.ndim == 2:
        prompt_emb = prompt_emb[None].expand(b, -1, -1)
    if prompt_emb.shape[-1] != c or p[MASK_TOKEN].shape[-1] != c:
        raise ValueError("latent, prompt and decoder widths disagree")
    heads = int(p[DEC + "heads"])
    pos = dense_positional(p, h, w, z.dtype)[None]
    src = z.reshape(b, c, h * w).transpose(1, 2)
    tok = torch.cat([p[MASK_TOKEN][None].expand(b, -1, -1), prompt_emb], dim=1)

    tok = nn.layer_norm(p, DEC + "ln1", tok + nn.attention(p, DEC + "self", tok, tok, heads))
    tok = nn.layer_norm(p, DEC + "ln2", tok + _xattn(p, DEC + "t2i", tok, src + pos, src, heads))
    mlp = nn.linear(p, DEC + "mlp2", F.gelu(nn.linear(p, DEC + "mlp1", tok)))
    tok = nn.layer_norm(p, DEC + "ln3", tok + mlp)
    src = nn.layer_norm(p, DEC + "ln4", src + _xattn(p, DEC + "i2t", src + pos, tok, tok, heads))
    tok = nn.layer_norm(p, DEC + "ln5", tok + _xattn(p, DEC + "final", tok, src + pos, src, heads))

    img = src.transpose(1, 2).reshape(b, c, h, w)
    up = F.gelu(F.conv_transpose2d(img, p[DEC + "up1.w"], p[DEC + "up1.b"], stride=2))
    up = F.conv_transpose2d(up, p[DEC + "up2.w"], p[DEC + "up2.b"], stride=2)
    hyper = nn.linear(p, DEC + "hyper2", F.gelu(nn.linear(p, DEC + "hyper1", tok[:, 0])))
    return (hyper[:, :, None, None] * up).sum(dim=1)


def _xattn(p, name, q_in, k_in, v_in, heads):
    """Attention whose keys and values come from different inputs."""
    q = nn.linear(p, name + ".q", q_in)
    k = nn.linear(p, name + ".k", k_in)
    v = nn.linear(p, name + ".v", v_in)
    b, nq, d = q.shape
    nk = k.shape[1]
    dh = d // heads
    q = q.reshape(b, nq, heads, dh).transpose(1, 2)
    k = k.reshape(b, nk, heads, dh).transpose(1, 2)
    v = v.reshape(b, nk, heads, dh).transpose(1, 2)
    att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    return nn.linear(p, name + ".o", (att @ v).transpose(1, 2).reshape(b, nq, d))


def binarize(logits: torch.Tensor, threshold: float = 0.0) -> np.ndarray:
    return (logits.detach().cpu().numpy() > threshold)


def segment(p: ParamStore, z: torch.Tensor, prompts: Sequence[PromptSet],
            image_size: int = 64) -> torch.Tensor:
    coords, types = prompt_tensors(prompts, image_size, z.dtype)
    return decode_mask(p, z, embed_prompts(p, coords, types))


# -- pretraining ------------------------------------------------------------

def seg_loss(logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    return dice_loss(logits, masks) + focal_loss(logits, masks)


def random_training_prompts(masks: np.ndarray, rng: np.random.Generator,
                            n_points: int | None = None) -> list[PromptSet]:
    """One prompt mode per batch (points with a shared count, box or noisy box)."""
    mode = rng.choice(["points", "points", "box", "noise_box"])
    n = int(n_points if n_points is not None else rng.integers(1, 6))
    seeds = rng.integers(0, 2**31, size=len(masks))
    if mode == "points":
        n = min([n] + [int(_fg(m).sum()) for m in masks])
    return [make_prompt(m, str(mode), int(s), n_points=n) for m, s in zip(masks, seeds)]


def pretrain_segmenter(p: ParamStore, images: np.ndarray, masks: np.ndarray, steps: int,
                       seed: int, *, batch_size: int = 16, lr: float = 1e-3,
                       image_size: int = 64) -> tuple[ParamStore, list[float]]:
    """Joint clean-data training of encoder, prompt encoder and decoder.

    ``images`` (N, H, W, 3) uint8/float, ``masks`` (N, H, W) binary. The
    returned store has encoder and prompt-encoder entries frozen.
    """
    out = p.copy()
    rng = np.random.default_rng(seed)
    x_all = to_tensor_images(images)
    m_all = torch.from_numpy((np.asarray(masks) > 0).astype(np.float32))
    fg_masks = np.asarray(masks) > 0

    def loss_fn(step):
        idx = rng.integers(0, len(x_all), size=batch_size)
        prompts = random_training_prompts(fg_masks[idx], rng)
        z = encode_image(out, x_all[idx])
        return seg_loss(segment(out, z, prompts, image_size), m_all[idx])

    curve = nn.fit(out, loss_fn, steps, lr=lr, weight_decay=0.0)
    out.freeze(encoder_names(out) + prompt_encoder_names(out))
    return out, curve
