"""Two-stage training, inference and evaluation of the enhanced segmenter."""
from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import denoiser as den
from . import dpm as dpm_mod
from . import nn
from . import seg
from .config import RunConfig
from .losses import dice_coef, iou, mse_loss, pixel_acc
from .params import ParamStore, load_checkpoint, save_checkpoint
from .schedule import eta_from_score, gle_dae, gle_fda
from .synth import DatasetManifest, SplitArrays, load_split

log = logging.getLogger(__name__)

CLEAN = 0                      # evaluation "level" for undegraded images
PROMPT_MODES = ("points", "box", "noise_box")


@dataclass
class Stores:
    """Everything a forward pass needs. ``unet``/``dpm`` are None before stage 1."""

    seg: ParamStore
    unet: ParamStore | None = None
    dpm: ParamStore | None = None

    def copy(self) -> "Stores":
        return Stores(self.seg.copy(),
                      None if self.unet is None else self.unet.copy(),
                      None if self.dpm is None else self.dpm.copy())

    def save(self, directory: str | Path, cfg: RunConfig, stage: str, iteration: int = 0) -> None:
        directory = Path(directory)
        for name in ("seg", "unet", "dpm"):
            store = getattr(self, name)
            if store is not None:
                save_checkpoint(directory / name, store, config_hash=cfg.config_hash(),
                                stage=stage, iteration=iteration)

    @classmethod
    def load(cls, directory: str | Path, cfg: RunConfig) -> "Stores":
        directory = Path(directory)
        seg_store, _ = load_checkpoint(directory / "seg", seg.init_segmenter(cfg.seg, cfg.seed))
        unet = dpm = None
        if (directory / "unet.json").exists():
            unet, _ = load_checkpoint(directory / "unet")
        if (directory / "dpm.json").exists():
            dpm, _ = load_checkpoint(directory / "dpm", new_dpm(cfg))
        return cls(seg_store, unet, dpm)


# -- construction -----------------------------------------------------------

def new_dpm(cfg: RunConfig) -> ParamStore:
    return dpm_mod.init_dpm(cfg.seg.seg_channels, cfg.seed + 3, cfg.dpm_aggregate)


def pretrain_denoiser_stage(cfg: RunConfig) -> tuple[ParamStore, list[float]]:
    """Toy stand-in for a pretrained latent diffusion U-Net (narrow channels)."""
    pc = cfg.pretrain
    corpus = den.smooth_field_corpus(pc.denoiser_corpus, cfg.unet.base_channels_in_out,
                                     cfg.seg.image_size // cfg.seg.stride, seed=cfg.seed + 1)
    base = den.init_mini_unet(cfg.unet, cfg.seed)
    return den.pretrain_denoiser(base, cfg.build_schedule(), corpus, pc.denoiser_steps,
                                 cfg.seed + 2, lr=pc.denoiser_lr)


def pretrain_seg_stage(cfg: RunConfig, train: SplitArrays) -> tuple[ParamStore, list[float]]:
    """Toy stand-in for a pretrained promptable segmenter, fitted on clean images."""
    pc = cfg.pretrain
    p = seg.init_segmenter(cfg.seg, cfg.seed)
    return seg.pretrain_segmenter(p, train.hq, train.masks, pc.seg_steps, cfg.seed + 4,
                                  batch_size=pc.seg_batch_size, lr=pc.seg_lr,
                                  image_size=cfg.seg.image_size)


def prepare_unet(cfg: RunConfig, base: ParamStore) -> ParamStore:
    """Widen the pretrained denoiser to the segmenter's channels and attach LoRA."""
    k, rem = divmod(cfg.seg.seg_channels, cfg.unet.base_channels_in_out)
    if rem:
        raise ValueError("segmenter channels must be a multiple of the denoiser's")
    wide = den.expand_channels(base, k, cfg.ablation.cre, seed=cfg.seed + 5)
    return den.attach_lora(wide, cfg.lora, seed=cfg.seed + 6)


# -- enhancement ------------------------------------------------------------

def enhance(cfg: RunConfig, stores: Stores, z_l: torch.Tensor, sched=None
            ) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Enhanced latent and (when the score module is active) the scores."""
    ab = cfg.ablation
    if not ab.gle:
        return z_l, None
    if stores.unet is None:
        raise ValueError("enhancement requested but no denoiser in stores")
    sched = sched or cfg.build_schedule()
    dae = cfg.dae_range(sched)
    denoise = den.make_denoiser(stores.unet)
    if not ab.dae:
        return gle_fda(z_l, dae, denoise, sched), None
    s = dpm_mod.predict_score(stores.dpm, z_l)
    eta = s if ab.eta_mode == "direct" else eta_from_score(s, dae)
    return gle_dae(z_l, eta, dae, denoise), s


@torch.no_grad()
def encode_all(seg_store: ParamStore, images: np.ndarray, batch: int = 64) -> torch.Tensor:
    out = [seg.encode_image(seg_store, seg.to_tensor_images(images[i:i + batch]))
           for i in range(0, len(images), batch)]
    return torch.cat(out) if out else torch.zeros(0)


@torch.no_grad()
def enhance_all(cfg: RunConfig, stores: Stores, z: torch.Tensor, batch: int = 64):
    sched = cfg.build_schedule()
    zs, ss = [], []
    for i in range(0, len(z), batch):
        zh, s = enhance(cfg, stores, z[i:i + batch], sched)
        zs.append(zh)
        if s is not None:
            ss.append(s)
    return torch.cat(zs), (torch.cat(ss) if ss else None)


# -- stage 1 ----------------------------------------------------------------

def train_unet_stage(cfg: RunConfig, stores: Stores, base_unet: ParamStore,
                     train: SplitArrays) -> tuple[Stores, list[float]]:
    """Fit LoRA (plus the score module, if enabled) with the latent reconstruction loss.

    The encoder is frozen, so latents of the whole split are computed once
    up front. Each batch draws sample indices and, independently, a level
    from the uniform mixture of available levels.
    """
    out = stores.copy()
    if not cfg.ablation.gle:
        return out, []
    out.unet = prepare_unet(cfg, base_unet)
    out.dpm = new_dpm(cfg) if cfg.ablation.dae else None
    work = out.unet if out.dpm is None else out.unet.merged(out.dpm)

    levels = sorted(train.lq)
    z_h = encode_all(out.seg, train.hq)
    z_l = torch.stack([encode_all(out.seg, train.lq[lv]) for lv in levels])   # (L, N, C, h, w)
    sched = cfg.build_schedule()
    rng = np.random.default_rng(cfg.seed + 7)
    n = len(train.ids)

    def loss_fn(step):
        idx = rng.integers(0, n, size=cfg.batch_size)
        lv = rng.integers(0, len(levels), size=cfg.batch_size)
        view = Stores(out.seg, work, work if out.dpm is not None else None)
        z_hat, _ = enhance(cfg, view, z_l[lv, idx], sched)
        return mse_loss(z_hat, z_h[idx])

    curve = nn.fit(work, loss_fn, cfg.n1, lr=cfg.lr)
    out.unet = work.subset(den.PREFIX)
    if out.dpm is not None:
        out.dpm = work.subset(dpm_mod.PREFIX)
    return out, curve


# -- stage 2 ----------------------------------------------------------------

def train_decoder_stage(cfg: RunConfig, stores: Stores, train: SplitArrays
                        ) -> tuple[Stores, list[float]]:
    """Fine-tune the decoder (FT-D) or only its mask token (FT-T) on enhanced latents.

    Denoiser and score module are frozen here, so enhanced latents are a
    fixed function of the input and are computed once.
    """
    out = stores.copy()
    levels = sorted(train.lq)
    z_hat = torch.stack([enhance_all(cfg, out, encode_all(out.seg, train.lq[lv]))[0]
                         for lv in levels])
    masks = np.asarray(train.masks) > 0
    m_all = torch.from_numpy(masks.astype(np.float32))
    rng = np.random.default_rng(cfg.seed + 8)
    n = len(train.ids)
    names = seg.decoder_names(out.seg, cfg.decoder_mode)

    def loss_fn(step):
        idx = rng.integers(0, n, size=cfg.batch_size)
        lv = rng.integers(0, len(levels), size=cfg.batch_size)
        prompts = seg.random_training_prompts(masks[idx], rng)
        logits = seg.segment(out.seg, z_hat[lv, idx], prompts, cfg.seg.image_size)
        return seg.seg_loss(logits, m_all[idx])

    curve = nn.fit(out.seg, loss_fn, cfg.n2, lr=cfg.lr, names=names)
    return out, curve


# -- inference --------------------------------------------------------------

@torch.no_grad()
def infer(cfg: RunConfig, stores: Stores, images, prompts: Sequence[seg.PromptSet] | seg.PromptSet
          ) -> tuple[np.ndarray, np.ndarray | None]:
    """Binary masks (B, H, W) for one image (H, W, 3) or a batch, plus scores if any."""
    single = isinstance(prompts, seg.PromptSet)
    if single:
        prompts = [prompts]
    x = seg.to_tensor_images(images)
    if len(prompts) != x.shape[0]:
        raise ValueError(f"{x.shape[0]} images but {len(prompts)} prompts")
    size = cfg.seg.image_size
    for pr in prompts:
        _validate_prompt(pr, size)
    z = seg.encode_image(stores.seg, x, size)
    z_hat, s = enhance(cfg, stores, z)
    masks = seg.binarize(seg.segment(stores.seg, z_hat, prompts, size))
    return masks, (None if s is None else s.numpy())


def _validate_prompt(pr: seg.PromptSet, size: int) -> None:
    coords = np.asarray(pr.coords(), dtype=float)
    if coords.size == 0:
        raise ValueError("prompt has no points or box")
    if not np.all(np.isfinite(coords)) or coords.min() < 0 or coords.max() > size - 1:
        raise ValueError(f"prompt coordinates outside the {size}x{size} frame")


# -- evaluation -------------------------------------------------------------

METRICS = ("iou", "dice", "pixel_acc")


@dataclass
class EvalReport:
    config_hash: str
    split: str
    rows: list[dict]
    missing: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    def select(self, level: int | None = None, mode: str | None = None) -> list[dict]:
        return [r for r in self.rows
                if (level is None or r["level"] == level) and (mode is None or r["mode"] == mode)]

    def mean(self, metric: str = "iou", level: int | None = None, mode: str | None = None) -> float:
        vals = [r[metric] for r in self.select(level, mode) if r[metric] is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def levels(self) -> list[int]:
        return sorted({r["level"] for r in self.rows})

    def modes(self) -> list[str]:
        return sorted({r["mode"] for r in self.rows})

    def aggregates(self) -> dict[str, dict]:
        """``"<level>/<mode>" -> {metric: mean, "n": count}``."""
        out = {}
        for lv in self.levels():
            for mode in self.modes():
                rows = self.select(lv, mode)
                if rows:
                    out[f"{lv}/{mode}"] = {m: self.mean(m, lv, mode) for m in METRICS}
                    out[f"{lv}/{mode}"]["n"] = len(rows)
        return out

    def mean_scores(self) -> dict[int, float]:
        """Mean degradation score per level (empty without a score module)."""
        out = {}
        for lv in self.levels():
            vals = [r["score"] for r in self.select(lv) if r["score"] is not None]
            if vals:
                out[lv] = float(np.mean(vals))
        return out

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "split": self.split,
                "wall_time": self.wall_time, "missing": self.missing,
                "aggregates": self.aggregates(),
                "mean_scores": {str(k): v for k, v in self.mean_scores().items()},
                "rows": self.rows}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls(d["config_hash"], d["split"], d["rows"], d.get("missing", []),
                   d.get("wall_time", 0.0))


def prompt_seed(global_seed: int, sample_id: str, mode: str) -> int:
    """Evaluation prompts depend only on (seed, sample id, mode)."""
    return (zlib.crc32(f"{sample_id}/{mode}".encode()) + 1_000_003 * int(global_seed)) % 2**31


def evaluate(cfg: RunConfig, stores: Stores, manifest: DatasetManifest, root: str | Path,
             split: str = "test", prompt_modes: Iterable[str] = ("points",),
             levels: Iterable[int] = (CLEAN, 1, 2, 3), n_points: int | None = None,
             batch: int = 50, out_path: str | Path | None = None,
             data: SplitArrays | None = None) -> EvalReport:
    """Per-sample inference on every (level, prompt mode); level 0 is the clean image.

    Unreadable samples are skipped and listed in the report's ``missing``.
    ``data`` may be passed to reuse an already loaded split.
    """
    t0 = time.perf_counter()
    levels = list(levels)
    lq_levels = [lv for lv in levels if lv != CLEAN]
    if data is None:
        data = load_split(manifest, root, split, lq_levels)
    n_points = cfg.n_points if n_points is None else n_points
    masks = np.asarray(data.masks) > 0
    rows = []
    for mode in prompt_modes:
        if mode not in PROMPT_MODES:
            raise ValueError(f"unknown prompt mode {mode!r}")
        prompts = [seg.make_prompt(m, mode, prompt_seed(cfg.seed, sid, mode), n_points=n_points,
                                   noise_scale=cfg.noise_scale)
                   for sid, m in zip(data.ids, masks)]
        for lv in levels:
            images = data.hq if lv == CLEAN else data.lq[lv]
            for i in range(0, len(images), batch):
                pred, score = infer(cfg, stores, images[i:i + batch], prompts[i:i + batch])
                for j, mp in enumerate(pred):
                    g = masks[i + j]
                    rows.append({"id": data.ids[i + j], "level": lv, "mode": mode,
                                 "iou": iou(mp, g), "dice": dice_coef(mp, g),
                                 "pixel_acc": pixel_acc(mp, g),
                                 "score": None if score is None else float(score[j])})
    rows.sort(key=lambda r: (r["mode"], r["level"], r["id"]))
    report = EvalReport(cfg.config_hash(), split, rows, list(data.missing),
                        time.perf_counter() - t0)
    if out_path is not None:
        report.save(out_path)
    return report
