"""Procedural clean segmentation samples and multi-level mixed degradations.

Images are handled as unit-range float32 arrays (H, W, 3) during degradation
and as 8-bit arrays on disk. A degradation is fully described by a
:class:`DegradationRecipe`; :func:`apply_recipe` replays one bit-exactly.

Levels 1/2/3 differ by the internal down-sampling rate (1, 2, 4) and by the
JPEG quality range.
"""
from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable

import cv2
import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

log = logging.getLogger(__name__)

GENERATOR_VERSION = "lqseg-synth/2"
LEVELS = (1, 2, 3)
KERNEL_KINDS = ("gaussian", "generalized_gaussian", "plateau")
RESIZE_ALGOS = {"bilinear": cv2.INTER_LINEAR, "bicubic": cv2.INTER_CUBIC, "area": cv2.INTER_AREA}


# -- clean samples ----------------------------------------------------------

def _texture(rng, size, sigma, amp):
    t = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), (sigma, sigma, 0))
    return amp * t / (t.std() + 1e-8)


def _draw_shape(rng, size, ss=4):
    """Anti-aliased coverage map of one random ellipse, rectangle or polygon."""
    big = size * ss
    canvas = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(canvas)
    kind = rng.choice(["ellipse", "rectangle", "polygon"])
    cy, cx = rng.uniform(0.2, 0.8, size=2) * big
    ry, rx = rng.uniform(0.08, 0.25, size=2) * big
    if kind == "ellipse":
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    elif kind == "rectangle":
        draw.rectangle([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    else:
        n = int(rng.integers(3, 8))
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        rad = rng.uniform(0.5, 1.0, size=n)
        pts = [(float(cx + rx * r * np.cos(a)), float(cy + ry * r * np.sin(a)))
               for a, r in zip(ang, rad)]
        draw.polygon(pts, fill=255)
    cov = np.asarray(canvas, dtype=np.float64) / 255.0
    return cov.reshape(size, ss, size, ss).mean(axis=(1, 3))


def gen_shape_sample(seed: int, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Random shapes over a textured background.

    Returns an (size, size, 3) uint8 image and an (size, size) uint8 mask with
    values {0, 255} (union of the shapes, coverage >= 0.5).
    """
    if size < 32:
        raise ValueError("size must be >= 32")
    rng = np.random.default_rng(seed)
    while True:
        bg_color = rng.uniform(0.15, 0.85, size=3)
        yy, xx = np.mgrid[0:size, 0:size] / size
        grad = rng.uniform(-0.15, 0.15, size=2)
        img = (bg_color + (grad[0] * yy + grad[1] * xx)[..., None]
               + _texture(rng, size, rng.uniform(1.0, 3.0), rng.uniform(0.03, 0.12)))
        alpha_union = np.zeros((size, size))
        for _ in range(int(rng.integers(1, 4))):
            cov = _draw_shape(rng, size)
            fill = rng.uniform(0, 1, size=3)
            while np.abs(fill - bg_color).max() < 0.3:
                fill = rng.uniform(0, 1, size=3)
            fill_img = fill + _texture(rng, size, rng.uniform(0.8, 2.0), rng.uniform(0.02, 0.08))
            img = img * (1 - cov[..., None]) + fill_img * cov[..., None]
            alpha_union = np.maximum(alpha_union, cov)
        mask = alpha_union >= 0.5
        frac = mask.mean()
        if 0.03 <= frac <= 0.6:
            break
    image = np.clip(np.round(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8)
    return image, (mask * 255).astype(np.uint8)


# -- degradation primitives -------------------------------------------------

def to_float(image) -> np.ndarray:
    a = np.asarray(image)
    if a.dtype == np.uint8:
        return a.astype(np.float32) / 255.0
    return a.astype(np.float32)


def to_uint8(image) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def make_blur_kernel(kind: str, kernel_size: int, sigma: float, shape_beta: float = 1.0
                     ) -> np.ndarray:
    """Isotropic blur kernel normalised to sum 1.

    gaussian ``exp(-q)``, generalized_gaussian ``exp(-q**beta)``, plateau
    ``1 / (1 + q**beta)`` with ``q = r^2 / (2 sigma^2)``.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if sigma <= 0 or shape_beta <= 0:
        raise ValueError("sigma and shape_beta must be positive")
    half = kernel_size // 2
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    q = (yy ** 2 + xx ** 2) / (2.0 * sigma ** 2)
    if kind == "gaussian":
        k = np.exp(-q)
    elif kind == "generalized_gaussian":
        k = np.exp(-q ** shape_beta)
    elif kind == "plateau":
        k = 1.0 / (1.0 + q ** shape_beta)
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    return k / k.sum()


def apply_blur(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    img = to_float(image)
    kh, kw = kernel.shape
    if kh > img.shape[0] or kw > img.shape[1]:
        raise ValueError(f"kernel {kernel.shape} larger than image {img.shape[:2]}")
    k = kernel[..., None] if img.ndim == 3 else kernel
    return ndimage.convolve(img.astype(np.float64), k, mode="reflect").astype(np.float32)


def apply_resize(image: np.ndarray, scale: float | None = None, algo: str = "bilinear",
                 size: tuple[int, int] | None = None) -> np.ndarray:
    """Resample by ``scale`` or to an explicit ``size`` (rows, cols)."""
    img = to_float(image)
    if algo not in RESIZE_ALGOS:
        raise ValueError(f"unknown resize algorithm {algo!r}")
    if size is None:
        if scale is None or scale <= 0:
            raise ValueError("scale must be positive")
        size = (int(round(img.shape[0] * scale)), int(round(img.shape[1] * scale)))
    h, w = size
    if h < 1 or w < 1:
        raise ValueError(f"degenerate output size {size}")
    if (h, w) == img.shape[:2]:
        return img.copy()
    out = cv2.resize(img, (w, h), interpolation=RESIZE_ALGOS[algo])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_noise(image: np.ndarray, kind: str, strength: float, seed: int) -> np.ndarray:
    """Gaussian (std ``strength``) or Poisson (rate ``image / strength**2``) noise."""
    if strength <= 0:
        raise ValueError("strength must be positive")
    img = to_float(image).astype(np.float64)
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        out = img + rng.normal(0.0, strength, size=img.shape)
    elif kind == "poisson":
        lam = 1.0 / strength ** 2
        out = rng.poisson(img * lam) / lam
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_jpeg(image: np.ndarray, quality: int) -> np.ndarray:
    if not 1 <= int(quality) <= 100:
        raise ValueError("JPEG quality must lie in [1, 100]")
    u8 = to_uint8(to_float(image))
    # full-resolution chroma, so that quality alone controls the loss
    params = [cv2.IMWRITE_JPEG_QUALITY, int(quality),
              cv2.IMWRITE_JPEG_SAMPLING_FACTOR, cv2.IMWRITE_JPEG_SAMPLING_FACTOR_444]
    ok, buf = cv2.imencode(".jpg", u8[..., ::-1], params)
    if not ok:
        raise RuntimeError("JPEG encoding failed")
    dec = cv2.imdecode(buf, cv2.IMREAD_COLOR)
    if dec is None:
        raise RuntimeError("JPEG decoding failed")
    return dec[..., ::-1].astype(np.float32) / 255.0


def psnr(a, b) -> float:
    x, y = to_float(a).astype(np.float64), to_float(b).astype(np.float64)
    mse = np.mean((x - y) ** 2)
    return float("inf") if mse == 0 else float(10 * np.log10(1.0 / mse))


# -- recipes ----------------------------------------------------------------

@dataclass
class DegradationConfig:
    """Sampling ranges; values are desk-scale defaults, not prescribed anywhere."""

    blur_prob: float = 0.7
    noise_prob: float = 0.7
    jpeg_prob: float = 0.7
    kernel_probs: tuple[float, float, float] = (0.6, 0.2, 0.2)
    kernel_sizes: tuple[int, ...] = (7, 9, 11, 13, 15, 17, 19, 21)
    sigma_range: tuple[float, float] = (0.2, 3.0)
    beta_range: tuple[float, float] = (0.5, 4.0)
    noise_range: tuple[float, float] = (0.01, 0.1)
    poisson_prob: float = 0.4
    jpeg_range: dict = field(default_factory=lambda: {1: (30, 95), 2: (20, 78), 3: (10, 60)})
    rates: dict = field(default_factory=lambda: {1: 1, 2: 2, 3: 4})


@dataclass
class DegradationRecipe:
    level: int
    ops: list[dict]
    seed: int

    @property
    def rate(self) -> int:
        return int(round(1.0 / self.ops[0]["scale"]))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str | dict) -> "DegradationRecipe":
        d = json.loads(text) if isinstance(text, str) else text
        return cls(int(d["level"]), [dict(op) for op in d["ops"]], int(d["seed"]))


def sample_recipe(level: int, seed: int, shape: tuple[int, int],
                  cfg: DegradationConfig | None = None) -> DegradationRecipe:
    """Resize-down first, a random permutation of blur/noise/JPEG (each
    included with its probability), then resize back to ``shape``."""
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level}")
    cfg = cfg or DegradationConfig()
    rng = np.random.default_rng(seed)
    algos = list(RESIZE_ALGOS)
    rate = cfg.rates[level]
    ops = [{"op": "resize", "scale": 1.0 / rate, "algo": str(rng.choice(algos))}]
    small = min(int(round(shape[0] / rate)), int(round(shape[1] / rate)))
    middle = []
    if rng.random() < cfg.blur_prob:
        # kernel size and sigma are drawn in full-resolution pixels, then
        # converted to the working resolution after the down-resize
        kind = str(rng.choice(KERNEL_KINDS, p=cfg.kernel_probs))
        ksize = int(rng.choice(cfg.kernel_sizes)) // rate
        ksize = max(3, min(ksize - (1 - ksize % 2), small - (1 - small % 2)))
        middle.append({"op": "blur", "kind": kind, "kernel_size": ksize,
                       "sigma": float(rng.uniform(*cfg.sigma_range)) / rate,
                       "shape_beta": float(rng.uniform(*cfg.beta_range))})
    if rng.random() < cfg.noise_prob:
        middle.append({"op": "noise",
                       "kind": "poisson" if rng.random() < cfg.poisson_prob else "gaussian",
                       "strength": float(rng.uniform(*cfg.noise_range)),
                       "seed": int(rng.integers(0, 2**31 - 1))})
    if rng.random() < cfg.jpeg_prob:
        lo, hi = cfg.jpeg_range[level]
        middle.append({"op": "jpeg", "quality": int(rng.integers(lo, hi + 1))})
    ops += [middle[i] for i in rng.permutation(len(middle))]
    ops.append({"op": "resize", "size": [int(shape[0]), int(shape[1])],
                "algo": str(rng.choice(algos))})
    return DegradationRecipe(level, ops, int(seed))


def apply_recipe(image, recipe: DegradationRecipe) -> np.ndarray:
    img = to_float(image)
    for op in recipe.ops:
        kind = op["op"]
        if kind == "resize":
            if "size" in op:
                img = apply_resize(img, algo=op["algo"], size=tuple(op["size"]))
            else:
                img = apply_resize(img, op["scale"], op["algo"])
        elif kind == "blur":
            k = make_blur_kernel(op["kind"], op["kernel_size"], op["sigma"], op["shape_beta"])
            img = apply_blur(img, k)
        elif kind == "noise":
            img = apply_noise(img, op["kind"], op["strength"], op["seed"])
        elif kind == "jpeg":
            img = apply_jpeg(img, op["quality"])
        else:
            raise ValueError(f"unknown op {kind!r}")
    return img


def degrade(image, level: int, seed: int, cfg: DegradationConfig | None = None
            ) -> tuple[np.ndarray, DegradationRecipe]:
    """Sample a level-``level`` recipe and apply it; returns (float LQ image, recipe)."""
    recipe = sample_recipe(level, seed, np.shape(image)[:2], cfg)
    return apply_recipe(image, recipe), recipe


# -- dataset ----------------------------------------------------------------

@dataclass
class DatasetManifest:
    records: list[dict]
    seed: int
    version: str = GENERATOR_VERSION
    size: int = 64

    def header(self) -> dict:
        return {"kind": "header", "seed": self.seed, "version": self.version, "size": self.size}

    def to_text(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "DatasetManifest":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows or rows[0].get("kind") != "header":
            raise ValueError("manifest lacks a header record")
        head = rows[0]
        return cls(rows[1:], int(head["seed"]), head["version"], int(head["size"]))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.parse(Path(path).read_text())

    def split(self, name: str, levels: Iterable[int] | None = None) -> list[dict]:
        levels = None if levels is None else set(levels)
        return [r for r in self.records
                if r["split"] == name and (levels is None or r["level"] in levels)]


def sample_seed(global_seed: int, split: str, index: int) -> int:
    code = {"train": 0, "test": 1}[split]
    return int(np.random.SeedSequence([int(global_seed), code, int(index)]).generate_state(1)[0])


def write_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG")


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def build_dataset(n_train: int, n_test: int, levels: Iterable[int] = LEVELS, seed: int = 0,
                  out_dir: str | Path = "lqseg", size: int = 64,
                  cfg: DegradationConfig | None = None) -> DatasetManifest:
    """Write HQ/LQ/mask PNGs and ``manifest.jsonl`` under ``out_dir``.

    Files are staged in a sibling temporary directory and moved into place
    only when every sample has been written.
    """
    out_dir = Path(out_dir)
    levels = sorted(set(levels))
    if any(lv not in LEVELS for lv in levels):
        raise ValueError(f"levels must be drawn from {LEVELS}")
    if out_dir.exists() and any(out_dir.iterdir()):
        raise FileExistsError(f"{out_dir} exists and is not empty")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=out_dir.name + ".partial-", dir=out_dir.parent))
    records = []
    try:
        for split, n in (("train", n_train), ("test", n_test)):
            (stage / split).mkdir()
            for i in range(n):
                sid = f"{split}_{i:05d}"
                s = sample_seed(seed, split, i)
                hq, mask = gen_shape_sample(s, size)
                write_png(stage / split / f"{sid}_hq.png", hq)
                write_png(stage / split / f"{sid}_mask.png", mask)
                for lv in levels:
                    lq, recipe = degrade(hq, lv, (s + 7919 * lv) % 2**32, cfg)
                    write_png(stage / split / f"{sid}_lq{lv}.png", to_uint8(lq))
                    records.append({
                        "id": sid, "split": split, "level": lv,
                        "hq": f"{split}/{sid}_hq.png", "lq": f"{split}/{sid}_lq{lv}.png",
                        "mask": f"{split}/{sid}_mask.png",
                        "recipe": json.loads(recipe.to_json()),
                    })
        manifest = DatasetManifest(records, int(seed), GENERATOR_VERSION, size)
        (stage / "manifest.jsonl").write_text(manifest.to_text())
        out_dir.mkdir(exist_ok=True)
        for entry in stage.iterdir():
            os.replace(entry, out_dir / entry.name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    log.info("wrote %d records to %s", len(records), out_dir)
    return manifest


@dataclass
class SplitArrays:
    """In-memory view of one split: HQ, masks and LQ images per level."""

    ids: list[str]
    hq: np.ndarray
    masks: np.ndarray
    lq: dict[int, np.ndarray]
    missing: list[str] = field(default_factory=list)


def load_split(manifest: DatasetManifest, root: str | Path, split: str,
               levels: Iterable[int] | None = None) -> SplitArrays:
    """Read every sample of ``split``; samples with unreadable files are skipped
    and listed in ``missing``."""
    root = Path(root)
    recs = manifest.split(split, levels)
    levels = sorted({r["level"] for r in recs})
    by_id: dict[str, dict[int, dict]] = {}
    for r in recs:
        by_id.setdefault(r["id"], {})[r["level"]] = r
    ids, hq, masks, missing = [], [], [], []
    lq = {lv: [] for lv in levels}
    for sid in sorted(by_id):
        rows = by_id[sid]
        try:
            first = next(iter(rows.values()))
            h = read_png(root / first["hq"])
            m = read_png(root / first["mask"])
            l = {lv: read_png(root / rows[lv]["lq"]) for lv in levels}
        except (OSError, KeyError) as exc:
            missing.append(f"{sid}: {exc}")
            continue
        ids.append(sid)
        hq.append(h)
        masks.append(m)
        for lv in levels:
            lq[lv].append(l[lv])
    empty = (0, manifest.size, manifest.size)
    return SplitArrays(
        ids,
        np.stack(hq) if hq else np.zeros(empty + (3,), np.uint8),
        np.stack(masks) if masks else np.zeros(empty, np.uint8),
        {lv: np.stack(v) if v else np.zeros(empty + (3,), np.uint8) for lv, v in lq.items()},
        missing,
    )
