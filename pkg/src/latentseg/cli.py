"""Command line entry point: ``latentseg <verb> [--config FILE] [--set key=value ...]``.

The config file is the source of truth; ``--set`` (any dotted RunConfig
field) and the shortcut flags override it.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation, report, synth
from .config import PRESET_GROUPS, PRESETS, RunConfig
from .params import load_checkpoint, save_checkpoint
from .pipeline import (EvalReport, Stores, evaluate, infer, pretrain_denoiser_stage,
                       pretrain_seg_stage, train_decoder_stage, train_unet_stage)
from .seg import PromptSet

SHORTCUTS = {            # flag -> dotted config field
    "seed": "seed", "n1": "n1", "n2": "n2", "lr": "lr", "batch_size": "batch_size",
    "decoder_mode": "decoder_mode", "prompt_mode": "prompt_mode", "n_points": "n_points",
    "data_root": "data.root", "gamma": "dae.gamma",
}


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        overrides[key] = value
    for flag, key in SHORTCUTS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    return cfg.replace(**overrides)


def _manifest(cfg: RunConfig):
    root = Path(cfg.data.root)
    return synth.DatasetManifest.load(root / "manifest.jsonl"), root


def _write_curve(path: Path, curve) -> None:
    path.write_text(json.dumps([float(v) for v in curve]))


def cmd_synth(cfg, args):
    root = Path(cfg.data.root)
    synth.build_dataset(cfg.data.n_train, cfg.data.n_test, seed=cfg.seed, out_dir=root,
                        size=cfg.data.size)


def cmd_pretrain_denoiser(cfg, args):
    store, curve = pretrain_denoiser_stage(cfg)
    out = Path(args.out)
    save_checkpoint(out, store, config_hash=cfg.config_hash(), stage="pretrain-denoiser",
                    iteration=len(curve))
    _write_curve(out.with_suffix(".curve.json"), curve)
    print(f"denoiser loss {np.mean(curve[:50]):.4f} -> {np.mean(curve[-50:]):.4f}")


def cmd_pretrain_seg(cfg, args):
    man, root = _manifest(cfg)
    train = synth.load_split(man, root, "train")
    store, curve = pretrain_seg_stage(cfg, train)
    out = Path(args.out)
    save_checkpoint(out, store, config_hash=cfg.config_hash(), stage="pretrain-seg",
                    iteration=len(curve))
    _write_curve(out.with_suffix(".curve.json"), curve)
    print(f"segmenter loss {np.mean(curve[:50]):.4f} -> {np.mean(curve[-50:]):.4f}")


def cmd_train_unet(cfg, args):
    man, root = _manifest(cfg)
    train = synth.load_split(man, root, "train")
    seg_store, _ = load_checkpoint(args.seg)
    unet, _ = load_checkpoint(args.unet)
    stores, curve = train_unet_stage(cfg, Stores(seg_store), unet, train)
    stores.save(args.out, cfg, "train-unet", len(curve))
    _write_curve(Path(args.out) / "curve.json", curve)
    print(f"stage 1 done: {len(curve)} steps -> {args.out}")


def cmd_train_decoder(cfg, args):
    man, root = _manifest(cfg)
    train = synth.load_split(man, root, "train")
    stores, curve = train_decoder_stage(cfg, Stores.load(args.stores, cfg), train)
    stores.save(args.out, cfg, "train-decoder", len(curve))
    _write_curve(Path(args.out) / "curve.json", curve)
    print(f"stage 2 done: {len(curve)} steps -> {args.out}")


def cmd_eval(cfg, args):
    man, root = _manifest(cfg)
    if args.stores:
        stores = Stores.load(args.stores, cfg)
    else:
        seg_store, _ = load_checkpoint(args.seg)
        stores, cfg = Stores(seg_store), cfg.replace(**{"ablation.gle": False})
    modes = args.modes.split(",") if args.modes else [cfg.prompt_mode]
    rep = evaluate(cfg, stores, man, root, split=args.split, prompt_modes=modes,
                   out_path=args.out)
    for key, agg in rep.aggregates().items():
        print(f"{key:14s} iou {agg['iou']:.4f} dice {agg['dice']:.4f} "
              f"pa {agg['pixel_acc']:.4f} (n={agg['n']})")
    if rep.missing:
        print(f"missing: {rep.missing}")


def cmd_infer(cfg, args):
    stores = Stores.load(args.stores, cfg)
    image = synth.read_png(args.image)
    text = args.prompt if args.prompt.lstrip().startswith("{") else Path(args.prompt).read_text()
    prompt = PromptSet.from_dict(json.loads(text))
    masks, scores = infer(cfg, stores, image, prompt)
    synth.write_png(Path(args.out), masks[0].astype(np.uint8) * 255)
    extra = "" if scores is None else f" (degradation score {scores[0]:.4f})"
    print(f"mask -> {args.out}{extra}")


def cmd_ablate(cfg, args):
    man, root = _manifest(cfg)
    train = synth.load_split(man, root, "train")
    test = synth.load_split(man, root, "test")
    seg_store, _ = load_checkpoint(args.seg)
    unet, _ = load_checkpoint(args.unet)
    reports = ablation.run_presets(cfg, args.presets.split(","), seg_store, unet, train, test,
                                   man, root, out_dir=args.out)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    print(report.table(reports))


def cmd_report(cfg, args):
    reports = {Path(p).stem: EvalReport.load(p) for p in args.reports}
    path = report.write_report(reports, args.out)
    print(path.read_text())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentseg", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any dotted config field, repeatable")
        for flag in SHORTCUTS:
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None)
        p.set_defaults(fn=fn)
        return p

    verb("synth", cmd_synth, "build the synthetic degraded dataset")
    verb("pretrain-denoiser", cmd_pretrain_denoiser, "toy-pretrain the narrow denoiser") \
        .add_argument("--out", required=True, help="checkpoint stem")
    verb("pretrain-seg", cmd_pretrain_seg, "pretrain the toy segmenter on clean images") \
        .add_argument("--out", required=True, help="checkpoint stem")
    p = verb("train-unet", cmd_train_unet, "stage 1: LoRA + score module")
    p.add_argument("--seg", required=True)
    p.add_argument("--unet", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p = verb("train-decoder", cmd_train_decoder, "stage 2: decoder or mask token")
    p.add_argument("--stores", required=True)
    p.add_argument("--out", required=True)
    p = verb("eval", cmd_eval, "evaluate stores (or a bare segmenter) on a split")
    p.add_argument("--stores", help="directory written by train-unet/train-decoder")
    p.add_argument("--seg", help="bare segmenter checkpoint: evaluates the baseline")
    p.add_argument("--split", default="test")
    p.add_argument("--modes", help="comma separated: points,box,noise_box")
    p.add_argument("--out", required=True, help="report JSON path")
    p = verb("infer", cmd_infer, "segment one image with a prompt file")
    p.add_argument("--stores", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True, help='inline JSON or a JSON file, e.g. {"kind": "box", "box": [r0, c0, r1, c1]}')
    p.add_argument("--out", required=True, help="mask PNG")
    p = verb("ablate", cmd_ablate, "run ablation presets (stage 1 only)")
    p.add_argument("--seg", required=True)
    p.add_argument("--unet", required=True)
    p.add_argument("--presets", default="components",
                   help=f"comma separated presets or groups; groups: {sorted(PRESET_GROUPS)}; "
                        f"presets: {sorted(PRESETS)}")
    p.add_argument("--out", required=True, help="directory for per-preset reports")
    p = verb("report", cmd_report, "tables and plots from saved reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    cfg = load_config(args)
    args.fn(cfg, args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
