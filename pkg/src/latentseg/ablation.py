"""Preset sweeps: stage 1 only, scored with the untouched baseline decoder."""
from __future__ import annotations

from pathlib import Path
from typing import Iterable

from .config import PRESET_GROUPS, PRESETS, RunConfig
from .params import ParamStore
from .pipeline import CLEAN, EvalReport, Stores, evaluate, train_unet_stage
from .synth import DatasetManifest, SplitArrays


def preset_config(base: RunConfig, name: str) -> RunConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return base.replace(**PRESETS[name])


def expand_names(names: Iterable[str]) -> list[str]:
    """Group names (see ``PRESET_GROUPS``) expand to their members, order kept, no repeats."""
    out: list[str] = []
    for n in names:
        if n not in PRESETS and n not in PRESET_GROUPS:
            raise KeyError(f"unknown preset or group {n!r}")
        for m in PRESET_GROUPS.get(n, [n]):
            if m not in out:
                out.append(m)
    return out


def run_presets(base: RunConfig, names: Iterable[str], seg_store: ParamStore,
                base_unet: ParamStore, train: SplitArrays, test: SplitArrays,
                manifest: DatasetManifest, root: str | Path,
                levels=(CLEAN, 1, 2, 3), prompt_modes=("points",),
                out_dir: str | Path | None = None) -> dict[str, EvalReport]:
    reports = {}
    for name in expand_names(names):
        cfg = preset_config(base, name)
        stores, curve = train_unet_stage(cfg, Stores(seg_store), base_unet, train)
        out = None if out_dir is None else Path(out_dir) / f"{name}.json"
        reports[name] = evaluate(cfg, stores, manifest, root, split="test",
                                 prompt_modes=prompt_modes, levels=levels,
                                 out_path=out, data=test)
    return reports
