"""Flat named-parameter store and the checkpoint archive format.

A checkpoint is two files sharing a stem: ``<stem>.npz`` holding float32
arrays keyed by parameter name, and ``<stem>.json`` with the metadata
(config hash, trainable flags, training stage, iteration count, shapes).
"""
from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np
import torch

__all__ = ["ParamStore", "save_checkpoint", "load_checkpoint", "CheckpointError"]


class CheckpointError(RuntimeError):
    pass


class ParamStore:
    """Ordered map ``name -> tensor`` plus the set of frozen names."""

    def __init__(self, tensors: Mapping[str, torch.Tensor] | None = None,
                 frozen: Iterable[str] = ()):
        self.tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict(tensors or {})
        self.frozen: set[str] = set(frozen)
        unknown = self.frozen - set(self.tensors)
        if unknown:
            raise KeyError(f"frozen names not in store: {sorted(unknown)}")

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: torch.Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if n not in self.frozen]

    def num_params(self, names: Iterable[str] | None = None) -> int:
        names = self.tensors if names is None else names
        return sum(self.tensors[n].numel() for n in names)

    def freeze(self, names: Iterable[str]) -> "ParamStore":
        self.frozen.update(names)
        return self

    def unfreeze(self, names: Iterable[str]) -> "ParamStore":
        self.frozen.difference_update(names)
        return self

    def freeze_all(self) -> "ParamStore":
        self.frozen = set(self.tensors)
        return self

    def copy(self) -> "ParamStore":
        return ParamStore(
            OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()),
            self.frozen,
        )

    def to(self, dtype: torch.dtype) -> "ParamStore":
        return ParamStore(
            OrderedDict((k, v.detach().to(dtype)) for k, v in self.tensors.items()),
            self.frozen,
        )

    def merged(self, other: "ParamStore") -> "ParamStore":
        clash = set(self.tensors) & set(other.tensors)
        if clash:
            raise KeyError(f"duplicate parameter names: {sorted(clash)[:5]}")
        out = OrderedDict(self.tensors)
        out.update(other.tensors)
        return ParamStore(out, self.frozen | other.frozen)

    def subset(self, prefix: str) -> "ParamStore":
        keep = OrderedDict((k, v) for k, v in self.tensors.items() if k.startswith(prefix))
        return ParamStore(keep, self.frozen & set(keep))

    def equal(self, other: "ParamStore", names: Iterable[str] | None = None) -> bool:
        """Bit-identical comparison over ``names`` (default: all)."""
        names = list(self.tensors) if names is None else list(names)
        for n in names:
            if n not in other.tensors:
                return False
            a, b = self.tensors[n], other.tensors[n]
            if a.shape != b.shape or a.dtype != b.dtype or not torch.equal(a, b):
                return False
        return True

    def changed_names(self, other: "ParamStore") -> set[str]:
        return {n for n in self.tensors
                if n in other.tensors and not torch.equal(self.tensors[n], other.tensors[n])}

    def __repr__(self) -> str:
        return (f"ParamStore({len(self.tensors)} tensors, {self.num_params()} values, "
                f"{len(self.frozen)} frozen)")


def save_checkpoint(stem: str | Path, store: ParamStore, *, config_hash: str = "",
                    stage: str = "", iteration: int = 0, extra: dict | None = None) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arrays = {n: t.detach().cpu().to(torch.float32).numpy() for n, t in store.tensors.items()}
    with open(stem.with_suffix(".npz"), "wb") as fh:
        np.savez(fh, **arrays)
    meta = {
        "config_hash": config_hash,
        "stage": stage,
        "iteration": int(iteration),
        "params": {n: {"shape": list(a.shape), "trainable": n not in store.frozen}
                   for n, a in arrays.items()},
    }
    if extra:
        meta["extra"] = extra
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return stem


def load_checkpoint(stem: str | Path, expect: ParamStore | None = None
                    ) -> tuple[ParamStore, dict]:
    """Load a checkpoint; with ``expect`` given, names and shapes must match exactly."""
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    with np.load(stem.with_suffix(".npz")) as data:
        arrays = {n: data[n] for n in data.files}
    declared = meta["params"]
    if set(declared) != set(arrays):
        raise CheckpointError("metadata and archive disagree on parameter names")
    tensors = OrderedDict()
    for n, info in declared.items():
        if list(arrays[n].shape) != info["shape"]:
            raise CheckpointError(f"{n}: archive shape {arrays[n].shape} != {info['shape']}")
        tensors[n] = torch.from_numpy(arrays[n].astype(np.float32))
    if expect is not None:
        missing = set(expect.tensors) - set(tensors)
        surplus = set(tensors) - set(expect.tensors)
        if missing or surplus:
            raise CheckpointError(
                f"parameter names mismatch: missing={sorted(missing)[:5]} "
                f"unexpected={sorted(surplus)[:5]}")
        for n, t in expect.tensors.items():
            if tuple(t.shape) != tuple(tensors[n].shape):
                raise CheckpointError(f"{n}: shape {tuple(tensors[n].shape)} != {tuple(t.shape)}")
        tensors = OrderedDict((n, tensors[n]) for n in expect.tensors)
    frozen = [n for n, info in declared.items() if not info["trainable"]]
    return ParamStore(tensors, frozen), meta
