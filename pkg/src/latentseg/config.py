"""Run configuration: one JSON document is the source of truth."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .denoiser import LoraConfig, UNetConfig
from .schedule import DaeRange, NoiseSchedule, build_schedule, default_dae_range
from .seg import SegConfig


@dataclass
class ScheduleConfig:
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class DaeConfig:
    t_min: int = 100          # beta_bar_min = beta_bar[t_min]
    t_max: int = 900          # beta_bar_max = beta_bar[t_max]
    gamma: float = 5.0
    t_step: int = 500


@dataclass
class PretrainConfig:
    denoiser_steps: int = 2000
    denoiser_corpus: int = 256
    denoiser_lr: float = 1e-3
    seg_steps: int = 6000
    seg_lr: float = 1e-3
    seg_batch_size: int = 16


@dataclass
class DataConfig:
    root: str = "data/lqseg"
    n_train: int = 400
    n_test: int = 100
    size: int = 64


@dataclass
class Ablation:
    gle: bool = True
    cre: str = "cre"           # cre | adapter | new_head
    fda: bool = True
    dae: bool = True
    eta_mode: str = "interp"   # interp | direct


@dataclass
class RunConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    dae: DaeConfig = field(default_factory=DaeConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    dpm_aggregate: str = "concat"
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    n1: int = 5000
    n2: int = 2000
    decoder_mode: str = "FT-D"
    lr: float = 2e-4
    batch_size: int = 4
    prompt_mode: str = "points"
    n_points: int = 3
    noise_scale: float = 0.2
    ablation: Ablation = field(default_factory=Ablation)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def build_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return build_schedule(s.num_steps, s.beta_start, s.beta_end)

    def dae_range(self, sched: NoiseSchedule | None = None) -> DaeRange:
        sched = sched or self.build_schedule()
        gamma = self.dae.gamma if self.ablation.fda else 1.0
        return default_dae_range(sched, self.dae.t_min, self.dae.t_max, gamma, self.dae.t_step)

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"ablation.dae": False})``."""
        new = copy.deepcopy(self)
        for key, value in overrides.items():
            set_dotted(new, key, value)
        return new

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def _build(cls, d: dict):
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    for name, value in d.items():
        default = getattr(cls(), name) if _has_default(cls) else None
        if is_dataclass(default) and isinstance(value, dict):
            kwargs[name] = _build(type(default), value)
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _has_default(cls) -> bool:
    try:
        cls()
    except TypeError:
        return False
    return True


def set_dotted(obj, key: str, value) -> None:
    *path, last = key.split(".")
    for part in path:
        obj = getattr(obj, part)
    if not hasattr(obj, last):
        raise KeyError(f"unknown config field {key!r}")
    current = getattr(obj, last)
    if isinstance(current, bool) and isinstance(value, str):
        value = value.lower() in ("1", "true", "yes", "on")
    elif isinstance(current, (int, float)) and not isinstance(current, bool) and isinstance(value, str):
        value = type(current)(value)
    elif isinstance(current, (list, tuple)) and isinstance(value, str):
        value = type(current)(json.loads(value))
    setattr(obj, last, value)


# Ablation presets: name -> dotted overrides applied on top of a base config.
PRESETS: dict[str, dict] = {
    # component ablation, cumulative
    "baseline": {"ablation.gle": False},
    "gle_cre": {"ablation.fda": False, "ablation.dae": False},
    "gle_cre_fda": {"ablation.dae": False},
    "gle_cre_fda_dae": {},
    # score-to-noise mapping
    "eta_direct": {"ablation.eta_mode": "direct"},
    # channel expansion alternatives
    "expand_adapter": {"ablation.cre": "adapter"},
    "expand_new_head": {"ablation.cre": "new_head"},
    # LoRA rank
    "rank4": {"lora.rank": 4, "lora.alpha": 4.0},
    "rank16": {"lora.rank": 16, "lora.alpha": 16.0},
    # feature scaling weight
    "gamma1": {"dae.gamma": 1.0},
    "gamma3": {"dae.gamma": 3.0},
    "gamma7": {"dae.gamma": 7.0},
    "gamma10": {"dae.gamma": 10.0},
}

PRESET_GROUPS = {
    "components": ["baseline", "gle_cre", "gle_cre_fda", "gle_cre_fda_dae"],
    "dae": ["eta_direct", "gle_cre_fda_dae"],
    "expansion": ["expand_adapter", "expand_new_head", "gle_cre_fda_dae"],
    "rank": ["rank4", "gle_cre_fda_dae", "rank16"],
    "gamma": ["gamma1", "gamma3", "gle_cre_fda_dae", "gamma7", "gamma10"],
}
