"""Run configuration: nested dataclasses loaded from YAML or JSON, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from ..synthdata import GenConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train: str | None = None
    test: str | None = None
    n_train: int = 160
    n_test: int = 40
    generator: dict = field(default_factory=dict)

    def gen_config(self, seed: int) -> GenConfig:
        raw = {"seed": seed, **self.generator}
        try:
            return GenConfig.from_dict(raw)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"data.generator: {err}") from None


@dataclass
class OptimConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    warmup: int = 1000
    batch_size: int = 8
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8


@dataclass
class EpochConfig:
    router: int = 30
    sign: int = 30
    fs: int = 30
    lip: int = 100
    fusion: int = 30
    scale: float = 1.0

    def of(self, branch: str) -> int:
        return max(1, int(round(getattr(self, branch) * self.scale)))


@dataclass
class TauConfig:
    start: float = 1.0
    end: float = 0.1
    mode: str = "straight_through"


@dataclass
class ExpertSection:
    lip_hidden: int = 64
    kernel: int = 5
    stride: int = 2
    mask_ratio: float = 0.5
    pe_scale: float = 1.0


@dataclass
class FusionSection:
    variant: str = "gated"
    gate: str = "vector"
    upsample: str = "nearest"
    positional: bool = True


@dataclass
class AblationConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    shifts: list = field(default_factory=lambda: [-10, -5, 0, 5, 10])
    variants: list = field(default_factory=lambda: ["concat_mlp", "cross_attention", "gated"])
    fixed_gate: str = "static"
    lip_offset: int = 5
    timing_T: int = 256
    timing_repeats: int = 5


@dataclass
class RunConfig:
    stage: str = "experts"
    profile: str = "tiny"
    seed: int = 0
    dropout: float = 0.1
    shift: typing.Any = 0
    beam_width: int = 4
    skip_infeasible: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: EpochConfig = field(default_factory=EpochConfig)
    tau: TauConfig = field(default_factory=TauConfig)
    experts: ExpertSection = field(default_factory=ExpertSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> "RunConfig":
        if self.stage not in ("experts", "fusion"):
            raise ConfigError(f"stage must be 'experts' or 'fusion', got {self.stage!r}")
        if self.profile not in ("tiny", "default"):
            raise ConfigError(f"profile must be 'tiny' or 'default', got {self.profile!r}")
        if self.shift != "learned" and not isinstance(self.shift, int):
            raise ConfigError(f"shift must be an integer or 'learned', got {self.shift!r}")
        if self.tau.mode not in ("straight_through", "soft"):
            raise ConfigError(f"tau.mode must be 'straight_through' or 'soft', got {self.tau.mode!r}")
        if self.optim.batch_size < 1 or self.beam_width < 1:
            raise ConfigError("batch_size and beam_width must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        self.data.gen_config(self.seed)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        return _build(RunConfig, _merge(self.to_dict(), kw), "").validate()


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "generator":
            out[k] = _merge(out[k], v)
        elif isinstance(v, dict) and k == "generator" and isinstance(out.get(k), dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    extra = sorted(set(raw) - names)
    if extra:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(extra)}")
    kw = {}
    for k, v in raw.items():
        t = hints[k]
        if dataclasses.is_dataclass(t):
            kw[k] = _build(t, v, f"{where}.{k}" if where else k)
        else:
            kw[k] = v
    return cls(**kw)


def config_from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw or {}, "").validate()


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as err:
        raise ConfigError(f"{path}: {err}") from None
    return config_from_dict(raw or {})


def bundled_config(name: str) -> RunConfig:
    """Load one of the configs shipped with the package (``smoke``, ``ablation``)."""
    path = resources.files(__package__).joinpath(f"configs/{name}.yaml")
    if not path.is_file():
        raise ConfigError(f"no bundled config named {name!r}")
    return config_from_dict(yaml.safe_load(path.read_text()))
