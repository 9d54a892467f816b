"""Experiment configuration: dataclasses plus a flat ``section.key = value`` file format.

Example::

    # comments start with '#'
    data.synthetic = true
    data.users = 2000
    model.spg = true
    train.lr = 0.001
    backbone.dynamic_layer_specs = 32x16

Precedence is command line (``--set section.key=value``) > file > defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .data import NegativeCounts
from .hypernet import GeneratorConfig
from .synthetic import SyntheticConfig
from .training import TrainConfig, Variant


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str = ""  # interaction file, or a directory written by build-data
    format: str = ""
    modalities_dir: str = ""
    categories: str = ""
    synthetic: bool = True
    users: int = 2000
    items: int = 300
    semantics: int = 12
    noise: float = 0.3
    follow_prob: float = 0.5
    seq_len: int = 10
    k_train: int = 4
    k_valid: int = 19
    k_test: int = 99

    @property
    def negatives(self) -> NegativeCounts:
        return NegativeCounts(self.k_train, self.k_valid, self.k_test)

    def synthetic_config(self, seed: int) -> SyntheticConfig:
        return SyntheticConfig(
            users=self.users, items=self.items, semantics=self.semantics, noise=self.noise,
            follow_prob=self.follow_prob, seed=seed,
        )


@dataclass
class SemanticsConfig:
    source: str = "cluster"  # or "category"
    k: int = 0  # 0: round(sqrt(n_items)), or the planted count for synthetic data
    modalities: tuple = ("id", "image", "text")
    max_iter: int = 100


@dataclass
class ModelConfig:
    spg: bool = True
    sml: bool = True
    scl: bool = True
    static: bool = False

    @property
    def variant(self) -> Variant:
        return Variant(self.spg, self.sml, self.scl, self.static)


@dataclass
class EvalConfig:
    ks: tuple = (10, 20)
    perturbations: int = 5


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    semantics: SemanticsConfig = field(default_factory=SemanticsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = "runs"

    SECTIONS = ("data", "semantics", "model", "backbone", "generator", "train", "eval")

    def validate(self) -> "ExperimentConfig":
        try:
            self.model.variant
            for name in ("backbone", "generator", "train"):
                sec = getattr(self, name)
                sec.__post_init__()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.semantics.source not in ("cluster", "category"):
            raise ConfigError(f"semantics.source must be cluster or category, got {self.semantics.source!r}")
        if self.backbone.seq_len != self.data.seq_len:
            self.backbone.seq_len = self.data.seq_len
        return self

    def to_dict(self) -> dict:
        out = {}
        for name in self.SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = sec
        out["seed"] = self.seed
        out["output_dir"] = self.output_dir
        return json.loads(json.dumps(out, default=_jsonable))

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def lines(self) -> list[str]:
        out = []
        for name in self.SECTIONS:
            sec = getattr(self, name)
            for f in dataclasses.fields(sec):
                out.append(f"{name}.{f.name} = {_format(getattr(sec, f.name))}")
        out.append(f"run.seed = {self.seed}")
        out.append(f"run.output_dir = {self.output_dir}")
        return out

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = cls()
        for name in cls.SECTIONS:
            for key, value in d.get(name, {}).items():
                set_value(cfg, f"{name}.{key}", value)
        cfg.seed = int(d.get("seed", cfg.seed))
        cfg.output_dir = d.get("output_dir", cfg.output_dir)
        return cfg.validate()


def _jsonable(o):
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and dataclasses.is_dataclass(v[0]):
            return ",".join(f"{s.n_in}x{s.n_out}" for s in v)
        return ",".join(_format(x) for x in v)
    return str(v)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def _spec_pair(x) -> tuple[int, int]:
    if isinstance(x, dict):
        return int(x["n_in"]), int(x["n_out"])
    if dataclasses.is_dataclass(x):
        return x.n_in, x.n_out
    a, b = x
    return int(a), int(b)


def _coerce(current, raw, key: str):
    if not isinstance(raw, str):
        if key.endswith("dynamic_layer_specs"):
            return tuple(_spec_pair(x) for x in raw)
        if isinstance(current, tuple):
            return tuple(raw)
        return type(current)(raw) if current is not None and not isinstance(current, bool) else raw
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            return _parse_bool(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if key.endswith("dynamic_layer_specs"):
            specs = []
            for part in raw.split(","):
                a, b = part.lower().split("x")
                specs.append((int(a), int(b)))
            return tuple(specs)
        if isinstance(current, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if current and isinstance(current[0], (int, float)) and not isinstance(current[0], bool):
                return tuple(type(current[0])(p) for p in parts)
            return tuple(parts)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
    return raw


def set_value(cfg: ExperimentConfig, key: str, raw) -> None:
    if key in ("run.seed", "seed"):
        try:
            cfg.seed = int(raw)
        except ValueError:
            raise ConfigError(f"run.seed: cannot parse {raw!r}") from None
        return
    if key in ("run.output_dir", "output_dir"):
        cfg.output_dir = str(raw).strip()
        return
    if "." not in key:
        raise ConfigError(f"key {key!r} lacks a section prefix")
    section, name = key.split(".", 1)
    if section not in ExperimentConfig.SECTIONS:
        raise ConfigError(f"unknown section {section!r}")
    sec = getattr(cfg, section)
    if name not in {f.name for f in dataclasses.fields(sec)}:
        raise ConfigError(f"unknown key {key!r}")
    object.__setattr__(sec, name, _coerce(getattr(sec, name), raw, key))


def parse_lines(lines, cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = cfg or ExperimentConfig()
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        set_value(cfg, key.strip(), value)
    return cfg


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{p}: no such config file")
        parse_lines(p.read_text().splitlines(), cfg)
    parse_lines(overrides, cfg)
    return cfg.validate()
