"""Strict line-based experiment configs.

Each non-comment line is ``section.key = value``. Values are coerced to the
type of the matching dataclass field; unknown sections or keys are errors.
Compare grids add ``variant.NAME.section.key = value`` override lines.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

from revkd.distill import DistillConfig
from revkd.model import ModelConfig
from revkd.trainer import OptimizerConfig, TrainConfig

MODEL_SECTIONS = ("teacher", "teacher2", "student")
SEED_STREAMS = {
    "corpus": 0, "eval_corpus": 1, "pairs": 2,
    "teacher": 10, "teacher2": 11, "student": 12,
    "train": 20, "teacher_train": 21,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    id: str = "run"
    seed: int = 0
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class DataSection:
    grammar: str = "default"
    n_tokens: int = 100_000
    eval_tokens: int = 10_000
    n_pairs: int = 400


@dataclass(frozen=True)
class PathsSection:
    teacher: str = ""
    teacher2: str = ""


@dataclass(frozen=True)
class ModelSection:
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 1
    ffn_multiplier: int = 4
    norm_eps: float = 1e-5
    vocab_size: int = 0  # 0: take it from the grammar
    max_seq_len: int = 0  # 0: use the training sequence length
    seed: int = -1  # -1: derive from run.seed


SECTIONS: dict[str, type] = {
    "run": RunSection,
    "data": DataSection,
    "paths": PathsSection,
    "teacher": ModelSection,
    "teacher2": ModelSection,
    "student": ModelSection,
    "distill": DistillConfig,
    "train": TrainConfig,
    "optim": OptimizerConfig,
    "teacher_train": TrainConfig,
    "teacher_optim": OptimizerConfig,
}


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    paths: PathsSection = field(default_factory=PathsSection)
    teacher: ModelSection = field(default_factory=ModelSection)
    teacher2: Optional[ModelSection] = None
    student: ModelSection = field(default_factory=ModelSection)
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    teacher_train: Optional[TrainConfig] = None
    teacher_optim: Optional[OptimizerConfig] = None
    variants: dict[str, dict[str, dict[str, Any]]] = field(default_factory=dict)
    source: Optional[Path] = None
    explicit: frozenset = frozenset()  # "section.key" names set in the file

    def derived_seed(self, stream: str) -> int:
        return int(np.random.SeedSequence([self.run.seed, SEED_STREAMS[stream]]).generate_state(1)[0])

    def model_config(self, role: str, vocab_size: int) -> ModelConfig:
        sec: ModelSection = getattr(self, role)
        if sec is None:
            raise ConfigError(f"section '{role}' is not configured")
        if sec.vocab_size and sec.vocab_size != vocab_size:
            raise ConfigError(f"{role}.vocab_size={sec.vocab_size} does not match the grammar's {vocab_size}")
        seq_len = self.train.seq_len
        if role != "student":
            seq_len = max(seq_len, self.teacher_train_config.seq_len)
        max_len = sec.max_seq_len or seq_len
        if max_len < seq_len:
            raise ConfigError(f"{role}.max_seq_len={max_len} is shorter than the training sequence length")
        cfg = ModelConfig(
            vocab_size=vocab_size,
            max_seq_len=max_len,
            d_model=sec.d_model,
            n_heads=sec.n_heads,
            n_layers=sec.n_layers,
            ffn_multiplier=sec.ffn_multiplier,
            norm_eps=sec.norm_eps,
            seed=sec.seed if sec.seed >= 0 else self.derived_seed(role),
        )
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(f"{role}: {exc}") from None
        return cfg

    @property
    def train_config(self) -> TrainConfig:
        if "train.seed" in self.explicit:
            return self.train
        return replace(self.train, seed=self.derived_seed("train"))

    @property
    def teacher_train_config(self) -> TrainConfig:
        base = self.teacher_train or self.train
        if "teacher_train.seed" in self.explicit:
            return base
        return replace(base, seed=self.derived_seed("teacher_train"))

    @property
    def teacher_optim_config(self) -> OptimizerConfig:
        return self.teacher_optim or self.optim

    def with_variant(self, name: str) -> "ExperimentConfig":
        overrides = self.variants[name]
        out = dataclasses.replace(self, variants={})
        explicit = set(self.explicit)
        for section, values in overrides.items():
            current = getattr(out, section)
            if current is None:
                current = SECTIONS[section]()
            setattr(out, section, replace(current, **values))
            explicit.update(f"{section}.{k}" for k in values)
        out.explicit = frozenset(explicit)
        out.run = replace(out.run, id=f"{self.run.id}-{name}")
        _validate(out)
        return out


def _coerce(section: str, key: str, raw: str, ftype) -> Any:
    name = f"{section}.{key}"
    tname = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    if tname == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if tname == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    if tname == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from None
    return raw


def _field_types(cls) -> dict[str, Any]:
    return {f.name: f.type for f in fields(cls)}


def _parse_assignment(key: str, raw: str, lineno: int) -> tuple[str, str, Any]:
    parts = key.split(".")
    if len(parts) != 2:
        raise ConfigError(f"line {lineno}: key {key!r} must look like section.key")
    section, name = parts
    if section not in SECTIONS:
        raise ConfigError(f"line {lineno}: unknown section {section!r} in key {key!r}")
    types = _field_types(SECTIONS[section])
    if name not in types:
        raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return section, name, _coerce(section, name, raw, types[name])


def parse_config(text: str, source: Optional[Path] = None, seed: Optional[int] = None) -> ExperimentConfig:
    values: dict[str, dict[str, Any]] = {}
    variants: dict[str, dict[str, dict[str, Any]]] = {}
    seen: set[str] = set()
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw_line.strip()!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key.startswith("variant."):
            parts = key.split(".")
            if len(parts) != 4 or not parts[1]:
                raise ConfigError(f"line {lineno}: variant keys look like variant.NAME.section.key, got {key!r}")
            section, name, value = _parse_assignment(".".join(parts[2:]), raw, lineno)
            variants.setdefault(parts[1], {}).setdefault(section, {})[name] = value
            continue
        section, name, value = _parse_assignment(key, raw, lineno)
        values.setdefault(section, {})[name] = value

    if seed is not None:
        values.setdefault("run", {})["seed"] = int(seed)
    cfg = ExperimentConfig(source=source)
    for section, kv in values.items():
        current = getattr(cfg, section) or SECTIONS[section]()
        try:
            setattr(cfg, section, replace(current, **kv))
        except TypeError as exc:
            raise ConfigError(f"section {section}: {exc}") from None
    cfg.variants = variants
    cfg.explicit = frozenset(f"{s}.{k}" for s, kv in values.items() for k in kv)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    checks = [("distill", cfg.distill), ("train", cfg.train), ("optim", cfg.optim)]
    if cfg.teacher_train is not None:
        checks.append(("teacher_train", cfg.teacher_train))
    if cfg.teacher_optim is not None:
        checks.append(("teacher_optim", cfg.teacher_optim))
    for name, section in checks:
        try:
            section.validate()
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from None
    if cfg.run.seed < 0:
        raise ConfigError("run.seed must be non-negative")
    if cfg.data.n_tokens < 1 or cfg.data.eval_tokens < 1 or cfg.data.n_pairs < 1:
        raise ConfigError("data.n_tokens, data.eval_tokens and data.n_pairs must be positive")
    if cfg.distill.teacher_count == 2 and cfg.teacher2 is None:
        raise ConfigError("distill.teacher_count = 2 needs a teacher2 section")
    if cfg.data.grammar != "default":
        path = resolve_path(cfg, cfg.data.grammar)
        if not path.is_file():
            raise ConfigError(f"data.grammar: file not found: {path}")


def resolve_path(cfg: ExperimentConfig, value: str) -> Path:
    """Relative paths in a config file are taken relative to that file."""
    p = Path(value)
    if p.is_absolute() or cfg.source is None:
        return p
    return cfg.source.parent / p


def load_config(path: str | Path, seed: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_config(text, source=path, seed=seed)
