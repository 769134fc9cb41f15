"""Run configuration: nested dataclasses with a strict YAML loader.

Unknown keys are rejected rather than ignored so typos fail loudly. Command
line flags override file values. All relative paths resolve against the
directory containing the config file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSettings:
    n_well: int = 16
    n_weak: int = 64
    n_val: int = 16
    n_test: int = 16
    p_corrupt: float = 0.5
    corruption: str = "mixed"
    dir: str = "corpus"


@dataclass
class ModelSettings:
    n_queries: int = 8
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_proj: int = 32
    d_ff: int = 128
    temperature_init: float = 0.07


@dataclass
class StageSettings:
    epochs: int = 400
    lr: float = 1e-3
    batch_size: int = 8
    checkpoint_every: int = 0  # extra mid-epoch checkpoints every N steps; 0 = epoch ends only


@dataclass
class DPOSettings:
    beta: float = 0.05


@dataclass
class PairSettings:
    n_candidates: int = 5
    margin_sigmas: float = 2.0


@dataclass
class GeneratorSettings:
    vae_steps: int = 1200
    vae_lr: float = 2e-3
    ldm_steps: int = 600
    ldm_lr: float = 1e-3
    batch_size: int = 8
    base_channels: int = 32
    t_max: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    d_time: int = 64
    d_text: int = 64
    guidance_scale: float = 3.0
    cond_dropout: float = 0.1


@dataclass
class RunConfig:
    seed: int = 7
    run_id: str = "toy"
    runs_dir: str = "runs"
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    stage1: StageSettings = field(default_factory=StageSettings)
    stage3: StageSettings = field(default_factory=lambda: StageSettings(epochs=60))
    stage4: StageSettings = field(default_factory=lambda: StageSettings(epochs=20, lr=2e-4))
    dpo: DPOSettings = field(default_factory=DPOSettings)
    pairs: PairSettings = field(default_factory=PairSettings)
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)
    # Set when loaded from disk; relative paths resolve against this.
    root: Path | None = field(default=None, compare=False)

    def corpus_dir(self) -> Path:
        return self._resolve(self.corpus.dir)

    def run_dir(self) -> Path:
        return self._resolve(self.runs_dir) / self.run_id

    def _resolve(self, p: str) -> Path:
        path = Path(p)
        if path.is_absolute() or self.root is None:
            return path
        return self.root / path


_SERIALIZED_SKIP = {"root"}


def _to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in _SERIALIZED_SKIP:
            continue
        v = getattr(obj, f.name)
        out[f.name] = _to_dict(v) if dataclasses.is_dataclass(v) else v
    return out


def _from_dict(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(doc).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in _SERIALIZED_SKIP}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        f = fields[name]
        type_name = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        if type_name in _SETTINGS_TYPES:
            kwargs[name] = _from_dict(_SETTINGS_TYPES[type_name], value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SETTINGS_TYPES = {
    "CorpusSettings": CorpusSettings,
    "ModelSettings": ModelSettings,
    "StageSettings": StageSettings,
    "DPOSettings": DPOSettings,
    "PairSettings": PairSettings,
    "GeneratorSettings": GeneratorSettings,
}


def save_config(cfg: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(_to_dict(cfg), sort_keys=True), encoding="utf-8")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from None
    if doc is None:
        doc = {}
    cfg = _from_dict(RunConfig, doc, str(path))
    cfg.root = path.parent.resolve()
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if cfg.corpus.corruption not in ("deletion", "substitution", "reordering", "mixed"):
        raise ConfigError(f"unknown corruption mode {cfg.corpus.corruption!r}")
    if not 0.0 <= cfg.corpus.p_corrupt <= 1.0:
        raise ConfigError("p_corrupt must be in [0, 1]")
    for name in ("stage1", "stage3", "stage4"):
        st: StageSettings = getattr(cfg, name)
        if st.epochs < 1 or st.lr <= 0 or st.batch_size < 2:
            raise ConfigError(f"{name}: epochs >= 1, lr > 0, batch_size >= 2 required")
    if cfg.pairs.n_candidates < 3:
        raise ConfigError("pairs.n_candidates must be at least 3")
    if cfg.dpo.beta <= 0:
        raise ConfigError("dpo.beta must be positive")
