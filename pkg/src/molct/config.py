"""Run configuration: a flat ``key = value`` text file with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .niu import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    D: int = 64
    d: int = 32
    heads: int = 8
    rme_blocks: int = 1
    unit: str = "niu"
    n_units: int = 1
    iterations: int = 3
    T_max: int = 3
    halt_epsilon: float = 0.01
    ponder_hidden: int | None = None
    use_ffn: bool = False
    cfc_filters: int | None = None
    r_min: float = 0.5
    r_cut: float = 10.0
    sigma: float | None = None
    basis: str = "log"
    species_vocab_size: int = 20
    relation_vocab_size: int = 4
    # objective
    lam: float = 0.99
    ponder_weight: float = 0.001
    # optimizer
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    steps: int = 5000
    log_every: int = 250
    # data
    data: str | None = None
    bonds: str | None = None
    train_data: str | None = None
    val_data: str | None = None
    n_train: int = 1024
    n_val: int = 1024
    split_seed: int = 0
    noise: float = 0.08  # perturbation scale of the builtin toy-MM generator
    artificial_atom_types: bool = False
    # run
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    output_dir: str = "runs"

    def model_config(self) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def validate(self, check_paths: bool = True) -> None:
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if check_paths:
            for key in ("data", "bonds", "train_data", "val_data"):
                val = getattr(self, key)
                if val and not val.startswith("builtin:") and not Path(val).exists():
                    raise ConfigError(f"{key} path does not exist: {val}")
        if not (self.data or self.train_data):
            raise ConfigError("config needs either data or train_data")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, raw: str, ftype):
    raw = raw.strip()
    t = str(ftype)
    if raw.lower() in ("none", "") and "None" in t:
        return None
    try:
        if name == "seeds":
            return [int(s) for s in raw.replace(",", " ").split()]
        if t.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, val, types[key])
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    path = Path(path)
    cfg = parse_config_text(path.read_text(), str(path))
    base = path.parent
    for key in ("data", "bonds", "train_data", "val_data"):
        val = getattr(cfg, key)
        if val and not val.startswith("builtin:") and not Path(val).is_absolute():
            setattr(cfg, key, str(base / val))
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
