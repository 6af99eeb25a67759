"""Experiment configuration: TOML sections per module, validated at parse time."""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .data import SCHEMES
from .encoder import EncoderConfig
from .losses import VARIANTS, C2LossParams


class ConfigError(ValueError):
    pass


@dataclass
class EncoderSection:
    num_layers: int = 6
    embed_dim: int = 64
    num_heads: int = 4
    num_tokens: int = 8
    mlp_ratio: int = 2
    weights: str = ""


@dataclass
class PromptSection:
    components: int = 10
    length: int = 8
    layers: list = field(default_factory=lambda: [0, 1, 2, 3, 4])


@dataclass
class LossSection:
    variant: str = "cprompt"
    gamma_c2l: float = 0.5
    margin: float = 0.5
    lambda_c2l: float = 0.5
    mu: float = 0.01


@dataclass
class FedSection:
    n_clients: int = 10
    rounds_per_task: int = 40
    local_epochs: int = 5
    lr: float = 1e-4
    batch_size: int = 128
    mode: str = "sync"
    async_fraction: float = 0.5
    async_offset: int = 1
    early_stopping: bool = False
    patience: int = 5
    eval_every_round: bool = False


@dataclass
class DataSection:
    csv_path: str = ""
    n_tasks: int = 5
    classes_per_task: int = 2
    input_dim: int = 32
    samples_per_class: int = 100
    separation: float = 6.0
    scheme: str = "iid"
    beta: float = 0.5


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    encoder: EncoderSection = field(default_factory=EncoderSection)
    prompt: PromptSection = field(default_factory=PromptSection)
    loss: LossSection = field(default_factory=LossSection)
    fed: FedSection = field(default_factory=FedSection)
    data: DataSection = field(default_factory=DataSection)

    def encoder_config(self) -> EncoderConfig:
        e = self.encoder
        return EncoderConfig(num_layers=e.num_layers, embed_dim=e.embed_dim, num_heads=e.num_heads,
                             num_tokens=e.num_tokens, input_dim=self.data.input_dim,
                             prompted_layers=tuple(self.prompt.layers), mlp_ratio=e.mlp_ratio)

    def c2_params(self) -> C2LossParams:
        return C2LossParams(self.loss.gamma_c2l, self.loss.margin, self.loss.lambda_c2l)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {"encoder": EncoderSection, "prompt": PromptSection, "loss": LossSection,
            "fed": FedSection, "data": DataSection}


def _coerce(path: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{path}: expected a list of integers, got {value!r}")
        return list(value)
    raise ConfigError(f"{path}: unsupported value {value!r}")


def from_dict(raw: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a section table")
            section = getattr(cfg, key)
            known = {f.name for f in dataclasses.fields(section)}
            for sub, v in value.items():
                if sub not in known:
                    raise ConfigError(f"{key}.{sub}: unknown key")
                setattr(section, sub, _coerce(f"{key}.{sub}", v, getattr(section, sub)))
        elif key in ("seed", "output_dir"):
            setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
        else:
            raise ConfigError(f"{key}: unknown key")
    validate(cfg)
    return cfg


def _set_dotted(raw: dict, dotted: str, value):
    parts = dotted.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {p} is not a section")
    node[parts[-1]] = value


def parse_value(text: str):
    """Interpret a flag value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for dotted, value in (overrides or {}).items():
        _set_dotted(raw, dotted, value)
    return from_dict(raw)


def validate(cfg: ExperimentConfig):
    def need(cond, path, msg):
        if not cond:
            raise ConfigError(f"{path}: {msg}")

    e, p, l, f, d = cfg.encoder, cfg.prompt, cfg.loss, cfg.fed, cfg.data
    need(cfg.seed >= 0, "seed", f"must be >= 0, got {cfg.seed}")
    need(p.length > 0 and p.length % 2 == 0, "prompt.length", f"must be a positive even integer, got {p.length}")
    need(p.components >= 1, "prompt.components", f"must be >= 1, got {p.components}")
    need(len(p.layers) > 0, "prompt.layers", "must name at least one layer")
    need(l.variant in VARIANTS, "loss.variant", f"must be one of {VARIANTS}, got {l.variant!r}")
    need(l.gamma_c2l > 0, "loss.gamma_c2l", f"must be > 0, got {l.gamma_c2l}")
    need(0 <= l.margin <= 1, "loss.margin", f"must lie in [0, 1], got {l.margin}")
    need(0 <= l.lambda_c2l <= 1, "loss.lambda_c2l", f"must lie in [0, 1], got {l.lambda_c2l}")
    need(l.mu >= 0, "loss.mu", f"must be >= 0, got {l.mu}")
    if l.variant != "cprompt":
        l.lambda_c2l = 0.0
    for name in ("n_clients", "rounds_per_task", "batch_size", "patience", "async_offset"):
        need(getattr(f, name) > 0, f"fed.{name}", f"must be positive, got {getattr(f, name)}")
    need(f.local_epochs >= 0, "fed.local_epochs", f"must be >= 0, got {f.local_epochs}")
    need(f.lr > 0, "fed.lr", f"must be > 0, got {f.lr}")
    need(f.mode in ("sync", "async"), "fed.mode", f"must be 'sync' or 'async', got {f.mode!r}")
    if f.mode == "async":
        need(0 < f.async_fraction < 1, "fed.async_fraction", f"must lie in (0, 1), got {f.async_fraction}")
        need(not f.early_stopping, "fed.early_stopping", "only supported in sync mode")
    need(d.scheme in SCHEMES, "data.scheme", f"must be one of {SCHEMES}, got {d.scheme!r}")
    need(d.scheme == "iid" or d.beta > 0, "data.beta", f"must be > 0, got {d.beta}")
    need(d.separation >= 0, "data.separation", f"must be >= 0, got {d.separation}")
    for name in ("n_tasks", "classes_per_task", "input_dim", "samples_per_class"):
        need(getattr(d, name) > 0, f"data.{name}", f"must be positive, got {getattr(d, name)}")
    try:
        cfg.encoder_config()
    except ValueError as exc:
        raise ConfigError(f"encoder: {exc}") from None


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named subsystem (and optional integer keys)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *map(int, keys)]))
