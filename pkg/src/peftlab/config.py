"""Sectioned ``key = value`` run configuration.

Four sections: ``[data]``, ``[vqa]``, ``[diffusion]``, ``[eval]``. Every key
has a default; unknown sections or keys are rejected. Defaults are
desk-scale: small enough that the whole pipeline runs on one CPU core.
"""

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class DataSection:
    n_images: int = 64
    seed: int = 0
    image_size: int = 32


@dataclass
class VqaSection:
    d_model: int = 64
    n_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    patch_size: int = 4
    max_answer_len: int = 8
    freeze_vision: bool = True
    vision_warmup_steps: int = 0
    model_seed: int = 0
    epochs: int = 10
    batch_size: int = 8
    accumulation_steps: int = 1
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 20
    min_lr: float = 0.0
    grad_clip: float = 0.0


@dataclass
class DiffusionSection:
    timesteps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    latent_size: int = 8
    cond_dim: int = 32
    hidden: int = 32
    n_heads: int = 4
    n_blocks: int = 3
    model_seed: int = 0
    pretrain_steps: int = 600
    pretrain_images: int = 512
    lora_rank: int = 4
    lora_alpha: float = 4.0
    lora_targets: str = "query,key,value,output"
    epochs: int = 5
    batch_size: int = 4
    accumulation_steps: int = 1
    repeats: int = 8
    learning_rate: float = 5e-3
    weight_decay: float = 0.0
    warmup_steps: int = 20
    min_lr: float = 0.0
    eval_samples: int = 64
    sample_seed: int = 1234


@dataclass
class EvalSection:
    batch_size: int = 64
    feature_seed: int = 0
    feature_dim: int = 16


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    vqa: VqaSection = field(default_factory=VqaSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_text(self):
        parser = configparser.ConfigParser()
        for section in dataclasses.fields(self):
            values = getattr(self, section.name)
            parser[section.name] = {f.name: _fmt(getattr(values, f.name)) for f in dataclasses.fields(values)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def as_dict(self):
        return dataclasses.asdict(self)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _convert(raw, kind, where):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    known = {f.name: f for f in dataclasses.fields(cfg)}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"{source}: unknown section [{name}]")
        section = getattr(cfg, name)
        types = {f.name: f.type for f in dataclasses.fields(section)}
        for key, raw in parser[name].items():
            if key not in types:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            kind = {"int": int, "float": float, "bool": bool, "str": str}[
                types[key] if isinstance(types[key], str) else types[key].__name__
            ]
            setattr(section, key, _convert(raw, kind, f"{source} [{name}] {key}"))
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read(), source=path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
