"""Run configuration: one JSON object, optionally starting from a named preset.

Relative dataset paths resolve against the directory of the config file.
"""
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError
from .trainer import TrainConfig

_AMAZON_PROP = {"propensity_a": 0.6, "propensity_b": 2.6}
_FULL = {"variant": "full", "batch_size": 128, "lr_max": 0.005}
_PLUS = {"variant": "plus", "batch_size": 256, "lr_max": 0.008, "top_k": 800}
_TOY = {"epochs": 50, "batch_size": 32, "lr_max": 0.005, "seq_len": 16, "embed_dim": 64, "proj_dim": 16}

PRESETS = {
    "amazontitles-670k-full": {**_FULL, "epochs": 42, **_AMAZON_PROP},
    "amazontitles-670k-plus": {**_PLUS, "epochs": 35, "num_clusters": 65536, **_AMAZON_PROP},
    "wikiseealsotitles-350k-full": {**_FULL, "epochs": 42},
    "wikiseealsotitles-350k-plus": {**_PLUS, "epochs": 30, "num_clusters": 32768},
    "wikititles-500k-full": {**_FULL, "epochs": 33},
    "wikititles-500k-plus": {**_PLUS, "epochs": 27, "num_clusters": 32768},
    "amazontitles-3m-plus": {**_PLUS, "epochs": 35, "batch_size": 128, "num_clusters": 131072, **_AMAZON_PROP},
    "toy-full": {**_TOY, "variant": "full"},
    "toy-plus": {**_TOY, "variant": "plus", "num_clusters": 8, "top_k": 4},
}

_PATHS = ("train_text", "train_labels", "test_text", "test_labels", "embeddings", "output_dir")


@dataclass
class RunConfig:
    train_text: str = None
    train_labels: str = None
    test_text: str = None
    test_labels: str = None
    embeddings: str = None
    output_dir: str = "run"
    variant: str = "full"
    epochs: int = 42
    batch_size: int = 128
    lr_max: float = 0.005
    top_k: int = 800
    num_clusters: int = 65536
    seed: int = 0
    detach_fraction: float = 0.25
    warmup_fraction: float = 0.1
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    seq_len: int = 32
    embed_dim: int = 300
    proj_dim: int = 32
    tree_max_iter: int = 100
    propensity_a: float = 0.55
    propensity_b: float = 1.5
    predict_k: int = 5
    trials: int = 10
    deterministic: bool = True
    threads: int = None
    preset: str = None

    @classmethod
    def from_dict(cls, raw, base_dir=None):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        preset = raw.get("preset")
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
            values.update(PRESETS[preset])
        values.update(raw)
        for k, v in values.items():
            values[k] = _coerce(k, v, known[k])
        if base_dir is not None:
            for k in _PATHS:
                if values.get(k) is not None and not Path(values[k]).is_absolute():
                    values[k] = str(Path(base_dir) / values[k])
        cfg = cls(**values)
        return cfg.validate()

    @classmethod
    def load(cls, path, overrides=None):
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
        if overrides:
            raw.update(overrides)
        return cls.from_dict(raw, path.parent)

    def validate(self):
        self.train_config()
        self.encoder_config()
        if self.predict_k < 1 or self.trials < 1:
            raise ConfigError("predict_k and trials must be positive")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be positive")
        if len(self.betas) != 2:
            raise ConfigError("betas needs two values")
        return self

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_max=self.lr_max,
            top_k=self.top_k,
            num_clusters=self.num_clusters,
            seed=self.seed,
            variant=self.variant,
            detach_fraction=self.detach_fraction,
            warmup_fraction=self.warmup_fraction,
            betas=tuple(self.betas),
            eps=self.eps,
        ).validate()

    def encoder_config(self):
        return EncoderConfig(seq_len=self.seq_len, embed_dim=self.embed_dim, proj_dim=self.proj_dim).validate()

    def to_dict(self):
        return asdict(self)

    def require(self, *names):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ConfigError(f"config is missing {', '.join(missing)}")


def _coerce(name, value, f):
    kind = f.type
    if value is None:
        return None
    if kind is bool or kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if kind is int or kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if kind is float or kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if kind is str or kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string, got {value!r}")
        return value
    if kind is list or kind == "list":
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"{name} must be a list of numbers")
        return [float(v) for v in value]
    return value


def parse_override(text):
    """``key=value`` with a JSON value (bare words are taken as strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
