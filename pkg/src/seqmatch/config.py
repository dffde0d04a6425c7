"""Run configuration: a flat UTF-8 ``key = value`` file format.

Lines hold one ``key = value`` pair; ``#`` starts a comment; blank lines
are ignored. Keys are strict: anything unrecognized is rejected so typos
cannot silently fall back to defaults. The canonical serialization
(sorted keys, normalized values) is what gets hashed into checkpoints.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .encoder import EncoderConfig
from .recurrent import LayerSpec, StackConfig

__all__ = [
    "ConfigError",
    "ModelConfig",
    "TrainConfig",
    "RunConfig",
    "VARIANTS",
    "parse_kv_text",
    "load_kv",
    "format_kv",
]

# State-to-state kernel geometry presets for a three-layer stack. The first
# layer always reads the cube through a 3x3 window; 'fc' is the dense
# baseline: 1x1 kernels on a 1x1 grid, fed by collapsed attention.
VARIANTS = {
    "G55": ((3, 3), (5, 5), (5, 5)),
    "G91": ((3, 3), (9, 9), (1, 1)),
    "G19": ((3, 3), (1, 1), (9, 9)),
    "fc": ((1, 1), (1, 1), (1, 1)),
}


class ConfigError(ValueError):
    """A config file or config value violates its contract."""


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines into a str->str mapping."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_kv(path) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_kv_text(fh.read(), source=str(path))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def format_kv(mapping: dict[str, str]) -> str:
    """Canonical text form: sorted keys, one pair per line."""
    return "".join(f"{k} = {mapping[k]}\n" for k in sorted(mapping))


# -- typed value parsing -----------------------------------------------------


def _p_int(s: str) -> int:
    return int(s, 10)


def _p_float(s: str) -> float:
    return float(s)


def _p_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _p_ints(s: str) -> tuple[int, ...]:
    return tuple(int(part.strip(), 10) for part in s.split(",") if part.strip())


def _p_kernels(s: str) -> tuple[tuple[int, int], ...]:
    out = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        a, _, b = part.partition("x")
        out.append((int(a, 10), int(b, 10)))
    return tuple(out)


def _p_str(s: str) -> str:
    return s


def _f_default(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _f_ints(v) -> str:
    return ",".join(str(x) for x in v)


def _f_kernels(v) -> str:
    return ",".join(f"{a}x{b}" for a, b in v)


def _f_float(v) -> str:
    return repr(float(v))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches; everything downstream derives from these."""

    frame_h: int = 32
    frame_w: int = 32
    encoder_channels: tuple[int, ...] = (16, 32, 32)
    encoder_padding: str = "same"
    variant: str = "G55"
    kernels: tuple[tuple[int, int], ...] = ()
    channels: tuple[int, ...] = (8, 16, 16)
    pools: tuple[int, ...] = (1, 1)
    bias: bool = False
    init_units: int = 16
    pool_mode: str = "attention"
    mute_attention: bool = False
    collapse_attention: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS and not self.kernels:
            raise ConfigError(
                f"unknown variant {self.variant!r}; pick one of "
                f"{sorted(VARIANTS)} or give explicit kernels"
            )
        if self.pool_mode not in ("attention", "mean", "max", "fisher"):
            raise ConfigError(f"unknown pool_mode {self.pool_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.kernels and len(self.kernels) != len(self.channels):
            raise ConfigError(
                f"{len(self.channels)} layers need {len(self.channels)} kernels, "
                f"got {len(self.kernels)}"
            )
        if not self.kernels and len(self.channels) != 3:
            raise ConfigError(
                f"variant presets describe 3 layers; give explicit kernels for "
                f"{len(self.channels)} layers"
            )

    @property
    def collapses(self) -> bool:
        return self.collapse_attention or self.variant == "fc"

    def resolved_kernels(self) -> tuple[tuple[int, int], ...]:
        return self.kernels if self.kernels else VARIANTS[self.variant]

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            frame_h=self.frame_h,
            frame_w=self.frame_w,
            channels=self.encoder_channels,
            padding=self.encoder_padding,
        )

    def stack_config(self) -> StackConfig:
        enc = self.encoder_config()
        grid = (1, 1) if self.collapses else enc.cube_hw()
        kernels = self.resolved_kernels()
        layers = tuple(
            LayerSpec(channels=c, kernel=k) for c, k in zip(self.channels, kernels)
        )
        try:
            return StackConfig(
                input_hw=grid,
                input_channels=enc.depth,
                layers=layers,
                pools=self.pools,
                bias=self.bias,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e


@dataclass(frozen=True)
class TrainConfig:
    """Objective and optimizer settings."""

    seed: int = 0
    epochs: int = 100
    window: int = 20
    batch_pairs: int = 10
    lam: float = 1.0
    clip: float = 5.0
    dropout: float = 0.7
    lr: float = 1e-3
    rms_decay: float = 0.9
    rms_eps: float = 1e-6
    init: str = "uniform"
    augment: bool = True
    freeze_encoder: bool = False
    checkpoint_every: int = 100
    gmm_components: int = 4

    def __post_init__(self):
        if self.init not in ("uniform", "scaled"):
            raise ConfigError(f"init must be 'uniform' or 'scaled', got {self.init!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.window < 1:
            raise ConfigError(f"window must be positive, got {self.window}")
        if self.batch_pairs < 2:
            raise ConfigError(f"batch_pairs must be at least 2, got {self.batch_pairs}")
        if self.clip <= 0:
            raise ConfigError(f"clip must be positive, got {self.clip}")


# key -> (section, field, parse, format)
_SCHEMA = {
    "frame_h": ("model", "frame_h", _p_int, _f_default),
    "frame_w": ("model", "frame_w", _p_int, _f_default),
    "encoder_channels": ("model", "encoder_channels", _p_ints, _f_ints),
    "encoder_padding": ("model", "encoder_padding", _p_str, _f_default),
    "variant": ("model", "variant", _p_str, _f_default),
    "kernels": ("model", "kernels", _p_kernels, _f_kernels),
    "channels": ("model", "channels", _p_ints, _f_ints),
    "pools": ("model", "pools", _p_ints, _f_ints),
    "bias": ("model", "bias", _p_bool, _f_default),
    "init_units": ("model", "init_units", _p_int, _f_default),
    "pool_mode": ("model", "pool_mode", _p_str, _f_default),
    "mute_attention": ("model", "mute_attention", _p_bool, _f_default),
    "collapse_attention": ("model", "collapse_attention", _p_bool, _f_default),
    "dtype": ("model", "dtype", _p_str, _f_default),
    "seed": ("train", "seed", _p_int, _f_default),
    "epochs": ("train", "epochs", _p_int, _f_default),
    "window": ("train", "window", _p_int, _f_default),
    "batch_pairs": ("train", "batch_pairs", _p_int, _f_default),
    "lambda": ("train", "lam", _p_float, _f_float),
    "clip": ("train", "clip", _p_float, _f_float),
    "dropout": ("train", "dropout", _p_float, _f_float),
    "lr": ("train", "lr", _p_float, _f_float),
    "rms_decay": ("train", "rms_decay", _p_float, _f_float),
    "rms_eps": ("train", "rms_eps", _p_float, _f_float),
    "init": ("train", "init", _p_str, _f_default),
    "augment": ("train", "augment", _p_bool, _f_default),
    "freeze_encoder": ("train", "freeze_encoder", _p_bool, _f_default),
    "checkpoint_every": ("train", "checkpoint_every", _p_int, _f_default),
    "gmm_components": ("train", "gmm_components", _p_int, _f_default),
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()

    @classmethod
    def from_mapping(cls, mapping: dict[str, str], source: str = "<config>") -> "RunConfig":
        model_kw: dict = {}
        train_kw: dict = {}
        for key, raw in mapping.items():
            if key not in _SCHEMA:
                raise ConfigError(f"{source}: unknown config key {key!r}")
            section, field, parse, _fmt = _SCHEMA[key]
            try:
                value = parse(raw)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{source}: bad value for {key!r}: {e}") from e
            (model_kw if section == "model" else train_kw)[field] = value
        try:
            return cls(model=ModelConfig(**model_kw), train=TrainConfig(**train_kw))
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{source}: {e}") from e

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_mapping(load_kv(path), source=str(path))

    def to_mapping(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for key, (section, field, _parse, fmt) in _SCHEMA.items():
            obj = self.model if section == "model" else self.train
            out[key] = fmt(getattr(obj, field))
        return out

    def canonical_text(self) -> str:
        return format_kv(self.to_mapping())

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def with_overrides(self, **kv) -> "RunConfig":
        """Apply field-level overrides; keys use the dataclass field names."""
        model_fields = {f.name for f in fields(ModelConfig)}
        train_fields = {f.name for f in fields(TrainConfig)}
        model_kw = {k: v for k, v in kv.items() if k in model_fields}
        train_kw = {k: v for k, v in kv.items() if k in train_fields}
        leftover = set(kv) - set(model_kw) - set(train_kw)
        if leftover:
            raise ConfigError(f"unknown override fields {sorted(leftover)}")
        return RunConfig(
            model=replace(self.model, **model_kw) if model_kw else self.model,
            train=replace(self.train, **train_kw) if train_kw else self.train,
        )
