"""Model/training configuration and the flat ``key = value`` file format.

Grammar, one entry per line::

    # comment
    key = value        # trailing comments allowed

Blank lines are ignored.  Values are parsed according to the target field's
type: ints, floats, booleans (true/false/1/0/yes/no), strings, and
comma-separated lists for tuple fields.  Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

GROUP_SIZES = (8, 5, 10)
MEMORY_MODES = ("none", "summary", "summary+retrieval")
INPUT_SOURCES = ("both", "features", "embeddings")
READOUTS = ("symptom-query", "mean-pooled")


class ConfigError(ValueError):
    pass


def default_group_map(F: int) -> tuple:
    """Feature -> group (1, 2, 3).  At F=23 this is 8 symptom / 5 linguistic / 10 distortion."""
    if F == sum(GROUP_SIZES):
        return tuple([1] * 8 + [2] * 5 + [3] * 10)
    return tuple(1 + (i % 3) for i in range(F))


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    h: int = 4
    d_ff: int = 256
    L_enc: int = 2
    L_dec: int = 4
    F: int = 23
    J: int = 8
    S: int = 16
    N_max: int = 80
    d_e: int = 4096
    score_mlp_hidden: int = 32
    dropout: float = 0.1
    group_map: tuple = ()
    memory_mode: str = "summary+retrieval"
    input_source: str = "both"
    readout: str = "symptom-query"
    decoder_self_attn: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if not self.group_map:
            object.__setattr__(self, "group_map", default_group_map(self.F))
        object.__setattr__(self, "group_map", tuple(int(g) for g in self.group_map))
        self.validate()

    def validate(self):
        if self.d % self.h:
            raise ConfigError(f"d={self.d} is not divisible by h={self.h}")
        if len(self.group_map) != self.F or not set(self.group_map) <= {1, 2, 3}:
            raise ConfigError(f"group_map must assign each of F={self.F} features to 1, 2 or 3")
        if self.F == sum(GROUP_SIZES):
            counts = tuple(self.group_map.count(g) for g in (1, 2, 3))
            if counts != GROUP_SIZES:
                raise ConfigError(f"group_map must hold 8/5/10 features per group at F=23, got {counts}")
        if self.memory_mode not in MEMORY_MODES:
            raise ConfigError(f"memory_mode must be one of {MEMORY_MODES}")
        if self.input_source not in INPUT_SOURCES:
            raise ConfigError(f"input_source must be one of {INPUT_SOURCES}")
        if self.readout not in READOUTS:
            raise ConfigError(f"readout must be one of {READOUTS}")
        if min(self.L_enc, self.L_dec) < 0 or min(self.S, self.N_max, self.J, self.d_e) < 1:
            raise ConfigError("layer counts must be >= 0 and S, N_max, J, d_e >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 32
    warmup_ratio: float = 0.05
    lambda_sym: float = 0.5
    p_hist: float = 0.1
    max_epochs: int = 100
    patience: int = 8
    clip_norm: float = 1.0
    huber_delta: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    no_decay: tuple = ()
    speaker_view: str = "client"
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.clip_norm, self.huber_delta, self.max_epochs) <= 0:
            raise ConfigError("lr, batch_size, clip_norm, huber_delta, max_epochs must be positive")
        if self.weight_decay < 0 or self.lambda_sym < 0:
            raise ConfigError("weight_decay and lambda_sym must be >= 0")
        if not 0.0 <= self.p_hist <= 1.0:
            raise ConfigError("p_hist must lie in [0, 1]")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.speaker_view not in ("client", "counselor", "both"):
            raise ConfigError("speaker_view must be client, counselor or both")

    def replace(self, **kw) -> "TrainConfig":
        """Replace training or model fields by name."""
        model_names = {f.name for f in dataclasses.fields(ModelConfig)}
        mkw = {k: v for k, v in kw.items() if k in model_names}
        if "F" in mkw and "group_map" not in mkw:
            mkw["group_map"] = ()
        tkw = {k: v for k, v in kw.items() if k not in model_names}
        model = dataclasses.replace(self.model, **mkw) if mkw else self.model
        return dataclasses.replace(self, model=model, **tkw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        d["model"] = dataclasses.asdict(self.model)
        return _jsonable(d)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**_coerce_all(ModelConfig, d.pop("model", {})))
        return cls(model=model, **_coerce_all(cls, d))

    def fingerprint(self, exclude_seed=True) -> str:
        d = self.to_dict()
        if exclude_seed:
            d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _parse_value(raw, typ, key):
    try:
        if isinstance(raw, str):
            s = raw.strip()
            if typ is bool:
                low = s.lower()
                if low in ("true", "1", "yes", "on"):
                    return True
                if low in ("false", "0", "no", "off"):
                    return False
                raise ValueError(s)
            if typ is int:
                return int(s)
            if typ is float:
                return float(s)
            if typ is tuple:
                return tuple(p.strip() for p in s.split(",") if p.strip())
            return s
        if typ is tuple:
            return tuple(raw)
        if typ is float:
            return float(raw)
        if typ is int and isinstance(raw, bool):
            raise ValueError(raw)
        return typ(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc


def _coerce_all(cls, d):
    types = _field_types(cls)
    out = {}
    for k, v in d.items():
        if k not in types:
            raise ConfigError(f"unknown config key {k!r}")
        out[k] = _parse_value(v, types[k], k)
    return out


def parse_kv(text: str, source: str = "<config>") -> dict:
    """Parse the flat key-value grammar into a dict of raw strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def train_config_from_kv(values: dict, base: TrainConfig = None) -> TrainConfig:
    base = base or TrainConfig()
    mtypes = _field_types(ModelConfig)
    ttypes = _field_types(TrainConfig)
    kw = {}
    for k, v in values.items():
        if k in mtypes:
            kw[k] = _parse_value(v, mtypes[k], k)
            if k == "group_map":
                kw[k] = tuple(int(g) for g in kw[k])
        elif k in ttypes and k != "model":
            kw[k] = _parse_value(v, ttypes[k], k)
        else:
            raise ConfigError(f"unknown config key {k!r}")
    try:
        return base.replace(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_train_config(path, overrides: dict = None) -> TrainConfig:
    values = parse_kv(Path(path).read_text(encoding="utf-8"), str(path)) if path else {}
    values.update(overrides or {})
    return train_config_from_kv(values)


def format_kv(d: dict) -> str:
    lines = []
    for k, v in d.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
