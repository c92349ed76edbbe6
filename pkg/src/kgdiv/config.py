"""Training configuration, presets and the flat ``key=value`` config format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from kgdiv.errors import ContractError

ABLATIONS = ("no_kg", "no_relation_encoding", "no_del", "no_cau")


@dataclass
class TrainConfig:
    dim: int = 64
    kg_layers: int = 2
    lgc_layers: int = 2
    lr: float = 0.001
    lambda_align: float = 0.5
    lambda_uniform: float = 0.4
    lambda_reg: float = 1e-5
    batch_size: int = 1024
    seed: int = 2024
    patience: int = 10
    max_epochs: int = 300
    no_kg: bool = False
    no_relation_encoding: bool = False
    no_del: bool = False
    no_cau: bool = False
    deterministic: bool = True
    bpr_mean: bool = False
    normalize_uniformity: bool = False
    align_pairs: int = 0  # anchors per batch for the alignment term; 0 means batch size
    precision: str = "float32"
    eval_k: int = 20

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dim < 1:
            raise ContractError("dim must be >= 1")
        if self.kg_layers < 0 or self.lgc_layers < 0:
            raise ContractError("layer counts must be >= 0")
        for name in ("lambda_align", "lambda_uniform", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0 or self.lr <= 0:
            raise ContractError("batch_size >= 1, max_epochs >= 0 and lr > 0 required")
        if self.precision not in ("float32", "float64"):
            raise ContractError("precision must be float32 or float64")

    # ablations are applied here so every consumer sees the same effective model
    @property
    def effective_kg_layers(self) -> int:
        return 0 if self.no_kg else self.kg_layers

    @property
    def effective_lambda_align(self) -> float:
        return 0.0 if self.no_cau else self.lambda_align

    @property
    def effective_lambda_uniform(self) -> float:
        return 0.0 if self.no_cau else self.lambda_uniform

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.to_dict().items())


ALIASES = {"weight_decay": "lambda_reg", "lambda1": "lambda_align", "lambda2": "lambda_uniform",
           "lambda3": "lambda_reg", "L": "kg_layers", "K": "lgc_layers"}

PRESETS = {
    "mf": {"kg_layers": 0, "lgc_layers": 0, "lambda_align": 0.0, "lambda_uniform": 0.0},
    "lightgcn": {"kg_layers": 0, "lambda_align": 0.0, "lambda_uniform": 0.0},
    "kg-diverse": {},
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(field_type, raw: str):
    t = field_type if isinstance(field_type, str) else field_type.__name__
    if t == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"not a boolean: {raw!r}")
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    return raw.strip()


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_pairs(lines) -> dict[str, str]:
    """``key=value`` lines to a dict; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    return parse_pairs(Path(path).read_text(encoding="utf-8").splitlines())


def apply_overrides(config: TrainConfig, pairs: dict[str, str], strict: bool = True) -> TrainConfig:
    """Apply string overrides; unknown keys raise unless ``strict`` is off (then they are ignored)."""
    changes = {}
    for key, raw in pairs.items():
        key = ALIASES.get(key, key)
        if key not in _TYPES:
            if strict:
                raise ContractError(f"unknown config key {key!r}")
            continue
        changes[key] = _coerce(_TYPES[key], raw)
    return config.replace(**changes)


def preset(name: str, base: TrainConfig | None = None) -> TrainConfig:
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return (base or TrainConfig()).replace(**PRESETS[name])
