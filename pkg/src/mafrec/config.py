"""Training configuration and the flat ``key = value`` config-file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

FUSIONS = ("sum", "concat", "gate")
ALL_MODALITIES = ("image", "text", "category")


@dataclass(frozen=True)
class TrainConfig:
    n: int = 20
    d: int = 64
    d_prime: int = 32
    blocks: int = 2
    heads: int = 4
    lam: float = 10.0
    fusion: str = "sum"
    dropout: float = 0.2
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 128
    seed: int = 0
    modalities: tuple[str, ...] = ALL_MODALITIES
    tied: bool = True
    init_std: float = 0.02
    ln_eps: float = 1e-12

    def __post_init__(self):
        mods = self.modalities
        if isinstance(mods, str):
            mods = parse_modalities(mods)
        unknown = set(mods) - set(ALL_MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")
        object.__setattr__(self, "modalities", tuple(m for m in ALL_MODALITIES if m in set(mods)))
        object.__setattr__(self, "fusion", str(self.fusion).lower())
        self.validate()

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.heads < 1 or self.d % self.heads:
            raise ValueError(f"heads={self.heads} must divide d={self.d}")
        if not 1 <= self.d_prime <= self.d:
            raise ValueError(f"d_prime={self.d_prime} must satisfy 1 <= d_prime <= d={self.d}")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.ln_eps <= 0:
            raise ValueError("ln_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["modalities"] = list(self.modalities)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        check_keys(data)
        data = dict(data)
        if "modalities" in data and not isinstance(data["modalities"], str):
            data["modalities"] = tuple(data["modalities"])
        return cls(**data)


# full-scale settings; the window length n is a free choice here
FULL_PROFILE = TrainConfig(n=50, d=256, d_prime=128, blocks=4, heads=8, lam=10.0,
                           lr=1e-4, epochs=200)
DESK_PROFILE = TrainConfig()


def valid_keys() -> list[str]:
    return [f.name for f in fields(TrainConfig)]


def check_keys(data: dict[str, Any]) -> None:
    unknown = sorted(set(data) - set(valid_keys()))
    if unknown:
        raise KeyError(f"unknown config key(s) {unknown}; valid keys: {', '.join(valid_keys())}")


def parse_modalities(text: str) -> tuple[str, ...]:
    text = text.strip().lower()
    if text in ("", "none"):
        return ()
    if text == "all":
        return ALL_MODALITIES
    return tuple(p.strip() for p in text.split(",") if p.strip())


def coerce_value(key: str, raw: str) -> Any:
    ftype = {f.name: f.type for f in fields(TrainConfig)}[key]
    raw = raw.strip()
    if key == "modalities":
        return parse_modalities(raw)
    if ftype == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw


def read_flat(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def resolve_config(
    file_values: dict[str, str] | None = None,
    overrides: dict[str, str] | None = None,
    base: TrainConfig = DESK_PROFILE,
) -> TrainConfig:
    """Defaults, then file values, then flag overrides (flags win)."""
    merged: dict[str, str] = {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    check_keys(merged)
    changes = {k: coerce_value(k, str(v)) for k, v in merged.items()}
    return base.replace(**changes)


def write_flat(config: TrainConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in config.to_dict().items():
            if key == "modalities":
                value = ",".join(value) if value else "none"
            fh.write(f"{key} = {value}\n")
