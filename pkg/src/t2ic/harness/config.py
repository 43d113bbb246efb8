"""Flat ``key = value`` run configuration files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..encoders import DamsmGammas, PretrainConfig
from ..losses import LossWeights


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, kind, key: str):
    try:
        if kind is bool:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


@dataclass(frozen=True)
class RunConfig:
    data: str
    out: str
    encoders: str
    captioner: str
    classifier: str
    seed: int
    epochs: int = 30
    batch_size: int = 16
    block_type: str = "ssacn"
    tau: float = 0.5
    lambda1: float = 0.05
    lambda2: float = 0.2
    lambda3: float = 0.2
    lambda4: float = 1.0
    lr_g: float = 1e-4
    lr_d: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    eval_every: int = 1
    eval_n: int = 1000
    max_steps: int = 0
    adv_loss: str = "hinge"
    damsm_both: bool = False
    proj_head: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.block_type not in ("ssacn", "style"):
            raise ConfigError(f"block_type must be ssacn or style, got {self.block_type!r}")
        if self.adv_loss != "hinge":
            raise ConfigError(f"only adv_loss = hinge is supported, got {self.adv_loss!r}")
        if self.proj_head:
            raise ConfigError("proj_head is reserved; contrastive terms use encoder globals directly")
        if self.epochs < 1 or self.eval_every < 1:
            raise ConfigError("epochs and eval_every must be positive")
        self.weights  # validates tau and lambdas

    @property
    def weights(self) -> LossWeights:
        try:
            return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.tau)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


PATH_KEYS = ("data", "out", "encoders", "captioner", "classifier")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _build(cls, kv: dict[str, str], source: str, path_keys=(), base: Path | None = None):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(kv) - set(known))
    if unknown:
        raise ConfigError(f"{source}: unknown config key(s): {', '.join(unknown)}")
    kinds = {"int": int, "float": float, "str": str, "bool": bool}
    values = {}
    for key, raw in kv.items():
        kind = kinds[known[key].type] if isinstance(known[key].type, str) else known[key].type
        value = _coerce(raw, kind, key)
        if key in path_keys and base is not None:
            value = str((base / value).resolve()) if not Path(value).is_absolute() else value
        values[key] = value
    missing = [n for n, f in known.items()
               if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING and n not in values]
    if missing:
        raise ConfigError(f"{source}: missing required key(s): {', '.join(missing)}")
    return cls(**values)


def run_config_from_text(text: str, source: str = "<config>", base: Path | None = None) -> RunConfig:
    return _build(RunConfig, parse_kv(text, source), source, PATH_KEYS, base)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    return run_config_from_text(path.read_text(encoding="utf-8"), str(path), path.parent)


@dataclass(frozen=True)
class _PretrainKeys:
    epochs: int = 20
    lr: float = 2e-3
    batch_size: int = 32
    seed: int = 0
    tau: float = 0.5
    gamma1: float = 5.0
    gamma2: float = 5.0
    gamma3: float = 10.0


def load_pretrain_config(path) -> PretrainConfig:
    path = Path(path)
    k = _build(_PretrainKeys, parse_kv(path.read_text(encoding="utf-8"), str(path)), str(path))
    return PretrainConfig(epochs=k.epochs, lr=k.lr, batch_size=k.batch_size, seed=k.seed, tau=k.tau,
                          gammas=DamsmGammas(k.gamma1, k.gamma2, k.gamma3))


def parse_rows(text: str, source: str = "<rows>") -> list[tuple[str, dict[str, str]]]:
    """Ablation rows, one per line: ``name: key=value, key=value``."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'name: key=value, ...'")
        name, rest = (p.strip() for p in line.split(":", 1))
        overrides = {}
        for item in filter(None, (p.strip() for p in rest.split(","))):
            if "=" not in item:
                raise ConfigError(f"{source}:{lineno}: bad override {item!r}")
            k, v = (p.strip() for p in item.split("=", 1))
            overrides[k] = v
        rows.append((name, overrides))
    if not rows:
        raise ConfigError(f"{source}: no ablation rows")
    return rows


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    kv = parse_kv(cfg.to_text())
    for key in overrides:
        if key not in kv:
            raise ConfigError(f"unknown config key in override: {key}")
    kv.update(overrides)
    return run_config_from_text("".join(f"{k} = {v}\n" for k, v in kv.items()))
