"""Experiment configuration: YAML file, schema validation, environment overrides, hashing."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

ENV_PREFIX = "RHG_"
STUDIES = ("bs-hms", "bs-oosp", "heston-oosp", "nsde-compare")


class ConfigError(ValueError):
    """Raised for unreadable or invalid configuration files."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Market(_Section):
    family: Literal["bs", "heston"] = "bs"
    sigma: float = Field(0.2, gt=0)
    kappa: float = Field(1.0, gt=0)
    beta: float = Field(0.04, gt=0)
    vol_of_vol: float = Field(0.5, gt=0)
    rho: float = Field(-0.7, ge=-1, le=1)
    s0: float = Field(1.0, gt=0)
    steps: int = Field(18, ge=1)
    dt: float = Field(5 / 255, gt=0)
    strike: float = Field(1.0, gt=0)


class Risk(_Section):
    kind: Literal["entropic", "exp-utility", "cvar", "linear"] = "entropic"
    lam: float = Field(130.0, gt=0)
    alpha: float = Field(0.5, gt=0, lt=1)

    def as_dict(self) -> dict:
        if self.kind in ("entropic", "exp-utility"):
            return {"kind": self.kind, "lam": self.lam}
        if self.kind == "cvar":
            return {"kind": "cvar", "alpha": self.alpha}
        return {"kind": "linear"}


class Hedger(_Section):
    hidden: list[int] = [128, 128]
    # log of the asset level keeps the input centred; the raw level sits in a narrow band around s0
    features: list[str] = ["time", "log-asset"]
    trade: Optional[list[str]] = None


class Pretrain(_Section):
    batch_sizes: list[int] = [2**8, 2**10, 2**12, 2**14]
    passes: int = Field(5, ge=1)
    pool: int = Field(2**16, ge=1)
    lr: float = Field(1e-3, gt=0)
    eval_paths: int = Field(2**14, ge=1)
    # the pretrain pool is scaled only if this is set; the reference hedge is cheap enough at full size
    scaled: bool = False
    checkpoint: Optional[Path] = None


class Gan(_Section):
    epochs: int = Field(1000, ge=1)
    batch: int = Field(2**16, ge=1)
    gen_lr: float = Field(1e-4, gt=0)
    hedger_lr: float = Field(1e-3, gt=0)
    ratio: int = Field(1, ge=1)
    chunk: int = Field(2**13, ge=1)


class Penalty(_Section):
    kind: Literal["vol-mse", "hms", "sig-mmd"] = "vol-mse"
    aversions: list[float] = [100.0]
    depth: int = Field(2, ge=1, le=6)
    chain: list[str] = ["time", "lead-lag"]
    channels: list[int] = [0]
    reference_paths: int = Field(2**14, ge=2)

    @field_validator("aversions")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("aversion grid must be non-empty")
        if any(a <= 0 for a in v):
            raise ValueError("aversions must be positive")
        return v


class Scenarios(_Section):
    kind: Literal["bs-inverse", "heston-differenced", "file"] = "bs-inverse"
    M: int = Field(200, ge=1)
    n_obs: int = Field(45, ge=2)
    lags: int = Field(10, ge=1, le=10)
    daily_file: Optional[Path] = None
    synthetic_days: int = Field(40, ge=2)
    file: Optional[Path] = None
    eval_paths: int = Field(10_000, ge=1000)
    test_hedge: bool = True


class Hms(_Section):
    n_space: int = Field(400, ge=200)
    n_time: int = Field(400, ge=1)
    bounds: tuple[float, float] = (0.5, 2.0)
    window: tuple[float, float] = (0.8, 1.2)
    t_eval: Optional[float] = None


class Nsde(_Section):
    hidden: list[int] = [36, 36, 36]
    steps: int = Field(300, ge=1)
    batch: int = Field(2048, ge=2)
    lr: float = Field(1e-3, gt=0)
    depth: int = Field(2, ge=1, le=6)
    trainable_s0: bool = False


class ExperimentConfig(_Section):
    study: Literal["bs-hms", "bs-oosp", "heston-oosp", "nsde-compare"]
    seed: int = Field(0, ge=0)
    scale: float = Field(0.05, gt=0, le=1)
    out: Path = Path("runs")
    market: Market = Market()
    risk: Risk = Risk()
    hedger: Hedger = Hedger()
    pretrain: Pretrain = Pretrain()
    gan: Gan = Gan()
    penalty: Penalty = Penalty()
    scenarios: Scenarios = Scenarios()
    hms: Hms = Hms()
    nsde: Nsde = Nsde()

    @model_validator(mode="after")
    def _files_exist(self):
        for label, p in (
            ("pretrain.checkpoint", self.pretrain.checkpoint),
            ("scenarios.daily_file", self.scenarios.daily_file),
            ("scenarios.file", self.scenarios.file),
        ):
            if p is not None and not Path(p).is_file():
                raise ValueError(f"{label}: file {p} does not exist")
        if self.study == "heston-oosp" and self.market.family != "heston":
            raise ValueError("market.family: heston-oosp needs the heston family")
        if self.study in ("bs-hms", "bs-oosp") and self.market.family != "bs":
            raise ValueError(f"market.family: {self.study} needs the bs family")
        return self

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form; the output directory does not count."""
        data = self.model_dump(mode="json", exclude={"out"})
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _coerce(text: str):
    return yaml.safe_load(text)


def env_overrides(environ=None) -> dict:
    """RHG_SEED / RHG_SCALE / RHG_OUT and RHG_<SECTION>__<FIELD> become nested overrides."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, val in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _coerce(val)
    return out


def _merge(base: dict, upd: dict) -> dict:
    res = dict(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(res.get(k), dict):
            res[k] = _merge(res[k], v)
        else:
            res[k] = v
    return res


def _fmt_errors(exc: ValidationError) -> str:
    lines = []
    for e in exc.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "\n".join(lines)


def load_config(path: str | Path, overrides: dict | None = None, environ=None) -> ExperimentConfig:
    """Read, merge (file < environment < explicit overrides) and validate.

    Relative file paths inside the config resolve against the config's directory.
    """
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    raw = _merge(raw, env_overrides(environ))
    raw = _merge(raw, {k: v for k, v in (overrides or {}).items() if v is not None})
    for section, key in (("pretrain", "checkpoint"), ("scenarios", "daily_file"), ("scenarios", "file")):
        val = raw.get(section, {}).get(key) if isinstance(raw.get(section), dict) else None
        if val is not None and not Path(val).is_absolute():
            raw[section][key] = str(p.parent / val)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{p}: invalid configuration\n{_fmt_errors(exc)}") from exc
