"""Declarative pipeline configuration (YAML) with ``IMVAE_*`` overrides.

Environment variables of the form ``IMVAE_<SECTION>__<KEY>`` override single
entries, e.g. ``IMVAE_MODEL__LR=1e-3`` or ``IMVAE_CORPUS__K_O=0.25``. Values
are parsed as YAML scalars.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .psg import VISIBILITY_POLICIES, PSGConfig
from .synthetic import SyntheticSpec
from .trainer import RunConfig, config_hash

ENV_PREFIX = "IMVAE_"


@dataclass(frozen=True)
class DataConfig:
    """Rating files for the two domains; both empty means a synthetic corpus."""

    x_path: str | None = None
    y_path: str | None = None
    delimiter: str | None = None
    synthetic: dict = field(default_factory=dict)

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        known = {f.name for f in fields(SyntheticSpec)}
        unknown = set(self.synthetic) - known
        if unknown:
            raise ConfigError(f"unknown data.synthetic keys: {sorted(unknown)}")
        return SyntheticSpec(**{"seed": seed, **self.synthetic})


@dataclass(frozen=True)
class CorpusConfig:
    T: int = 20
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    k_o: float = 1.0
    k_cs: float = 0.2
    density: float = 1.0


@dataclass(frozen=True)
class PSGSection:
    d: int = 128
    layers: int = 3
    epochs: int = 1000
    lr: float = 1e-3
    neg_per_pos: int = 1
    val_fraction: float = 0.2
    batch_size: int = 2048
    weight_decay: float = 1e-4
    init_std: float = 0.1
    patience: int | None = None
    visibility_policy: str = "all_visible"

    def psg_config(self, seed: int, top_k: int) -> PSGConfig:
        kw = asdict(self)
        kw.pop("visibility_policy")
        return PSGConfig(seed=seed, top_k=top_k, **kw)


@dataclass(frozen=True)
class EvalConfig:
    negatives: int = 999
    k: int = 10
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class SweepConfig:
    density: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    overlap: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    T: tuple[int, ...] = ()
    lambda_a: tuple[float, ...] = ()
    lambda_t: tuple[float, ...] = ()


_SECTIONS = {
    "data": DataConfig,
    "corpus": CorpusConfig,
    "psg": PSGSection,
    "model": RunConfig,
    "eval": EvalConfig,
    "sweep": SweepConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    data: DataConfig = DataConfig()
    corpus: CorpusConfig = CorpusConfig()
    psg: PSGSection = PSGSection()
    model: RunConfig = RunConfig()
    eval: EvalConfig = EvalConfig()
    sweep: SweepConfig = SweepConfig()
    seed: int = 0
    out: str = "runs"

    def validate(self) -> "PipelineConfig":
        c = self.corpus
        if len(c.ratios) != 3 or abs(sum(c.ratios) - 1) > 1e-9 or min(c.ratios) < 0:
            raise ConfigError(f"corpus.ratios must be three non-negative shares summing to 1, got {c.ratios}")
        if not 0 <= c.k_o <= 1 or not 0 <= c.k_cs <= 1:
            raise ConfigError("corpus.k_o and corpus.k_cs must lie in [0, 1]")
        if not 0 < c.density <= 1:
            raise ConfigError("corpus.density must lie in (0, 1]")
        if c.T != self.model.T:
            raise ConfigError(f"corpus.T ({c.T}) and model.T ({self.model.T}) disagree")
        if self.psg.visibility_policy not in VISIBILITY_POLICIES:
            raise ConfigError(f"psg.visibility_policy must be one of {VISIBILITY_POLICIES}")
        if bool(self.data.x_path) != bool(self.data.y_path):
            raise ConfigError("data.x_path and data.y_path must be given together")
        if self.eval.negatives <= 0 or self.eval.k <= 0 or not self.eval.seeds:
            raise ConfigError("eval.negatives and eval.k must be positive and eval.seeds non-empty")
        self.model.validate()
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        return config_hash({n: d[n] for n in names})


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(cls, name: str, value: Any):
    default = next(f for f in fields(cls) if f.name == name).default
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, (int, float)) and not isinstance(default, bool) and isinstance(value, str):
        # YAML 1.1 reads exponent forms such as 1e-3 as strings
        try:
            return type(default)(value)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {value!r}") from None
    return value


def _build(cls, section: str, payload: Mapping | None):
    if payload is None:
        return cls()
    if not isinstance(payload, Mapping):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**{k: _coerce(cls, k, v) for k, v in payload.items()})
    except TypeError as exc:
        raise ConfigError(f"bad section {section!r}: {exc}") from exc


def from_dict(payload: Mapping | None) -> PipelineConfig:
    payload = dict(payload or {})
    top = {f.name for f in fields(PipelineConfig)}
    unknown = set(payload) - top
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    kw = {name: _build(cls, name, payload.get(name)) for name, cls in _SECTIONS.items()}
    for name in ("seed", "out"):
        if name in payload:
            kw[name] = payload[name]
    return PipelineConfig(**kw)


def _env_overrides(env: Mapping[str, str]) -> dict:
    out: dict = {}
    for key, raw in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        value = yaml.safe_load(raw)
        if len(path) == 1:
            out[path[0]] = value
        elif len(path) == 2:
            out.setdefault(path[0], {})[path[1]] = value
        else:
            raise ConfigError(f"cannot map environment variable {key}")
    return out


def _merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k] = _merge(merged[k], v)
        else:
            merged[k] = v
    return merged


def _match_case(payload: dict, overrides: dict) -> dict:
    """Environment names are upper-cased; map them back onto field names like ``T``."""
    fixed = {}
    for section, value in overrides.items():
        cls = _SECTIONS.get(section)
        if isinstance(value, dict) and cls is not None:
            names = {f.name.lower(): f.name for f in fields(cls)}
            fixed[section] = {names.get(k, k): v for k, v in value.items()}
        else:
            fixed[section] = value
    return fixed


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None,
                overrides: Mapping | None = None) -> PipelineConfig:
    """Read the YAML file (if any), then apply environment and explicit overrides."""
    payload: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError(f"{path} must contain a mapping")
    env_over = _match_case(payload, _env_overrides(os.environ if env is None else env))
    payload = _merge(payload, env_over)
    payload = _merge(payload, dict(overrides or {}))
    return from_dict(payload).validate()


def with_model(config: PipelineConfig, **changes) -> PipelineConfig:
    return replace(config, model=replace(config.model, **changes))
