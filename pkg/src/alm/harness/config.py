"""Run configuration and its flat ``key.path = value`` text format.

Example::

    # pendulum.cfg
    env.name = pendulum
    agent.profile = desk
    agent.K = 3
    run.total_env_steps = 30000

``agent.profile`` (desk or full) picks the base agent settings; every other
``agent.*`` key overrides a field of that profile regardless of line order.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

from ..agent import AgentConfig
from ..errors import ContractError


class ConfigError(ValueError):
    """Malformed or unknown configuration entry; ``key`` names the offender."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class EnvConfig:
    name: str = "pendulum"
    noise_std: float = 0.0
    tabular_path: str = ""


@dataclass
class RunSettings:
    total_env_steps: int = 30_000
    warmup_steps: int = 5_000
    eval_every: int = 2_500
    eval_episodes: int = 5
    checkpoint_every: int = 0
    seed: int = 0
    out: str = "runs/default"
    trajectory_path: str = ""


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig.desk)
    run: RunSettings = field(default_factory=RunSettings)
    profile: str = "desk"

    def validate(self) -> None:
        r = self.run
        if r.warmup_steps > r.total_env_steps:
            raise ConfigError("run.warmup_steps", "must not exceed run.total_env_steps")
        if r.eval_episodes < 1:
            raise ConfigError("run.eval_episodes", "must be >= 1")
        if r.eval_every < 1:
            raise ConfigError("run.eval_every", "must be >= 1")
        if self.env.noise_std < 0:
            raise ConfigError("env.noise_std", "must be >= 0")

    def to_pairs(self) -> list[tuple[str, object]]:
        pairs: list[tuple[str, object]] = [("agent.profile", self.profile)]
        for section in ("env", "agent", "run"):
            obj = getattr(self, section)
            pairs += [(f"{section}.{f.name}", getattr(obj, f.name)) for f in fields(obj)]
        return pairs

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_pairs())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


_SECTIONS = {"env": EnvConfig, "agent": AgentConfig, "run": RunSettings}


def _field_types(cls) -> dict[str, object]:
    return {f.name: f.type for f in fields(cls)}


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> list[tuple[str, str]]:
    out = []
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{n}", f"expected 'key = value', got {line.strip()!r}")
        key, value = text.split("=", 1)
        out.append((key.strip(), value.strip()))
    return out


def build_config(pairs: list[tuple[str, str]]) -> RunConfig:
    """Apply ``pairs`` (later entries win) to the defaults of the chosen profile."""
    profile = "desk"
    for key, value in pairs:
        if key == "agent.profile":
            if value not in ("desk", "full"):
                raise ConfigError(key, f"unknown profile {value!r} (desk or full)")
            profile = value
    agent_kw: dict[str, object] = {}
    cfg = RunConfig(profile=profile)
    for key, value in pairs:
        if key == "agent.profile":
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(key, "unknown key")
        types = _field_types(_SECTIONS[section])
        if name not in types:
            raise ConfigError(key, "unknown key")
        typed = _coerce(key, value, types[name])
        if section == "agent":
            agent_kw[name] = typed
        else:
            setattr(getattr(cfg, section), name, typed)
    base = AgentConfig.desk if profile == "desk" else AgentConfig.full
    try:
        cfg.agent = base(**agent_kw)
    except ContractError as exc:
        key = str(exc).split(" ", 1)[0]
        raise ConfigError(key if key.startswith("agent.") else "agent", str(exc)) from None
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> RunConfig:
    pairs: list[tuple[str, str]] = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(str(path), "config file not found")
        pairs += parse_pairs(p.read_text().splitlines(), str(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return build_config(pairs)
