"""Flat ``section.key=value`` run configuration.

Lines starting with ``#`` and blank lines are ignored. Every key must
name a field of one of the sections below; anything else is an error.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .blocks import ModelConfig
from .training.harness import LoopConfig
from .training.optim import OptimConfig
from .training.tasks import TaskSpec


class ConfigError(ValueError):
    pass


@dataclass
class BenchConfig:
    lengths: list[int] = field(default_factory=lambda: [256, 512, 1024, 2048, 4096, 8192, 16384])
    d_model: int = 64
    n_state: int = 16
    trials: int = 5
    warmup: int = 1
    chunk: int = 64
    attention_cap_bytes: float = 3.0e9


@dataclass
class GradcheckConfig:
    seq_len: int = 8
    batch_size: int = 2
    eps: float = 1e-3
    order: int = 4
    max_elements: int = 16  # per parameter tensor; 0 checks every entry
    threshold: float = 1e-5
    objective: str = "probe"


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1


SECTIONS = {
    "run": RunSection,
    "task": TaskSpec,
    "model": ModelConfig,
    "optim": OptimConfig,
    "loop": LoopConfig,
    "bench": BenchConfig,
    "gradcheck": GradcheckConfig,
}


@dataclass
class Config:
    run: RunSection = field(default_factory=RunSection)
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)


def _convert(raw: str, typ: str, key: str):
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ.startswith("list[int]"):
            return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ}") from None
    return raw


def _typename(t) -> str:
    return t if isinstance(t, str) else t.__name__


def parse(text: str) -> Config:
    values: dict[str, dict[str, object]] = {name: {} for name in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected section.key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        types = {f.name: _typename(f.type) for f in fields(SECTIONS[section])}
        if name not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[section][name] = _convert(raw, types[name], key)
    try:
        return Config(**{s: cls(**values[s]) for s, cls in SECTIONS.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path) -> Config:
    with open(path) as fh:
        return parse(fh.read())


def dump(cfg: Config) -> str:
    lines = []
    for section in SECTIONS:
        for k, v in asdict(getattr(cfg, section)).items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{section}.{k}={v}")
    return "\n".join(lines) + "\n"


def schema() -> str:
    """Every accepted key with its type and default."""
    lines = []
    default = Config()
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            lines.append(f"{section}.{f.name} ({_typename(f.type)}) = {getattr(getattr(default, section), f.name)}")
    return "\n".join(lines)
