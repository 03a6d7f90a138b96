"""INI run configuration: parsing, validation and the config hash."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field
from pathlib import Path

from wmeval.env import ConfigError, PolicySpec, check_chunk_size
from wmeval.io import stable_hash

SPLITS = ("train", "val", "test")


def parse_policy(text: str) -> PolicySpec:
    """``expert`` | ``eps:<epsilon>`` | ``mix:<weight>``, optionally ``@<seed>``."""
    text = text.strip()
    seed = 0
    if "@" in text:
        text, s = text.split("@", 1)
        seed = int(s)
    if text == "expert":
        return PolicySpec("expert", seed=seed)
    kind, _, value = text.partition(":")
    try:
        v = float(value)
    except ValueError:
        raise ConfigError(f"bad policy {text!r}") from None
    if kind == "eps":
        return PolicySpec("epsilon_noisy", epsilon=v, seed=seed)
    if kind == "mix":
        return PolicySpec("mixture", mix_weight=v, seed=seed)
    raise ConfigError(f"bad policy {text!r}")


def policy_text(spec: PolicySpec) -> str:
    base = {"expert": "expert", "epsilon_noisy": f"eps:{spec.epsilon:g}", "mixture": f"mix:{spec.mix_weight:g}"}[spec.kind]
    return base if spec.seed == 0 else f"{base}@{spec.seed}"


def parse_groups(text: str) -> list[tuple[PolicySpec, int]]:
    """``expert*150, eps:0.5*150`` -> [(spec, count), ...]."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        pol, _, n = part.rpartition("*")
        if not pol:
            raise ConfigError(f"group {part!r} needs a '*<count>'")
        out.append((parse_policy(pol), int(n)))
    return out


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


@dataclass
class EnvSection:
    width: int = 12
    height: int = 12
    chunk_size: int = 4


@dataclass
class DataSection:
    seed: int = 1
    max_steps: int = 40
    linger_chunks: int = 1
    train: str = "expert*150, eps:0.5*150, eps:1.0*80"
    val: str = "expert*20, eps:0.5*20"
    test: str = "expert*40, eps:0.6*40"


@dataclass
class ModelSection:
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    ff_mult: int = 4
    init_scale: float = 1.0
    seed: int = 0
    memory_capacity: int = 4


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    lr_schedule: str = "cosine"
    weight_decay: float = 0.01
    w_vis: float = 1.0
    w_score: float = 2.0
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 500


@dataclass
class DecodeSection:
    steps: int = 16
    temperature: float = 0.0
    seed: int = 0


@dataclass
class EvalSection:
    seed: int = 11
    episodes: int = 40
    max_chunks: int = 10
    horizons: str = "5,10,15,20"
    p_values: str = "0,0.25,0.5,0.75,1.0"
    policies: str = "mix:1.0, eps:0.3, eps:0.45, eps:0.55, eps:0.65, mix:0.0"
    base_distance: str = "embedded_l2"
    batch_size: int = 64

    @property
    def horizon_list(self) -> list[int]:
        return _ints(self.horizons)

    @property
    def p_list(self) -> list[float]:
        return _floats(self.p_values)

    @property
    def policy_list(self) -> list[PolicySpec]:
        return [parse_policy(p) for p in self.policies.split(",") if p.strip()]


@dataclass
class IOSection:
    data_dir: str = "data"
    run_dir: str = "run"
    out_dir: str = "out"


SECTIONS = {
    "env": EnvSection,
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "decode": DecodeSection,
    "eval": EvalSection,
    "io": IOSection,
}


@dataclass
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    eval: EvalSection = field(default_factory=EvalSection)
    io: IOSection = field(default_factory=IOSection)
    base_dir: Path = field(default=Path("."), compare=False)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @property
    def hash(self) -> str:
        return stable_hash(self.to_dict())

    def path(self, which: str) -> Path:
        p = Path(getattr(self.io, which))
        return p if p.is_absolute() else self.base_dir / p

    def split_groups(self, split: str) -> list[tuple[PolicySpec, int]]:
        return parse_groups(getattr(self.data, split))

    def validate(self) -> None:
        check_chunk_size(self.env.chunk_size)
        if self.env.width < 4 or self.env.height < 4:
            raise ConfigError("grid must be at least 4x4")
        if self.env.width % 2 or self.env.height % 2:
            raise ConfigError("grid sides must be even (2x2 pooled history)")
        if self.model.d_model % self.model.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.train.steps < 0 or self.train.batch_size < 1:
            raise ConfigError("bad training budget")
        if self.eval.episodes < 1:
            raise ConfigError("eval.episodes must be >= 1")
        if any(h < 1 for h in self.eval.horizon_list):
            raise ConfigError("horizons must be >= 1")
        if any(not 0 <= p <= 1 for p in self.eval.p_list):
            raise ConfigError("swap probabilities must lie in [0, 1]")
        for split in SPLITS:
            self.split_groups(split)
        self.eval.policy_list


def _coerce(kind, raw: str, where: str):
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def parse_config_text(text: str, base_dir: Path = Path(".")) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig(base_dir=base_dir)
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        obj = getattr(cfg, sec)
        types = {k: f.type for k, f in obj.__dataclass_fields__.items()}
        for key, raw in cp.items(sec):
            if key not in types:
                raise ConfigError(f"unknown key {sec}.{key}")
            setattr(obj, key, _coerce(types[key], raw.strip(), f"{sec}.{key}"))
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, path.parent)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name, values in cfg.to_dict().items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in values.items())
        lines.append("")
    return "\n".join(lines)
