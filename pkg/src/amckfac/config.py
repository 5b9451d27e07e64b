"""Experiment configuration: INI file with [device] [converters] [kfac] [train] [data]."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from io import StringIO
from dataclasses import dataclass, field
from pathlib import Path

from .circuit import ConverterConfig
from .device import DeviceConfig
from .errors import ContractError
from .kfac import KfacConfig

OPTIMIZERS = ("kfac-amc", "kfac-exact", "sgdm", "adam")
BASELINES = ("sgdm", "adam")


@dataclass(frozen=True)
class PrecisionPhase:
    first_epoch: int
    last_epoch: int | None   # None = until the end
    total_bits: int


DEFAULT_SCHEDULE = (PrecisionPhase(1, 28, 24), PrecisionPhase(29, None, 26))


def parse_schedule(text: str) -> tuple[PrecisionPhase, ...]:
    """Parse ``"1-28:24, 29-:26"`` (an open upper bound runs to the last epoch)."""
    phases = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            span, bits = chunk.split(":")
            lo, hi = span.split("-")
            phases.append(PrecisionPhase(int(lo), int(hi) if hi.strip() else None, int(bits)))
        except ValueError as exc:
            raise ContractError(f"bad precision schedule entry {chunk!r}") from exc
    return tuple(phases)


def format_schedule(phases) -> str:
    return ", ".join(f"{p.first_epoch}-{'' if p.last_epoch is None else p.last_epoch}:{p.total_bits}"
                     for p in phases)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "kfac-amc"
    epochs: int = 50
    # baselines need longer to reach full training accuracy; used when no epoch count is given
    baseline_epochs: int = 120
    batch_size: int = 100
    seed: int = 0
    precision_schedule: tuple = DEFAULT_SCHEDULE
    max_iters: int = 200
    sgdm_lr: float = 0.3
    sgdm_momentum: float = 0.9
    adam_lr: float = 0.1
    stop_at_full_accuracy: bool = False
    sweep_kfac_lr: tuple = (0.1, 0.3, 0.5, 1.0, 2.0, 3.0)
    sweep_kfac_damping: tuple = (0.03, 0.1, 0.3, 1.0, 3.0)
    sweep_sgdm_lr: tuple = (0.03, 0.1, 0.3, 1.0)
    sweep_sgdm_momentum: tuple = (0.5, 0.9, 0.95)
    sweep_adam_lr: tuple = (1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 2e-1, 3e-1)

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"optimizer must be one of {OPTIMIZERS}")
        if self.epochs < 1 or self.baseline_epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")
        validate_schedule(self.precision_schedule, self.epochs)

    def default_epochs(self, optimizer: str) -> int:
        return self.baseline_epochs if optimizer in BASELINES else self.epochs

    def bits_for_epoch(self, epoch: int) -> int:
        for p in self.precision_schedule:
            if p.first_epoch <= epoch and (p.last_epoch is None or epoch <= p.last_epoch):
                return p.total_bits
        raise ContractError(f"epoch {epoch} not covered by the precision schedule")


def validate_schedule(phases, epochs: int):
    """Phases must tile [1, epochs] in order; phases past the last epoch go unused."""
    if not phases:
        raise ContractError("precision schedule is empty")
    expect = 1
    for i, p in enumerate(phases):
        if p.first_epoch != expect:
            raise ContractError(f"precision schedule has a gap/overlap at epoch {expect}")
        if p.total_bits < 2:
            raise ContractError("precision schedule bits must be >= 2")
        if p.last_epoch is None:
            if i != len(phases) - 1:
                raise ContractError("only the last schedule phase may be open-ended")
            return
        if p.last_epoch < p.first_epoch:
            raise ContractError("schedule phase ends before it starts")
        expect = p.last_epoch + 1
    if expect <= epochs:
        raise ContractError(f"precision schedule does not cover epochs {expect}..{epochs}")


@dataclass(frozen=True)
class DataConfig:
    images: str | None = None
    labels: str | None = None
    synthetic: str = "letters"      # letters | blobs; used when no IDX files are given
    synthetic_noise: float = 0.05
    synthetic_distortion: float = 1.0
    per_class_train: int = 50
    per_class_test: int = 100
    split_seed: int | None = None   # defaults to the training seed

    @property
    def uses_emnist(self) -> bool:
        return self.images is not None and self.labels is not None


@dataclass(frozen=True)
class ExperimentConfig:
    device: DeviceConfig = field(default_factory=DeviceConfig)
    converters: ConverterConfig = field(default_factory=ConverterConfig)
    kfac: KfacConfig = field(default_factory=lambda: KfacConfig(global_damping=1.0, learning_rate=2.0))
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def replace(self, **sections) -> "ExperimentConfig":
        """Return a copy with whole sections or ``section__key`` fields overridden."""
        out = self
        for key, value in sections.items():
            if "__" in key:
                sec, attr = key.split("__", 1)
                out = dataclasses.replace(out, **{sec: dataclasses.replace(getattr(out, sec), **{attr: value})})
            else:
                out = dataclasses.replace(out, **{key: value})
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"]["precision_schedule"] = format_schedule(self.train.precision_schedule)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def check_batching(self, n_train: int):
        if n_train % self.train.batch_size:
            raise ContractError(f"batch_size {self.train.batch_size} does not divide {n_train} samples")


_SECTION_TYPES = {
    "device": DeviceConfig,
    "converters": ConverterConfig,
    "kfac": KfacConfig,
    "train": TrainConfig,
    "data": DataConfig,
}


def _coerce(cls, key: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ContractError(f"unknown key {key!r} for section of {cls.__name__}")
    default = fields[key].default
    if key == "precision_schedule":
        return parse_schedule(raw)
    if key.startswith("sweep_"):
        return _floats(raw)
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if default is None and key == "split_seed":
        return int(raw)
    return raw.strip()


def load_config(path=None, text: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(path)
        parser.read(path)
    elif text is not None:
        parser.read_string(text)
    sections = {}
    for name in parser.sections():
        if name not in _SECTION_TYPES:
            raise ContractError(f"unknown config section [{name}]")
        cls = _SECTION_TYPES[name]
        sections[name] = {k: _coerce(cls, k, v) for k, v in parser[name].items()}
    base = ExperimentConfig()
    built = {}
    for name, cls in _SECTION_TYPES.items():
        if name in sections:
            built[name] = dataclasses.replace(getattr(base, name), **sections[name])
    return dataclasses.replace(base, **built)


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that :func:`load_config` reads back to an equal config."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    d = cfg.to_dict()
    for sec, values in d.items():
        parser[sec] = {}
        for k, v in values.items():
            if v is None:
                continue
            if isinstance(v, (list, tuple)):
                v = " ".join(repr(x) for x in v)
            parser[sec][k] = str(v)
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
