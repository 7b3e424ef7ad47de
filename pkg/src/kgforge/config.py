import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar, Union

from .errors import ConfigError

T = TypeVar("T")

SCORERS = ("translational", "semantic-matching")
LOSSES = ("margin-ranking", "logistic")
SCHEDULES = ("latin", "shuffled")
ENV_PREFIX = "KGF_"


def _require(condition: bool, field_name: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{field_name}: {message}", field=field_name)


@dataclass(frozen=True)
class ViewSpec:
    """Filters applied to a store to produce a training view.

    Predicate lists hold predicate ids or predicate names; names are resolved
    against the store when the view is built.
    """

    drop_literal_facts: bool = True
    predicate_denylist: Tuple[Union[int, str], ...] = ()
    predicate_allowlist: Optional[Tuple[Union[int, str], ...]] = None
    min_predicate_frequency: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "predicate_denylist", tuple(self.predicate_denylist))
        if self.predicate_allowlist is not None:
            object.__setattr__(
                self, "predicate_allowlist", tuple(self.predicate_allowlist)
            )
            overlap = set(self.predicate_allowlist) & set(self.predicate_denylist)
            _require(
                not overlap,
                "predicate_allowlist",
                f"overlaps predicate_denylist on {sorted(map(str, overlap))}",
            )
        _require(
            self.min_predicate_frequency >= 0,
            "min_predicate_frequency",
            "must be >= 0",
        )


@dataclass(frozen=True)
class WalkConfig:
    walk_length: int = 10
    walks_per_node: int = 10
    window: int = 3
    seed: int = 0

    def __post_init__(self):
        _require(self.walk_length >= 2, "walk_length", "must be >= 2")
        _require(self.walks_per_node >= 1, "walks_per_node", "must be >= 1")
        _require(self.window >= 1, "window", "must be >= 1")
        _require(self.window < self.walk_length, "window", "must be < walk_length")


@dataclass(frozen=True)
class ModelConfig:
    dim: int
    scorer: str = "translational"

    def __post_init__(self):
        _require(self.dim >= 1, "dim", "must be a positive integer")
        _require(self.scorer in SCORERS, "scorer", f"must be one of {SCORERS}")


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    negatives: int = 10
    learning_rate: float = 0.1
    epochs: int = 10
    batch_size: int = 1000
    memory_budget_bytes: int = 4 * 1024**3
    seed: int = 0
    loss: str = "margin-ranking"
    partitions: int = 1
    filtered_negatives: bool = True
    schedule: str = "latin"
    max_negative_retries: int = 10
    workers: int = 1

    def __post_init__(self):
        _require(self.margin > 0, "margin", "must be positive")
        _require(self.negatives >= 1, "negatives", "must be >= 1")
        _require(self.learning_rate > 0, "learning_rate", "must be positive")
        _require(self.epochs >= 1, "epochs", "must be >= 1")
        _require(self.batch_size >= 1, "batch_size", "must be >= 1")
        _require(self.memory_budget_bytes >= 1, "memory_budget_bytes", "must be positive")
        _require(self.partitions >= 1, "partitions", "must be >= 1")
        _require(self.loss in LOSSES, "loss", f"must be one of {LOSSES}")
        _require(self.schedule in SCHEDULES, "schedule", f"must be one of {SCHEDULES}")
        _require(self.max_negative_retries >= 1, "max_negative_retries", "must be >= 1")
        _require(self.workers >= 1, "workers", "must be >= 1")


@dataclass(frozen=True)
class RerankWeights:
    alpha: float = 1.0
    beta: float = 0.3
    delta: float = 0.2

    def __post_init__(self):
        for name in ("alpha", "beta", "delta"):
            _require(getattr(self, name) >= 0, name, "must be non-negative")
        _require(self.alpha + self.beta + self.delta > 0, "alpha", "weights sum to zero")


@dataclass(frozen=True)
class ServiceConfig:
    store: str
    model: str
    index: str
    related_model: Optional[str] = None
    related_index: Optional[str] = None
    alias_table: Optional[str] = None
    weights: RerankWeights = field(default_factory=RerankWeights)
    host: str = "127.0.0.1"
    port: int = 8080
    workers: int = 1
    snapshot_id: str = "snapshot-0"
    max_candidates: int = 10

    def __post_init__(self):
        if isinstance(self.weights, Mapping):
            object.__setattr__(
                self, "weights", from_dict(RerankWeights, self.weights, "weights.")
            )
        _require(0 < self.port < 65536, "port", "must be in 1..65535")
        _require(self.workers >= 1, "workers", "must be >= 1")
        _require(self.max_candidates >= 1, "max_candidates", "must be >= 1")
        _require(bool(self.snapshot_id), "snapshot_id", "must be non-empty")


def from_dict(cls: Type[T], data: Mapping[str, Any], prefix: str = "") -> T:
    """Build a config dataclass, naming the first missing or unknown field."""
    if not isinstance(data, Mapping):
        raise ConfigError(f"{prefix or cls.__name__}: expected a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}: unknown field", field=prefix + unknown[0])
    for name, f in fields.items():
        required = (
            f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
        )
        if required and name not in data:
            raise ConfigError(
                f"{prefix}{name}: missing required field", field=prefix + name
            )
    try:
        return cls(**data)
    except ConfigError as e:
        raise ConfigError(f"{prefix}{e}", field=prefix + (e.field or "")) from None
    except TypeError as e:
        raise ConfigError(f"{prefix.rstrip('.') or cls.__name__}: {e}") from None


def load_config(path: Union[str, Path], cls: Type[T]) -> T:
    return from_dict(cls, read_json(path))


def read_json(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None


def to_dict(config) -> Dict[str, Any]:
    data = dataclasses.asdict(config)
    for key, value in data.items():
        if isinstance(value, tuple):
            data[key] = list(value)
    return data


def apply_env_overrides(config: ServiceConfig, environ: Mapping[str, str] = None) -> ServiceConfig:
    """Replace top-level scalar fields from ``KGF_<FIELD>`` variables."""
    environ = os.environ if environ is None else environ
    changes = {}
    for f in dataclasses.fields(config):
        raw = environ.get(ENV_PREFIX + f.name.upper())
        if raw is None or f.name == "weights":
            continue
        current = getattr(config, f.name)
        if isinstance(current, int) and not isinstance(current, bool):
            try:
                changes[f.name] = int(raw)
            except ValueError:
                raise ConfigError(
                    f"{ENV_PREFIX}{f.name.upper()}: expected an integer, got {raw!r}",
                    field=f.name,
                ) from None
        else:
            changes[f.name] = raw
    return dataclasses.replace(config, **changes) if changes else config
