"""Run configuration: dataclasses, JSON loading, dotted-key overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigError

METHODS = ("chdqr", "chdqr-dynamic", "grid", "cqr")
DATASETS = ("uncond1d", "uncond2d", "uncond2d_outlier")


@dataclass
class LossConfig:
    lambda_q: float = 1.0
    lambda_rep: float = 0.1
    delta_rep: float = 0.1
    tau: float = 0.1

    def __post_init__(self):
        vals = (self.lambda_q, self.lambda_rep, self.delta_rep, self.tau)
        if not all(isinstance(v, (int, float)) and abs(v) != float("inf") and v == v for v in vals):
            raise ConfigError(f"loss weights must be finite: {self}")
        if self.lambda_q < 0 or self.lambda_rep < 0:
            raise ConfigError("loss weights must be >= 0")
        if not self.delta_rep > 0:
            raise ConfigError("delta_rep must be > 0")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")


@dataclass
class DynamicsConfig:
    """Add/remove rule. Usage thresholds are ``factor / K`` for the current K."""

    add_factor: float = 5.0
    del_factor: float = 0.1
    sigma: float = 0.01
    k_min: int = 2
    k_max: int = 10_000

    def __post_init__(self):
        if self.k_min < 2:
            raise ConfigError("k_min must be >= 2")
        if self.k_max < self.k_min:
            raise ConfigError("k_max must be >= k_min")
        if not self.sigma > 0:
            raise ConfigError("sigma must be > 0")
        if not 0 <= self.del_factor < self.add_factor:
            raise ConfigError("need 0 <= del_factor < add_factor")

    def thresholds(self, K: int) -> tuple[float, float]:
        """(delta_add, delta_del) for a set of K prototypes."""
        return min(1.0, self.add_factor / K), min(self.del_factor / K, 1.0 - 1e-12)


@dataclass
class TrainConfig:
    """Everything needed to reproduce one training run.

    ``None`` fields are resolved from the training data at fit time
    (see ``training.resolve_hyperparameters``).
    """

    dataset: str = "uncond1d"
    n: int | None = None
    data_seed: int = 0
    outliers_per_component: int = 0
    variance_reading: str = "variance"
    target_columns: list | None = None
    feature_columns: list | None = None

    method: str = "chdqr-dynamic"
    seed: int = 0
    k_init: int | None = None
    bins_per_dim: int = 50
    hidden_sizes: list = field(default_factory=lambda: [64, 64])

    lambda_q: float = 1.0
    lambda_rep: float = 0.1
    delta_rep: float | None = None
    tau: float = 0.1
    add_factor: float = 5.0
    del_factor: float = 0.1
    sigma: float | None = None
    k_min: int = 2
    k_max: int = 10_000

    epochs: int = 200
    batch_size: int = 256
    lr_theta: float = 1e-3
    lr_protos: float = 1e-2
    padding_fraction: float = 0.1
    alpha: float = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.variance_reading not in ("variance", "std"):
            raise ConfigError("variance_reading must be 'variance' or 'std'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.bins_per_dim < 2:
            raise ConfigError("bins_per_dim must be >= 2")
        if self.k_init is not None and self.k_init < self.k_min:
            raise ConfigError("k_init must be >= k_min")
        if self.lr_theta <= 0 or self.lr_protos <= 0:
            raise ConfigError("learning rates must be > 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _build(cls, d)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class SuiteConfig:
    """A grid of runs: datasets x methods x alphas x seeds.

    ``datasets`` entries are dicts of TrainConfig overrides (at least
    ``dataset``); ``base`` holds overrides shared by every run.
    """

    name: str = "suite"
    datasets: list = field(default_factory=lambda: [{"dataset": "uncond1d"}])
    methods: list = field(default_factory=lambda: list(METHODS))
    alphas: list = field(default_factory=lambda: [0.1, 0.5, 0.9])
    seeds: list = field(default_factory=lambda: list(range(10)))
    base: dict = field(default_factory=dict)
    workers: int = 1
    emit_regions: bool = True

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        for a in self.alphas:
            if not 0 < a < 1:
                raise ConfigError(f"alpha {a} outside (0, 1)")
        if not self.seeds:
            raise ConfigError("suite needs at least one seed")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for ds in self.datasets:
            if "dataset" not in ds:
                raise ConfigError("every suite dataset entry needs a 'dataset' key")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        return _build(cls, d)


def _build(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``key=value`` strings; dotted keys descend into nested dicts."""
    out = json.loads(json.dumps(d))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {key!r}")
        node[parts[-1]] = parse_value(raw)
    return out


def load_json_config(path_or_name) -> dict:
    """Read a JSON config from a path, or from the bundled configs by name."""
    p = Path(path_or_name)
    if p.is_file():
        text = p.read_text()
    else:
        name = p.name if p.suffix == ".json" else f"{p.name}.json"
        bundled = resources.files("chdqr") / "configs" / name
        if not bundled.is_file():
            raise ConfigError(f"config file not found: {path_or_name}")
        text = bundled.read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path_or_name}: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"config {path_or_name} must be a JSON object")
    return d
