"""Experiment configuration: nested dataclasses, YAML loading, strict keys.

Defaults reproduce the reference experimental setup: 20 devices split
12/5/3, a 20% global test carve and 20% local test carves, 100 rounds of
10 local epochs for the classifier and 500 rounds for the regressor.
Unknown keys anywhere in a config mapping are reported as errors with the
full field path, so typos never silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    n_samples: int = 2000
    n_buildings: int = 3
    n_floors: int = 4
    n_aps: int = 180
    noise_scale: float = 2.0


@dataclass
class DatasetConfig:
    source: str = "synthetic"  # synthetic | csv
    path: str | None = None
    test_fraction: float = 0.2
    local_test_fraction: float = 0.2
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class BfcConfig:
    rounds: int = 100
    local_epochs: int = 10
    learning_rate: float = 0.001
    batch_size: int = 100
    threshold: float = 0.1
    use_conv: bool = True
    extractor_width: int = 128
    conv_channels: int = 4
    conv_kernel: int = 5


@dataclass
class LlrConfig:
    rounds: int = 500
    local_epochs: int = 10
    learning_rate: float = 0.002
    batch_size: int = 100
    threshold: float = 0.9
    extractor_width: int = 128
    hidden_width: int = 64


@dataclass
class AttackConfig:
    malicious_count: int = 0
    sigma: float = 0.0


@dataclass
class FaultConfig:
    count: int = 0
    phase: str = "training"  # training | inference | both


@dataclass
class SeedConfig:
    master: int = 0
    data: int | None = None      # derived from master when unset
    protocol: int | None = None  # derived from master when unset


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    system: str = "dfl"  # dfl | cfl
    kind: str = "bfc"    # bfc | llr | 3d
    device_count: int = 20
    role_counts: tuple[int, int, int] = (12, 5, 3)
    unit_reward: int = 1
    aggregation: str = "weighted"  # weighted | uniform
    bfc: BfcConfig = field(default_factory=BfcConfig)
    llr: LlrConfig = field(default_factory=LlrConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    faults: FaultConfig = field(default_factory=FaultConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    inference_trials: int = 5
    output_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        def fail(msg: str):
            raise ConfigError(msg)

        if self.system not in ("dfl", "cfl"):
            fail(f"system: expected dfl or cfl, got {self.system!r}")
        if self.kind not in ("bfc", "llr", "3d"):
            fail(f"kind: expected bfc, llr or 3d, got {self.kind!r}")
        if self.aggregation not in ("weighted", "uniform"):
            fail(f"aggregation: expected weighted or uniform, got {self.aggregation!r}")
        if self.device_count < 1:
            fail("device_count: must be at least 1")
        if len(self.role_counts) != 3 or min(self.role_counts) < 0:
            fail("role_counts: need three nonnegative integers")
        if sum(self.role_counts) != self.device_count:
            fail(f"role_counts: {list(self.role_counts)} must sum to "
                 f"device_count={self.device_count}")
        if self.system == "dfl" and self.role_counts[2] == 0:
            fail("role_counts: at least one miner is required")
        if self.unit_reward < 0:
            fail("unit_reward: must be nonnegative")
        if self.dataset.source not in ("synthetic", "csv"):
            fail(f"dataset.source: expected synthetic or csv, "
                 f"got {self.dataset.source!r}")
        if self.dataset.source == "csv" and not self.dataset.path:
            fail("dataset.path: required when dataset.source is csv")
        for name in ("test_fraction", "local_test_fraction"):
            v = getattr(self.dataset, name)
            if not 0.0 < v < 1.0:
                fail(f"dataset.{name}: must be strictly inside (0, 1)")
        for section, label in ((self.bfc, "bfc"), (self.llr, "llr")):
            if section.rounds < 0:
                fail(f"{label}.rounds: must be nonnegative")
            if section.local_epochs < 1:
                fail(f"{label}.local_epochs: must be at least 1")
            if section.learning_rate <= 0 or section.batch_size < 1:
                fail(f"{label}: learning_rate must be positive and "
                     f"batch_size at least 1")
        if self.attack.malicious_count < 0 or self.attack.malicious_count > self.device_count:
            fail("attack.malicious_count: must lie in [0, device_count]")
        if self.attack.sigma < 0:
            fail("attack.sigma: must be nonnegative")
        if self.faults.count < 0 or self.faults.count > self.device_count:
            fail("faults.count: must lie in [0, device_count]")
        if self.faults.phase not in ("training", "inference", "both"):
            fail(f"faults.phase: expected training, inference or both, "
                 f"got {self.faults.phase!r}")
        if self.inference_trials < 1:
            fail("inference_trials: must be at least 1")
        return self


_SCALARS = (int, float, str, bool, type(None))


def _coerce(value, target_type, path: str):
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _apply(obj, mapping: dict, path: str = ""):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in mapping.items():
        where = f"{path}{key}"
        if key not in fields:
            raise ConfigError(f"unknown config key: {where}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            _apply(current, value, path=f"{where}.")
        elif key == "role_counts":
            if (not isinstance(value, (list, tuple)) or len(value) != 3
                    or any(isinstance(v, bool) or not isinstance(v, int)
                           for v in value)):
                raise ConfigError(f"{where}: expected three integers")
            setattr(obj, key, tuple(value))
        elif key in ("path", "output_dir"):
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"{where}: expected a string or null")
            setattr(obj, key, value)
        elif key in ("data", "protocol"):  # optional seed overrides
            if value is not None and (isinstance(value, bool)
                                      or not isinstance(value, int)):
                raise ConfigError(f"{where}: expected an integer or null")
            setattr(obj, key, value)
        else:
            setattr(obj, key, _coerce(value, type(current), where))
    return obj


def from_mapping(mapping: dict | None) -> ExperimentConfig:
    """Build a validated config from a parsed YAML mapping (None = defaults)."""
    cfg = ExperimentConfig()
    if mapping is None:
        return cfg.validate()
    if not isinstance(mapping, dict):
        raise ConfigError("config root must be a mapping")
    _apply(cfg, mapping)
    return cfg.validate()


def load_config(path: str | None) -> ExperimentConfig:
    """Load a YAML config file; a missing path yields pure defaults."""
    if path is None:
        return ExperimentConfig().validate()
    with open(path, "r", encoding="utf-8") as fh:
        try:
            mapping = yaml.safe_load(fh)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML ({e})") from e
    return from_mapping(mapping)


def to_mapping(cfg: ExperimentConfig) -> dict:
    """Plain nested dict mirror of the config, for manifests and echoes."""
    out = dataclasses.asdict(cfg)
    out["role_counts"] = list(cfg.role_counts)
    return out
