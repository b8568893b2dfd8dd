"""Experiment configuration: a flat ``key = value`` file plus CLI overrides."""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .cluster_fl import LINKAGES, METRICS, parse_cut
from .dataset import LabelScheme, SyntheticSpec
from .exceptions import ConfigError
from .federation import TrainConfig
from .nn_core import CnnSpec


@dataclass
class ExperimentConfig:
    # data
    data: str = ""  # CSV path; empty means synthesize
    classes: int = 3
    split_fraction: float = 0.8
    synth_clients: int = 100
    synth_min_samples: int = 3
    synth_max_samples: int = 6
    synth_groups: int = 3
    label_skew: float = 0.9
    feature_shift_scale: float = 0.25
    class_sep: float = 0.8
    concept_shift: bool = True
    # model
    conv1_channels: int = 10
    conv2_channels: int = 20
    fc_hidden: int = 50
    # optimisation
    lr: float = 0.1
    momentum: float = 0.5
    batch_size: int = 0  # 0 = full batch
    # federation
    rounds: int = 50
    local_epochs: int = 1
    server_lr: float = 1.0
    weighted_aggregation: bool = False
    # clustering
    cluster_rounds: int = 20
    metric: str = "cosine"
    linkage: str = "average"
    cut: str = "gap"
    delta_layer: str = "all"  # "all" or a parameter-name prefix such as "fc2"
    # personalization
    registration_rounds: int = 0  # 0 = local_epochs * 5
    literal_assignment: bool = False
    registration_start: str = "global"  # "global" or "random"
    # run
    out: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.classes not in (2, 3):
            raise ConfigError(f"classes must be 2 or 3, got {self.classes}")
        if not 0.0 <= self.split_fraction <= 1.0:
            raise ConfigError("split_fraction must lie in [0, 1]")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.linkage not in LINKAGES:
            raise ConfigError(f"linkage must be one of {LINKAGES}")
        try:
            crit, val = parse_cut(self.cut)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if crit == "k_clusters" and val < 1:
            raise ConfigError("cut k must be >= 1")
        if self.registration_start not in ("global", "random"):
            raise ConfigError("registration_start must be 'global' or 'random'")
        for name in ("rounds", "cluster_rounds", "registration_rounds", "batch_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.server_lr < 0 or self.lr < 0 or self.momentum < 0:
            raise ConfigError("lr, momentum and server_lr must be >= 0")
        if not 1 <= self.synth_min_samples <= self.synth_max_samples:
            raise ConfigError("need 1 <= synth_min_samples <= synth_max_samples")
        if not 1 <= self.synth_groups <= self.synth_clients:
            raise ConfigError("need 1 <= synth_groups <= synth_clients")
        if not 0.0 <= self.label_skew <= 1.0:
            raise ConfigError("label_skew must lie in [0, 1]")

    # -- derived objects ------------------------------------------------------

    def sub_seed(self, name: str) -> int:
        """Stable per-component seed derived from the global seed."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
        return int(ss.generate_state(1)[0])

    def cnn_spec(self) -> CnnSpec:
        return CnnSpec(conv1_channels=self.conv1_channels, conv2_channels=self.conv2_channels,
                       fc_hidden=self.fc_hidden, num_classes=self.classes)

    def label_scheme(self) -> LabelScheme:
        return LabelScheme.from_classes(self.classes)

    def train_config(self, rounds: int) -> TrainConfig:
        return TrainConfig(rounds=rounds, local_epochs=self.local_epochs, lr=self.lr,
                           momentum=self.momentum, server_lr=self.server_lr,
                           batch_size=self.batch_size or None,
                           weighted=self.weighted_aggregation,
                           seed=self.sub_seed("shuffle"))

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(num_clients=self.synth_clients,
                             samples_per_client=(self.synth_min_samples, self.synth_max_samples),
                             num_latent_groups=self.synth_groups, label_skew=self.label_skew,
                             feature_shift_scale=self.feature_shift_scale,
                             class_sep=self.class_sep, concept_shift=self.concept_shift,
                             seed=self.sub_seed("synth"))

    # -- text format ----------------------------------------------------------

    def to_text(self) -> str:
        lines = ["# resolved experiment configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_mapping(cls, values: dict, base: "ExperimentConfig | None" = None):
        types = {f.name: f.type for f in fields(cls)}
        current = dataclasses.asdict(base) if base is not None else {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            current[key] = _coerce(key, raw, types[key])
        return cls(**current)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values = parse_text(path.read_text(), str(path))
        values.update(overrides or {})
        return cls.from_mapping(values)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None
    return raw
