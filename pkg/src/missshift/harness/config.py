"""Experiment configuration (YAML, schema version 1).

Example::

    version: 1
    name: mcar_desk
    dataset: {kind: simulated, d: 10, lambda: 0.7, seed: 0}
    mechanism: {kind: mcar, source_rate: 0.5, target_rates: [0.25], k: 2.0, strength: 1.0}
    estimators: [bayes, mean, ice_mask, mice, neumiss, neumise]
    sizes: {train: 20000, val: 2000, test: 2000}
    repetitions: 3
    training: {lr: 0.005, weight_decay: 1.0e-5, batch_size: 100, max_epochs: 1000}
    architecture: {width: 50, depth: 2, n_blocks: 20}
    grid: null            # or {lr: [...], weight_decay: [...], width: [...], depth: [...], reps: 1}
    n_imp: 5
    seed: 0
    workers: 1
    output: results

An ingested dataset uses ``{kind: ingested, path: table.csv, schema: {col: continuous|binary}}``.
``MISSSHIFT_WORKERS`` and ``MISSSHIFT_OUTPUT_ROOT`` override ``workers`` and ``output``.
"""

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from ..errors import ContractError
from ..estimators import ESTIMATORS
from ..missingness import KINDS
from ..neural import ArchSpec, TrainConfig

SCHEMA_VERSION = 1


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: dict = field(default_factory=lambda: {"kind": "simulated", "d": 10, "lambda": 0.7, "seed": 0})
    mechanism: dict = field(default_factory=lambda: {"kind": "mcar", "source_rate": 0.5, "target_rates": [0.25]})
    estimators: list = field(default_factory=lambda: ["bayes"])
    sizes: dict = field(default_factory=lambda: {"train": 100_000, "val": 10_000, "test": 10_000})
    repetitions: int = 1
    training: dict = field(default_factory=dict)
    architecture: dict = field(default_factory=dict)
    grid: dict = None
    n_imp: int = 5
    seed: int = 0
    workers: int = 1
    output: str = "results"
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.version != SCHEMA_VERSION:
            raise ContractError(f"unsupported config version {self.version}")
        if self.dataset.get("kind") not in ("simulated", "ingested"):
            raise ContractError("dataset.kind must be 'simulated' or 'ingested'")
        if self.dataset["kind"] == "ingested" and not {"path", "schema"} <= set(self.dataset):
            raise ContractError("ingested dataset needs 'path' and 'schema'")
        mech = self.mechanism
        if mech.get("kind") not in KINDS:
            raise ContractError(f"mechanism.kind must be one of {KINDS}")
        for r in [mech.get("source_rate")] + list(mech.get("target_rates", [])):
            if r is None or not 0.0 <= float(r) < 1.0:
                raise ContractError(f"rates must lie in [0, 1), got {r}")
        if not mech.get("target_rates"):
            raise ContractError("mechanism.target_rates must be non-empty")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ContractError(f"unknown estimators {unknown}; known: {list(ESTIMATORS)}")
        if any(int(self.sizes.get(k, 0)) < 1 for k in ("train", "val", "test")):
            raise ContractError("sizes.train, sizes.val and sizes.test must be positive")
        if self.repetitions < 1:
            raise ContractError("repetitions must be >= 1")
        self.train_config()
        self.arch()

    def train_config(self):
        return TrainConfig(**self.training)

    def arch(self):
        return ArchSpec(**self.architecture)

    @property
    def source_rate(self):
        return float(self.mechanism["source_rate"])

    @property
    def target_rates(self):
        return [float(r) for r in self.mechanism["target_rates"]]

    def scenario_id(self, target_rate):
        return f"{self.name}/{self.mechanism['kind']}/{self.source_rate:g}->{target_rate:g}"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ContractError(f"unknown config keys {sorted(extra)}")
        return cls(**data)


def load_config(path):
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    cfg = ExperimentConfig.from_dict(data)
    if cfg.dataset["kind"] == "ingested":
        p = Path(cfg.dataset["path"])
        if not p.is_absolute():
            cfg.dataset["path"] = str(Path(path).parent / p)
    return apply_env_overrides(cfg)


def apply_env_overrides(cfg):
    if os.environ.get("MISSSHIFT_WORKERS"):
        cfg.workers = int(os.environ["MISSSHIFT_WORKERS"])
    if os.environ.get("MISSSHIFT_OUTPUT_ROOT"):
        cfg.output = os.environ["MISSSHIFT_OUTPUT_ROOT"]
    return cfg


def dump_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
