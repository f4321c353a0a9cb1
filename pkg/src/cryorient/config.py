"""Versioned experiment configuration loaded from YAML.

Every field has a default; a file only needs the fields it changes.  Unknown
sections or keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .errors import ValidationError

SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "phantom": {"kind": "asymmetric-blobs", "size": 32, "seed": 2},
    "simulation": {
        "count": 500,
        "image_size": 32,
        "scheme": "uniform-so3",
        "directions": "full",
        "shift_limit": 0.0,
        "noise_var": 0.0,
        "seed": 0,
    },
    "split": {"fractions": [0.50, 0.17, 0.33], "seed": 0},
    "pairs": {"train_fraction": 1.0, "val_fraction": 1.0, "bins": 32, "test_pairs": 1000, "seed": 1},
    "estimator": {
        "kind": "siamese",
        "channels": [16, 32, 64, 64],
        "distance": "cosine",
        "epochs": 50,
        "batch_size": 256,
        "learning_rate": 1e-3,
        "optimizer": "rmsprop",
        "seed": 0,
    },
    "recovery": {
        "graph": "estimated",
        "perturb_var": 0.0,
        "batch_size": 256,
        "learning_rate": 0.05,
        "max_steps": 30000,
        "check_every": 100,
        "tolerance": 1e-5,
        "patience": 5,
        "lr_halvings": 6,
        "seed": 0,
    },
    "alignment": {"steps": 300, "restarts": 32, "batch_size": 256, "learning_rate": 0.1, "decay": 0.98, "seed": 0},
    "reconstruction": {"iterations": 30, "epsilon": 0.0, "shells": 16, "threshold": 0.5},
}

CHOICES = {
    ("phantom", "kind"): ("blobs", "shell", "asymmetric-blobs"),
    ("simulation", "scheme"): ("uniform-so3", "uniform-euler"),
    ("simulation", "directions"): ("full", "half", "quarter"),
    ("estimator", "kind"): ("siamese", "euclidean-baseline"),
    ("estimator", "distance"): ("cosine", "euclidean"),
    ("estimator", "optimizer"): ("rmsprop", "sgd"),
    ("recovery", "graph"): ("estimated", "exact"),
}


def _check_value(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, (int, float)) for v in value)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ValidationError(f"config field {where} has the wrong type: {value!r}")
    allowed = CHOICES.get((section, key))
    if allowed and value not in allowed:
        raise ValidationError(f"config field {where} must be one of {allowed}, got {value!r}")
    return value


class ExperimentConfig:
    """Nested sections of plain values, addressed as ``cfg["section"]["key"]``."""

    def __init__(self, data: dict | None = None):
        self.data = copy.deepcopy(DEFAULTS)
        data = dict(data or {})
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValidationError(f"config schema_version {version} is not supported (expected {SCHEMA_VERSION})")
        for section, fields in data.items():
            if section not in DEFAULTS:
                raise ValidationError(f"unknown config section {section!r}")
            if not isinstance(fields, dict):
                raise ValidationError(f"config section {section!r} must be a mapping")
            for key, value in fields.items():
                self.set(section, key, value)

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS:
            raise ValidationError(f"unknown config section {section!r}")
        if key not in DEFAULTS[section]:
            raise ValidationError(f"unknown config key {section}.{key}")
        self.data[section][key] = _check_value(section, key, value, DEFAULTS[section][key])

    def override(self, assignment: str) -> None:
        """Apply ``section.key=value``; the value is parsed as YAML so numbers and lists work."""
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ValidationError(f"override must look like section.key=value, got {assignment!r}")
        path, raw = assignment.split("=", 1)
        section, key = path.strip().split(".", 1)
        self.set(section, key, yaml.safe_load(raw))

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **copy.deepcopy(self.data)}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except FileNotFoundError:
            raise ValidationError(f"{path}: config file not found") from None
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: invalid YAML ({exc})") from None
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: top level must be a mapping")
        return cls(data)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
