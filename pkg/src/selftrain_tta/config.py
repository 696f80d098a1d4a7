"""Run configuration: one JSON document with a fixed schema.

Unknown keys are rejected at every level. ``adaptation`` holds the
AdaptationConfig fields except the per-run ``n`` and ``seed``, which come
from ``budgets`` and ``seeds``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .adapt import METHODS, AdaptationConfig
from .data import SHIFTS, TASK_TAGS

OUTPUT_ENV = "SELFTRAIN_TTA_OUTPUT_DIR"
SPLITS = ("shift", "kcluster")

# ablation name -> AdaptationConfig overrides for an extra self-training variant
ABLATIONS = {
    "no_fixmatch": {"no_fixmatch": True},
    "only_p": {"only_p": True},
    "test_teacher": {"test_teacher": True},
    "both_branches": {"stop_grad_strong": False},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "classification"
    # source data and training
    source_size: int = 4096
    source_seed: int = 0
    source_epochs: int = 15
    source_lr: float = 3e-2
    # target data: a synthetic shift, or a held-out k-means cluster
    split: str = "shift"
    shift: str = "fog"
    severity: float = 0.7
    k: int = 5
    holdout: int = 0
    cluster_seed: int = 0
    target_seed: int = 1
    pool_size: int = 2048
    eval_size: int = 1024
    # sweep
    methods: list[str] = field(default_factory=lambda: ["source_only", "test", "tent"])
    ablations: list[str] = field(default_factory=list)
    budgets: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    adaptation: dict = field(default_factory=dict)
    output_dir: str = "runs"
    checkpoint: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASK_TAGS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {tuple(TASK_TAGS)}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}")
        if self.shift not in SHIFTS:
            raise ConfigError(f"unknown shift {self.shift!r}; choose from {SHIFTS}")
        if not 0 <= self.severity <= 1:
            raise ConfigError("severity must be in [0, 1]")
        if self.k < 2 or not 0 <= self.holdout < self.k:
            raise ConfigError("need k >= 2 and 0 <= holdout < k")
        for name in ("source_size", "pool_size", "eval_size", "source_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        bad = [a for a in self.ablations if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablations {bad}; choose from {tuple(ABLATIONS)}")
        if not self.methods and not self.ablations:
            raise ConfigError("nothing to run: methods and ablations are both empty")
        if not self.budgets or any(b <= 0 for b in self.budgets):
            raise ConfigError("budgets must be a non-empty list of positive sizes")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds) or len(set(self.budgets)) != len(self.budgets):
            raise ConfigError("budgets and seeds must not repeat")
        try:
            self.adaptation_config(self.budgets[0], self.seeds[0])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"adaptation: {exc}") from exc

    def adaptation_config(self, n: int, seed: int, **overrides) -> AdaptationConfig:
        extra = set(self.adaptation) & {"n", "seed"}
        if extra:
            raise ConfigError(f"adaptation may not set {sorted(extra)}; use budgets / seeds")
        return AdaptationConfig.from_dict({**self.adaptation, **overrides, "n": n, "seed": seed})

    @property
    def out(self) -> Path:
        """Output directory; the environment variable overrides the configured value."""
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    @property
    def checkpoint_path(self) -> Path:
        if self.checkpoint:
            return Path(self.checkpoint)
        tag = f"k{self.k}h{self.holdout}" if self.split == "kcluster" else "full"
        return self.out / f"source_{self.task}_{tag}.ttck"

    @property
    def needs_rotation_head(self) -> bool:
        return "ttt" in self.methods

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        hints = get_type_hints(cls)
        for key, value in d.items():
            _check_type(key, value, hints[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")


def _check_type(key: str, value, hint) -> None:
    origin = getattr(hint, "__origin__", hint)
    ok = {
        int: lambda v: isinstance(v, int) and not isinstance(v, bool),
        float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        str: lambda v: isinstance(v, str),
        bool: lambda v: isinstance(v, bool),
        dict: lambda v: isinstance(v, dict),
        list: lambda v: isinstance(v, list),
    }[origin](value)
    if ok and origin is list:
        (item,) = hint.__args__
        ok = all(_check_type_item(v, item) for v in value)
    if not ok:
        raise ConfigError(f"{key}: expected {hint}, got {value!r}")


def _check_type_item(v, item) -> bool:
    if item is int:
        return isinstance(v, int) and not isinstance(v, bool)
    return isinstance(v, item)
