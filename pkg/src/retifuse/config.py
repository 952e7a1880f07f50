"""Experiment configuration: one JSON document drives synth, run and compare.

Example::

    {
      "version": 1,
      "data": {"synthetic": {"seed": 0, "mode": "complementary"}},
      "split": {"fractions": [0.484375, 0.21875, 0.296875], "seed": 0},
      "preprocess": {"volume_grid": [16, 64, 64], "lso_grid": [64, 64]},
      "runs": [
        {"name": "structure", "method": "single:structure", "backbone": "mini-res-a",
         "model_seed": 0, "train": {"max_epochs": 30, "patience": 5}},
        {"name": "hierarchical", "method": "hierarchical", "backbone": "mini-dense-a"}
      ],
      "baseline": "structure",
      "output_dir": "experiment"
    }

``data`` holds either ``synthetic`` (fields of :class:`SynthConfig`) or
``manifest`` (path to a manifest, relative to the config file).  ``split``
may instead name a stored split file with ``{"file": "split.json"}``.
Relative ``output_dir`` values are resolved against the config file.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .backbones import PRESETS
from .data import DEFAULT_LSO_GRID, DEFAULT_VOLUME_GRID, PAPER_PATIENT_FRACTIONS, DataError
from .fusion import FusionStrategy, ModalityId
from .synthetic import SynthConfig
from .training import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunSpec:
    name: str
    method: str
    backbone: str
    train: TrainConfig = field(default_factory=TrainConfig)
    model_seed: int = 0

    def validate(self) -> None:
        if not self.name or "/" in self.name or self.name.startswith("."):
            raise ConfigError(f"invalid run name {self.name!r}")
        if self.method.startswith("single:"):
            modality = self.method.split(":", 1)[1]
            if modality not in {m.value for m in ModalityId}:
                raise ConfigError(f"run {self.name}: unknown modality {modality!r}")
        elif self.method not in {s.value for s in FusionStrategy}:
            raise ConfigError(f"run {self.name}: unknown method {self.method!r}")
        if self.backbone not in PRESETS:
            raise ConfigError(f"run {self.name}: unknown backbone preset {self.backbone!r}")

    def to_json(self) -> dict:
        return {"name": self.name, "method": self.method, "backbone": self.backbone,
                "model_seed": self.model_seed, "train": self.train.to_json()}


@dataclass
class ExperimentConfig:
    runs: list[RunSpec]
    baseline: str
    output_dir: Path
    synthetic: SynthConfig | None = None
    manifest: Path | None = None
    split_fractions: tuple[float, float, float] = PAPER_PATIENT_FRACTIONS
    split_seed: int = 0
    split_file: Path | None = None
    volume_grid: tuple[int, int, int] = DEFAULT_VOLUME_GRID
    lso_grid: tuple[int, int] = DEFAULT_LSO_GRID

    def __post_init__(self):
        if (self.synthetic is None) == (self.manifest is None):
            raise ConfigError("data must name exactly one of 'synthetic' or 'manifest'")
        if not self.runs:
            raise ConfigError("config lists no runs")
        names = [r.name for r in self.runs]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ConfigError(f"duplicate run names: {sorted(dup)}")
        for r in self.runs:
            r.validate()
        if self.baseline not in names:
            raise ConfigError(f"baseline {self.baseline!r} is not a run name")

    def run(self, name: str) -> RunSpec:
        for r in self.runs:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_json(self) -> dict:
        data = ({"synthetic": self.synthetic.to_json()} if self.synthetic is not None
                else {"manifest": str(self.manifest)})
        split = ({"file": str(self.split_file)} if self.split_file is not None
                 else {"fractions": list(self.split_fractions), "seed": self.split_seed})
        return {"version": CONFIG_VERSION, "data": data, "split": split,
                "preprocess": {"volume_grid": list(self.volume_grid), "lso_grid": list(self.lso_grid)},
                "runs": [r.to_json() for r in self.runs], "baseline": self.baseline,
                "output_dir": str(self.output_dir)}


def _build(cls, obj, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    try:
        return cls(**obj)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (ValueError, DataError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(obj: dict, base_dir: str | os.PathLike = ".") -> ExperimentConfig:
    """Validate a decoded config document.  Relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    if obj.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {obj.get('version')!r} (expected {CONFIG_VERSION})")
    unknown = set(obj) - {"version", "data", "split", "preprocess", "runs", "baseline", "output_dir"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    data = obj.get("data") or {}
    kwargs: dict = {}
    if "synthetic" in data:
        kwargs["synthetic"] = _build(SynthConfig, data["synthetic"], "data.synthetic")
    if "manifest" in data:
        kwargs["manifest"] = base / data["manifest"]

    split = obj.get("split", {})
    if "file" in split:
        kwargs["split_file"] = base / split["file"]
    else:
        fractions = tuple(float(f) for f in split.get("fractions", PAPER_PATIENT_FRACTIONS))
        if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-9:
            raise ConfigError(f"split.fractions must be three non-negative numbers summing to 1, got {fractions}")
        kwargs["split_fractions"] = fractions
        kwargs["split_seed"] = int(split.get("seed", 0))

    pre = obj.get("preprocess", {})
    kwargs["volume_grid"] = tuple(int(v) for v in pre.get("volume_grid", DEFAULT_VOLUME_GRID))
    kwargs["lso_grid"] = tuple(int(v) for v in pre.get("lso_grid", DEFAULT_LSO_GRID))
    if len(kwargs["volume_grid"]) != 3 or len(kwargs["lso_grid"]) != 2:
        raise ConfigError("preprocess grids must have 3 (volume) and 2 (LSO) extents")

    runs = []
    for i, r in enumerate(obj.get("runs") or []):
        if not isinstance(r, dict) or not {"name", "method", "backbone"} <= set(r):
            raise ConfigError(f"runs[{i}] needs name, method and backbone")
        train = _build(TrainConfig, r.get("train", {}), f"runs[{i}].train")
        runs.append(RunSpec(r["name"], r["method"], r["backbone"], train, int(r.get("model_seed", 0))))

    if "baseline" not in obj:
        raise ConfigError("config has no baseline run")
    output = Path(obj.get("output_dir", "experiment"))
    return ExperimentConfig(runs=runs, baseline=obj["baseline"],
                            output_dir=output if output.is_absolute() else base / output, **kwargs)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})") from None
    return parse_config(obj, path.parent)


def table_runs(backbone: str = "mini-res-a", train: TrainConfig | None = None) -> list[RunSpec]:
    """The six rows of the standard comparison: three single modalities, three fusion strategies."""
    train = train or TrainConfig()
    methods = [("structure", "single:structure"), ("flow", "single:flow"), ("lso", "single:lso"),
               ("hierarchical", "hierarchical"), ("early", "early"), ("intermediate", "intermediate")]
    return [RunSpec(name, method, backbone, TrainConfig(**asdict(train))) for name, method in methods]
