"""Experiment configuration: JSON schema, defaults and fail-closed validation.

Every section is a JSON object whose keys must come from the tables below;
unknown keys are rejected with their full key path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .fusion import ConfigError, FusionBlockConfig
from .models import ARCHS, FUSION_MODES, ModelSpec
from .train import LossConfig, TrainConfig

TASKS = ("multisource", "images", "sentiment", "graphs")
TASK_ARCH = {"multisource": "direct", "images": "cnn", "sentiment": "rnn", "graphs": "gcn"}

DATA_DEFAULTS: dict[str, dict[str, Any]] = {
    "multisource": {"n_train": 2000, "n_test": 500, "K": 3, "d": 8, "C": 2, "sigma": 0.5,
                    "p_corrupt": 0.5, "sigma_noise": 3.0, "csv": None},
    "images": {"n_train": 600, "n_test": 150},
    "sentiment": {"n_train": 600, "n_test": 150, "T": 12, "V": 50},
    "graphs": {"n_train": 200, "n_test": 100, "n_min": 6, "n_max": 10, "edge_list": None},
}
TRAIN_DEFAULTS: dict[str, Any] = {"epochs": 30, "batch_size": 32, "lr": 3e-3,
                                  "optimizer": "adam", "dropout_p": None, "shuffle": True}
LOSS_DEFAULTS: dict[str, Any] = {"weight_decay": 0.0}
TOP_KEYS = ("task", "data", "model", "fusion", "arms", "seeds", "train", "loss", "output_dir")

DEFAULT_CONFIG_DIR = Path(__file__).parent / "configs"


def default_config_path(task: str = "multisource") -> Path:
    return DEFAULT_CONFIG_DIR / f"{task}.json"


@dataclass
class ExperimentConfig:
    task: str
    data: dict[str, Any]
    model: ModelSpec
    arms: list[str]
    seeds: list[int]
    train: TrainConfig
    loss: LossConfig
    output_dir: str = "runs/experiment"
    raw: dict[str, Any] = field(default_factory=dict)

    @property
    def fusion(self) -> FusionBlockConfig:
        return self.model.fusion

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        fusion = model.pop("fusion")
        model.pop("fusion_mode")
        train = {k: getattr(self.train, k) for k in TRAIN_DEFAULTS}
        return {"task": self.task, "data": dict(self.data), "model": model, "fusion": fusion,
                "arms": list(self.arms), "seeds": list(self.seeds), "train": train,
                "loss": {"weight_decay": self.loss.weight_decay}, "output_dir": self.output_dir}


def _check_keys(obj, allowed, path: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key" if path else f"{key}: unknown key")
    return obj


def _fill(section: dict, defaults: dict, path: str) -> dict:
    out = {}
    for key, default in defaults.items():
        value = section.get(key, default)
        if default is not None and value is not None:
            if isinstance(default, bool):
                ok = isinstance(value, bool)
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif isinstance(default, float):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
                value = float(value) if ok else value
            else:
                ok = isinstance(value, type(default))
            if not ok:
                raise ConfigError(f"{path}.{key}: expected {type(default).__name__}, got {value!r}")
        out[key] = value
    return out


def parse_config(raw: dict) -> ExperimentConfig:
    _check_keys(raw, TOP_KEYS, "")
    task = raw.get("task", "multisource")
    if task not in TASKS:
        raise ConfigError(f"task: expected one of {TASKS}, got {task!r}")
    data = _fill(_check_keys(raw.get("data", {}), DATA_DEFAULTS[task], "data"),
                 DATA_DEFAULTS[task], "data")
    if data["n_train"] < 1 or data["n_test"] < 1:
        raise ConfigError("data: n_train and n_test must be >= 1")

    model_raw = dict(_check_keys(raw.get("model", {}), _model_keys(task), "model"))
    arch = model_raw.setdefault("arch", TASK_ARCH[task])
    if arch != TASK_ARCH[task]:
        raise ConfigError(f"model.arch: task {task!r} uses arch {TASK_ARCH[task]!r}, got {arch!r}")
    if "fusion_mode" in model_raw:
        raise ConfigError("model.fusion_mode: set per arm via 'arms', not in the model section")
    model_raw.setdefault("num_classes", _task_classes(task, data))
    if task == "multisource":
        model_raw.setdefault("source_dims", [data["d"] + 1] * data["K"])
    elif task == "sentiment":
        model_raw.setdefault("vocab", data["V"])
    elif task == "graphs":
        model_raw.setdefault("in_features", data["n_max"])
    fusion_raw = raw.get("fusion", {})
    if not isinstance(fusion_raw, dict):
        raise ConfigError("fusion: expected an object")
    model_raw["fusion"] = fusion_raw
    model_raw["fusion_mode"] = "aff"
    spec = ModelSpec.from_dict(model_raw, "model", fusion_path="fusion")
    arms = raw.get("arms", list(FUSION_MODES))
    if not isinstance(arms, list) or not arms:
        raise ConfigError("arms: must be a nonempty list")
    for i, arm in enumerate(arms):
        if arm not in FUSION_MODES:
            raise ConfigError(f"arms[{i}]: expected one of {FUSION_MODES}, got {arm!r}")
    if len(set(arms)) != len(arms):
        raise ConfigError("arms: duplicate entries")
    seeds = raw.get("seeds", [1, 2, 3, 4, 5])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)):
        raise ConfigError("seeds: must be a nonempty list of nonnegative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: duplicate entries")

    train_raw = _fill(_check_keys(raw.get("train", {}), TRAIN_DEFAULTS, "train"),
                      TRAIN_DEFAULTS, "train")
    if train_raw["dropout_p"] is not None:
        p = train_raw["dropout_p"]
        if not isinstance(p, (int, float)) or isinstance(p, bool) or not 0.0 <= p < 1.0:
            raise ConfigError("train.dropout_p: must be null or in [0, 1)")
        spec.fusion.dropout_p = float(p)
    try:
        train = TrainConfig(**train_raw)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    loss_raw = _fill(_check_keys(raw.get("loss", {}), LOSS_DEFAULTS, "loss"), LOSS_DEFAULTS, "loss")
    try:
        loss = LossConfig(aux_weight=spec.fusion.aux_weight, weight_decay=loss_raw["weight_decay"])
    except ValueError as exc:
        raise ConfigError(f"loss: {exc}") from None
    out_dir = raw.get("output_dir", f"runs/{task}")
    if not isinstance(out_dir, str):
        raise ConfigError("output_dir: expected a string")
    return ExperimentConfig(task, data, spec, arms, seeds, train, loss, out_dir, raw)


def _model_keys(task: str) -> set[str]:
    from .models import ARCH_DEFAULTS
    return {"arch", "num_classes"} | set(ARCH_DEFAULTS[TASK_ARCH[task]])


def _task_classes(task: str, data: dict) -> int:
    return {"multisource": data.get("C", 2), "images": 3, "sentiment": 2, "graphs": 2}[task]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw)


__all__ = ["ARCHS", "ExperimentConfig", "ConfigError", "load_config", "parse_config",
           "default_config_path", "DATA_DEFAULTS", "TRAIN_DEFAULTS", "LOSS_DEFAULTS"]
