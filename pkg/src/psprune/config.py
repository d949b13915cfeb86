"""Run configuration files (INI sections, ``key = value``).

Example::

    [train]
    epochs = 30
    seed = 0

    [prune]
    mode = psp_threshold
    granularity = column
    epsilon = 0.1

    [model]
    arch = resnet
    depth = 8

    [data]
    source = synthetic
    noise = 2.5

    [output]
    dir = runs/example

Unknown sections or keys are rejected. Every default is written back into
the echoed config, so a checkpoint's embedded config fully describes the run.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import Dataset, DataError, SyntheticSpec, load_cifar_binary, load_idx, make_synthetic, subtract_mean
from .train import ConfigError, TrainConfig

DATA_ROOT_ENV = "PSPRUNE_DATA_ROOT"

TRAIN_KEYS = {"epochs", "batch_size", "lr", "lr_milestones", "lr_divisor", "momentum", "weight_decay", "seed", "flip"}
PRUNE_KEYS = {"mode", "granularity", "epsilon", "structure_regularizer", "structure_lambda", "grad_rule",
              "fraction", "psp_include", "psp_exclude"}
MODEL_DEFAULTS = {"arch": "resnet", "depth": 8, "widths": [16, 32, 64], "growth_rate": 12, "init_channels": 16}
DATA_DEFAULTS = {"source": "synthetic", "path": "", "val_path": "", "seed": 0, **SyntheticSpec().to_dict()}
OUTPUT_DEFAULTS = {"dir": ".", "checkpoint": "model.ckpt", "log": "run.jsonl"}


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            v = raw.strip().lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return v in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, (list, tuple)):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            sample = default[0] if default else ""
            return [type(sample)(s) for s in items]
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    return raw.strip()


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: dict = field(default_factory=lambda: dict(MODEL_DEFAULTS))
    data: dict = field(default_factory=lambda: dict(DATA_DEFAULTS))
    output: dict = field(default_factory=lambda: dict(OUTPUT_DEFAULTS))
    base_dir: Path = field(default=Path("."), compare=False)

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "model": dict(self.model), "data": dict(self.data),
                "output": dict(self.output)}

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        t = dict(d.get("train", {}))
        for k in ("lr_milestones", "psp_include", "psp_exclude"):
            if k in t:
                t[k] = tuple(t[k])
        try:
            train = TrainConfig(**t)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(train, {**MODEL_DEFAULTS, **d.get("model", {})}, {**DATA_DEFAULTS, **d.get("data", {})},
                   {**OUTPUT_DEFAULTS, **d.get("output", {})}, Path(base_dir))

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**{k: self.data[k] for k in SyntheticSpec.__dataclass_fields__})

    def out_path(self, key: str) -> Path:
        p = Path(self.output["dir"])
        if not p.is_absolute():
            p = self.base_dir / p
        return p / self.output[key]


def parse_config(text: str, base_dir=".") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    known = {"train", "prune", "model", "data", "output"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    tdefaults = TrainConfig()
    tvals = {}
    for section, keys in (("train", TRAIN_KEYS), ("prune", PRUNE_KEYS)):
        if not cp.has_section(section):
            continue
        for key, raw in cp.items(section):
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            default = getattr(tdefaults, key)
            if isinstance(default, tuple):
                default = list(default) or [""]
                if key == "lr_milestones":
                    default = [0.0]
            tvals[key] = _coerce(raw, default, key)
    for k in ("lr_milestones", "psp_include", "psp_exclude"):
        if k in tvals:
            tvals[k] = tuple(tvals[k])
    train = TrainConfig(**{**{f.name: getattr(tdefaults, f.name) for f in fields(TrainConfig)}, **tvals})
    out = []
    for section, defaults in (("model", MODEL_DEFAULTS), ("data", DATA_DEFAULTS), ("output", OUTPUT_DEFAULTS)):
        vals = dict(defaults)
        if cp.has_section(section):
            for key, raw in cp.items(section):
                if key not in defaults:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                vals[key] = _coerce(raw, defaults[key], key)
        out.append(vals)
    model, data, output = out
    if model["arch"] not in ("resnet", "densenet", "plain"):
        raise ConfigError(f"unknown arch {model['arch']!r}")
    if data["source"] not in ("synthetic", "idx", "cifar"):
        raise ConfigError(f"unknown data source {data['source']!r}")
    return RunConfig(train, model, data, output, Path(base_dir))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, path.parent)


def resolve_data_path(p: str, base_dir: Path) -> Path:
    path = Path(p)
    if path.is_absolute():
        return path
    root = os.environ.get(DATA_ROOT_ENV)
    return (Path(root) if root else base_dir) / path


def arch_dict(cfg: RunConfig) -> dict:
    m = cfg.model
    if m["arch"] == "resnet":
        return {"name": "resnet", "depth": m["depth"], "widths": list(m["widths"])}
    if m["arch"] == "densenet":
        return {"name": "densenet", "depth": m["depth"], "growth_rate": m["growth_rate"],
                "init_channels": m["init_channels"]}
    return {"name": "plain", "widths": list(m["widths"])}


def load_file_dataset(source: str, path: Path, num_classes: int, split: str) -> Dataset:
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    if source == "cifar":
        return load_cifar_binary(path, num_classes, split)
    return load_idx(path, num_classes=num_classes, split=split)


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Train and val splits, both with the train split's per-pixel mean removed."""
    d = cfg.data
    if d["source"] == "synthetic":
        spec = cfg.synthetic_spec()
        train = make_synthetic(spec, d["seed"], "train")
        val = make_synthetic(spec, d["seed"], "val")
    else:
        if not d["path"]:
            raise DataError(f"[data] path is required for source {d['source']!r}")
        train = load_file_dataset(d["source"], resolve_data_path(d["path"], cfg.base_dir), d["num_classes"], "train")
        if d["val_path"]:
            val = load_file_dataset(d["source"], resolve_data_path(d["val_path"], cfg.base_dir),
                                    d["num_classes"], "val")
        else:
            val = train
    train = subtract_mean(train)
    return train, subtract_mean(val, train.mean)
