"""Experiment configuration: TOML parsing, serialization, dataset resolution.

Configs are flat TOML tables with an explicit schema version so result
directories stay diffable and reproducible.  ``parse -> serialize ->
parse`` is an identity.
"""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attacks import AttackConfig
from .data import (LabeledSet, SyntheticSpec, generate_synthetic,
                   load_idx_pair, stratified_subset)
from .defenses import DefenseConfig
from .federation import FLConfig

__all__ = ["DatasetConfig", "ExperimentConfig", "load_config", "parse_config",
           "serialize_config", "resolve_datasets", "atomic_write"]

SCHEMA_VERSION = 1

SWEEP_AXES = ("none", "tau", "lambda", "interval", "malicious_ratio", "q")

FASHION_FILES = {
    "train_images": ("train-images-idx3-ubyte.gz", "train-images-idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte.gz", "train-labels-idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte.gz", "t10k-images-idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte.gz", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"      # "synthetic" | "idx"
    dir: str = ""                  # idx: directory with the IDX pairs
    train_subset: int = 0          # stratified subset size (0 = all)
    subset_seed: int = 1
    n_train: int = 6000            # synthetic sizes
    n_test: int = 10000
    noise: float = 0.15
    jitter: int = 2
    blob_sigma: float = 2.5
    seed: int = 1

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ValueError(f"unknown dataset source {self.source!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    repeats: int = 1
    out_dir: str = "results"
    sweep_axis: str = "none"
    sweep_values: tuple = ()
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    fl: FLConfig = field(default_factory=FLConfig)

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.sweep_axis not in SWEEP_AXES:
            raise ValueError(f"unknown sweep axis {self.sweep_axis!r}")
        for v in self.sweep_values:
            _apply_axis(self.fl, self.sweep_axis, v)  # validates range

    def with_axis_value(self, value) -> "ExperimentConfig":
        return replace(self, fl=_apply_axis(self.fl, self.sweep_axis, value),
                       sweep_axis="none", sweep_values=())


def _apply_axis(fl: FLConfig, axis: str, value) -> FLConfig:
    if axis == "none":
        return fl
    if axis in ("tau", "lambda", "interval"):
        if fl.attack is None:
            raise ValueError(f"sweep axis {axis!r} requires an attack section")
        key = {"tau": "tau", "lambda": "lam", "interval": "interval"}[axis]
        cast = int if axis == "interval" else float
        return replace(fl, attack=replace(fl.attack, **{key: cast(value)}))
    if axis == "malicious_ratio":
        return replace(fl, malicious_fraction=float(value))
    if axis == "q":
        return replace(fl, q=float(value))
    raise ValueError(f"unknown sweep axis {axis!r}")


# -- parsing ------------------------------------------------------------------

def parse_config(text: str) -> ExperimentConfig:
    raw = tomllib.loads(text)
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {version!r}")
    exp = raw.get("experiment", {})
    ds = DatasetConfig(**raw.get("dataset", {}))
    fed = dict(raw.get("federation", {}))
    defense = DefenseConfig(**raw.get("defense", {}))
    attack = None
    atk_raw = dict(raw.get("attack", {}))
    if atk_raw and atk_raw.get("method", "none") != "none":
        if "lambda" in atk_raw:
            atk_raw["lam"] = atk_raw.pop("lambda")
        attack = AttackConfig(**atk_raw)
    fl = FLConfig(defense=defense, attack=attack, **fed)
    sweep = raw.get("sweep", {})
    return ExperimentConfig(
        name=exp.get("name", "experiment"),
        repeats=exp.get("repeats", 1),
        out_dir=exp.get("out_dir", "results"),
        sweep_axis=sweep.get("axis", "none"),
        sweep_values=tuple(sweep.get("values", ())),
        dataset=ds,
        fl=fl,
    )


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# -- serialization -------------------------------------------------------------

def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)} to TOML")


def _table(name: str, items: dict) -> str:
    lines = [f"[{name}]"]
    for k, v in items.items():
        if v is None:  # TOML has no null; absence means the default
            continue
        lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines)


def serialize_config(cfg: ExperimentConfig) -> str:
    parts = [f"schema_version = {SCHEMA_VERSION}"]
    parts.append(_table("experiment", {
        "name": cfg.name, "repeats": cfg.repeats, "out_dir": cfg.out_dir}))
    parts.append(_table("dataset", asdict(cfg.dataset)))
    fl = cfg.fl
    parts.append(_table("federation", {
        "n_clients": fl.n_clients, "select_fraction": fl.select_fraction,
        "local_epochs": fl.local_epochs, "batch_size": fl.batch_size,
        "rounds": fl.rounds, "malicious_fraction": fl.malicious_fraction,
        "pdr": fl.pdr, "lr": fl.lr, "q": fl.q, "seed": fl.seed,
        "arch_id": fl.arch_id, "val_fraction": fl.val_fraction,
        "warmup_fraction": fl.warmup_fraction, "target_label": fl.target_label,
        "trigger_value": fl.trigger_value,
        "trigger_block": list(fl.trigger_block),
        "trigger_anchor": (fl.trigger_anchor if isinstance(fl.trigger_anchor, str)
                           else list(fl.trigger_anchor))}))
    parts.append(_table("defense", asdict(fl.defense)))
    if fl.attack is not None:
        atk = asdict(fl.attack)
        atk["lambda"] = atk.pop("lam")
        parts.append(_table("attack", atk))
    if cfg.sweep_axis != "none":
        parts.append(_table("sweep", {
            "axis": cfg.sweep_axis, "values": list(cfg.sweep_values)}))
    return "\n\n".join(parts) + "\n"


# -- dataset resolution ----------------------------------------------------------

def _find_idx(directory: Path, names: tuple) -> Path:
    for name in names:
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(
        f"none of {names} found under {directory} (set --dataset-dir or "
        f"BCLSIM_DATA_DIR)")


def resolve_datasets(ds: DatasetConfig, dataset_dir: str | None = None):
    """Returns (train, test) LabeledSets for a dataset config.

    For the idx source, the directory comes from --dataset-dir, then the
    config, then $BCLSIM_DATA_DIR.
    """
    if ds.source == "synthetic":
        train = generate_synthetic(SyntheticSpec(
            n_samples=ds.n_train, noise=ds.noise, jitter=ds.jitter,
            blob_sigma=ds.blob_sigma, seed=ds.seed))
        test = generate_synthetic(SyntheticSpec(
            n_samples=ds.n_test, noise=ds.noise, jitter=ds.jitter,
            blob_sigma=ds.blob_sigma, seed=ds.seed + 1))
    else:
        directory = Path(dataset_dir or ds.dir
                         or os.environ.get("BCLSIM_DATA_DIR", "data"))
        train = load_idx_pair(
            _find_idx(directory, FASHION_FILES["train_images"]),
            _find_idx(directory, FASHION_FILES["train_labels"]))
        test = load_idx_pair(
            _find_idx(directory, FASHION_FILES["test_images"]),
            _find_idx(directory, FASHION_FILES["test_labels"]))
    if ds.train_subset:
        train = stratified_subset(train, ds.train_subset, ds.subset_seed)
    return train, test


def atomic_write(path, text: str) -> None:
    """Write via a temp file + rename so interrupted runs leave no partials."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
