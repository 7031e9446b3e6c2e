"""The desk-scale benchmark scenario (DS1) and its result cache.

DS1: the five-layer CNN on a 6,000-sample stratified training subset plus
the full 10,000-image test split, 30 clients, 10 selected per round, 2
local epochs, batch 64, lr 0.01, 40 rounds, one malicious client per
round (fixed frequency), PDR 0.5, q = 0.5 non-IID, tau 0.95, lambda 0.5,
identification every 5 rounds.

Runs use Fashion-MNIST when the IDX files are present (./data or
$BCLSIM_DATA_DIR); otherwise the seeded synthetic generator stands in,
with identical scenario parameters.  Finished runs are cached as JSON so
analysis and the acceptance suite never recompute a scenario.
"""

from __future__ import annotations

import json
import os
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig
from .config import FASHION_FILES
from .data import LabeledSet, SyntheticSpec, generate_synthetic, load_idx_pair, stratified_subset
from .defenses import DefenseConfig
from .federation import FLConfig, run_experiment

__all__ = ["ds1_datasets", "ds1_config", "run_scenario", "dataset_tag",
           "DEFAULT_CACHE"]

DEFAULT_CACHE = Path(__file__).resolve().parents[2] / "results" / "ds1"

DS1_TRAIN_SUBSET = 6000
DS1_SUBSET_SEED = 20240501


def _find_fashion_dir() -> Path | None:
    candidates = []
    env = os.environ.get("BCLSIM_DATA_DIR")
    if env:
        candidates.append(Path(env))
    candidates.append(Path(__file__).resolve().parents[2] / "data")
    candidates.append(Path("data"))
    for d in candidates:
        if d.is_dir() and any((d / n).exists() for n in FASHION_FILES["train_images"]):
            return d
    return None


def dataset_tag() -> str:
    return "fashion-mnist" if _find_fashion_dir() else "synthetic"


def _first(directory: Path, names) -> Path:
    for n in names:
        if (directory / n).exists():
            return directory / n
    raise FileNotFoundError(names)


def ds1_datasets() -> tuple[LabeledSet, LabeledSet]:
    """(train subset, full test set) for the desk-scale scenario."""
    d = _find_fashion_dir()
    if d is not None:
        train = load_idx_pair(_first(d, FASHION_FILES["train_images"]),
                              _first(d, FASHION_FILES["train_labels"]))
        test = load_idx_pair(_first(d, FASHION_FILES["test_images"]),
                             _first(d, FASHION_FILES["test_labels"]))
    else:
        train = generate_synthetic(SyntheticSpec(n_samples=20000, seed=11))
        test = generate_synthetic(SyntheticSpec(n_samples=10000, seed=12))
    train = stratified_subset(train, DS1_TRAIN_SUBSET, DS1_SUBSET_SEED)
    return train, test


def ds1_config(defense: str = "fedavg", attack: str | None = "badnets",
               seed: int = 0, **overrides) -> FLConfig:
    attack_overrides = overrides.pop("attack_overrides", {})
    atk = None
    if attack is not None:
        atk = AttackConfig(
            method=attack, tau=0.95, lam=0.5, interval=5, **attack_overrides)
    cfg = FLConfig(
        n_clients=30, select_fraction=1 / 3, local_epochs=2, batch_size=64,
        rounds=40, malicious_fraction=0.1, pdr=0.5, lr=0.01, q=0.5, seed=seed,
        arch_id="cnn5", defense=DefenseConfig(rule=defense), attack=atk)
    return replace(cfg, **overrides) if overrides else cfg


def _records_payload(records) -> list:
    out = []
    for r in records:
        row = {
            "round": r.round_index,
            "acc": r.acc,
            "bsr": r.bsr,
            "n_selected": len(r.selected),
            "n_malicious": len(r.malicious_selected),
            "n_accepted_benign": r.n_accepted_benign,
            "n_accepted_malicious": r.n_accepted_malicious,
            "fallbacks": list(r.fallbacks),
        }
        if "flipped_fraction" in r.diagnostics:
            row["flipped_fraction"] = r.diagnostics["flipped_fraction"]
        out.append(row)
    return out


def _fingerprint(cfg: FLConfig) -> str:
    import hashlib
    return hashlib.sha256(repr(cfg).encode()).hexdigest()[:16]


def run_scenario(name: str, cfg: FLConfig, cache_dir=None, *,
                 progress=None, force=False) -> dict:
    """Run (or load) one scenario; returns the cached payload dict."""
    cache_dir = Path(cache_dir) if cache_dir else DEFAULT_CACHE
    cache_dir.mkdir(parents=True, exist_ok=True)
    tag = dataset_tag()
    path = cache_dir / f"{name}_seed{cfg.seed}_{tag}.json"
    if path.exists() and not force:
        payload = json.loads(path.read_text())
        if (payload.get("dataset") == tag
                and payload.get("config_fingerprint") == _fingerprint(cfg)):
            return payload
    train, test = ds1_datasets()
    records, summary = run_experiment(cfg, train, test, progress=progress)
    payload = {
        "name": name,
        "seed": cfg.seed,
        "dataset": tag,
        "config_fingerprint": _fingerprint(cfg),
        "defense": cfg.defense.rule,
        "attack": cfg.attack.method if cfg.attack else "none",
        "best_bsr": summary.best_bsr,
        "avg_bsr": summary.avg_bsr,
        "final_acc": summary.final_acc,
        "bar": summary.bar,
        "mar": summary.mar,
        "warmup": summary.warmup,
        "wall_time": summary.wall_time,
        "records": _records_payload(records),
    }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload))
    os.replace(tmp, path)
    return payload
