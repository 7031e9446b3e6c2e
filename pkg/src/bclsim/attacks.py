"""Backdoor-critical layer identification and attack crafting.

The substitution analysis ranks layers by how much the backdoor success
rate (BSR) collapses when a layer of the malicious model is swapped for
its benign counterpart, then selects the smallest prefix whose reverse
substitution restores BSR past a threshold.  On top of the identified
subset sit the two layer-wise attacks (blend-poisoning with a
stealthiness knob, and sign pre-flipping against sign-based defenses)
plus the baseline attacks (trigger training, scaling, constraint loss)
and the random-layer ablation.

Cost of one identification: two local trainings (clean, then poisoned,
each capped at a few epochs with early stopping) plus one forward pass
over the poisoned validation split per layer for the ranking and up to
one more per layer for the backward selection; for an l-layer model on
n training samples that is O(e * n) sample passes of SGD and
O(l * n_val) evaluation forwards, so the substitutions themselves are
cheap next to the pair training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledSet
from .defenses import DefenseConfig, aggregate
from .layermap import (LayerMap, SelectionMask, average_layermaps,
                       check_aligned, substitute_layers)
from .models import Architecture
from .train import TrainSpec, evaluate, train_local

__all__ = [
    "AttackConfig", "BCLayerReport", "LsaAbort",
    "lsa_step1_train_pair", "lsa_forward_rank", "lsa_step3_backward_select",
    "run_lsa", "craft_lp", "compute_u_average", "adaptive_layer_control",
    "craft_lf", "baseline_badnets", "scale_update", "constraint_loss_train",
    "random_lp_mask",
]

ATTACK_METHODS = ("badnets", "dba", "scaled_badnets", "constraint",
                  "lp", "random_lp", "lf")


class LsaAbort(RuntimeError):
    """Layer substitution analysis failed (the local backdoor never trained)."""


@dataclass(frozen=True)
class AttackConfig:
    method: str = "lp"
    tau: float = 0.95              # backward-substitution threshold
    lam: float = 0.5               # stealthiness knob (Fashion-MNIST default)
    interval: int = 1              # identification interval in rounds
    gamma: float = 5.0             # scaling factor
    beta: float = 0.001            # constraint-loss weight
    presumed_defense: str = "multikrum"
    seed: int = 0
    clean_epochs: int = 10
    poison_epochs: int = 5
    early_stop_delta: float = 0.005
    early_stop_patience: int = 2
    collusion_replicas: int = 4
    adaptive_control: bool = True
    drop_ratio: float = 0.0        # randomly drop this share of L* (robustness runs)
    add_ratio: float = 0.0         # randomly add non-selected layers, |L*|-relative

    def __post_init__(self):
        if self.method not in ATTACK_METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.interval < 1:
            raise ValueError("identification interval must be >= 1")


@dataclass
class BCLayerReport:
    """Ranked forward-substitution results plus the selected subset."""

    ranking: list            # (layer_name, delta_bsr), descending
    selected: list           # L*, in addition order (a prefix of the ranking)
    tau: float
    bsr_malicious: float
    bsr_m2b: float
    round_index: int = -1
    exhausted: bool = False

    def mask(self, template: LayerMap) -> SelectionMask:
        return SelectionMask.from_names(template, self.selected)

    def non_selected(self, template: LayerMap) -> list:
        chosen = set(self.selected)
        return [n for n in template.names if n not in chosen]

    def to_dict(self) -> dict:
        return {
            "ranking": [[n, float(d)] for n, d in self.ranking],
            "selected": list(self.selected),
            "tau": self.tau,
            "bsr_malicious": self.bsr_malicious,
            "bsr_m2b": self.bsr_m2b,
            "round_index": self.round_index,
            "exhausted": self.exhausted,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "BCLayerReport":
        return cls(
            ranking=[(n, float(x)) for n, x in d["ranking"]],
            selected=list(d["selected"]),
            tau=float(d["tau"]),
            bsr_malicious=float(d["bsr_malicious"]),
            bsr_m2b=float(d["bsr_m2b"]),
            round_index=int(d.get("round_index", -1)),
            exhausted=bool(d.get("exhausted", False)),
        )


# -- Step 1: local training pair -------------------------------------------

def _train_until_converged(model: LayerMap, arch: Architecture, data: LabeledSet,
                           spec: TrainSpec, max_epochs: int,
                           val: LabeledSet | None, delta: float, patience: int,
                           scratch: dict | None = None) -> LayerMap:
    """Epoch-by-epoch SGD with an early stop on stalled validation accuracy."""
    current = model
    best = -1.0
    stalled = 0
    for epoch in range(max_epochs):
        current = train_local(current, arch, data,
                              replace(spec, epochs=1, seed=spec.seed + epoch))
        if val is None:
            continue
        acc = evaluate(current, arch, val, scratch=scratch)
        if acc >= best + delta:
            best = acc
            stalled = 0
        else:
            stalled += 1
            if stalled >= patience:
                break
    return current


def lsa_step1_train_pair(global_model: LayerMap, arch: Architecture,
                         clean_train: LabeledSet, poison_train: LabeledSet,
                         spec: TrainSpec, cfg: AttackConfig, *,
                         clean_val: LabeledSet | None = None,
                         poison_val: LabeledSet | None = None):
    """Train the benign model from the global model, then the malicious
    model from the benign one, each until convergence (capped epochs with
    early stopping on the matching validation split)."""
    if len(poison_train) == 0:
        raise ValueError("empty poisoned training set")
    scratch: dict = {}
    w_benign = _train_until_converged(
        global_model, arch, clean_train, spec, cfg.clean_epochs,
        clean_val, cfg.early_stop_delta, cfg.early_stop_patience, scratch)
    w_malicious = _train_until_converged(
        w_benign, arch, poison_train, replace(spec, seed=spec.seed + 1000),
        cfg.poison_epochs, poison_val, cfg.early_stop_delta,
        cfg.early_stop_patience, scratch)
    return w_benign, w_malicious


# -- Step 2: forward substitution ranking ------------------------------------

def lsa_forward_rank(w_benign: LayerMap, w_malicious: LayerMap,
                     arch: Architecture, poison_val: LabeledSet) -> list:
    """Swap each malicious layer for its benign twin, measure the BSR drop.

    Returns every layer as (name, delta_bsr), sorted by the drop
    (descending), ties broken by layer order.
    """
    check_aligned(w_benign, w_malicious)
    if len(poison_val) == 0:
        raise ValueError("empty poisoned validation set")
    scratch: dict = {}
    bsr_mal = evaluate(w_malicious, arch, poison_val, scratch=scratch)
    deltas = []
    for j, name in enumerate(w_malicious.names):
        swapped = substitute_layers(
            w_malicious, w_benign, SelectionMask.from_names(w_malicious, [name]))
        bsr = evaluate(swapped, arch, poison_val, scratch=scratch)
        deltas.append((name, bsr_mal - bsr, j))
    deltas.sort(key=lambda t: (-t[1], t[2]))
    return [(name, d) for name, d, _ in deltas]


# -- Step 3: backward substitution selection ----------------------------------

def lsa_step3_backward_select(w_benign: LayerMap, w_malicious: LayerMap,
                              arch: Architecture, ranked: list, tau: float,
                              poison_val: LabeledSet,
                              round_index: int = -1) -> BCLayerReport:
    """Grow L* in rank order until the benign model with those malicious
    layers reaches tau * BSR_malicious; flags exhaustion if it never does."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1]")
    scratch: dict = {}
    bsr_mal = evaluate(w_malicious, arch, poison_val, scratch=scratch)
    if bsr_mal == 0.0:
        raise LsaAbort("malicious model has zero BSR; nothing to identify")
    selected: list = []
    bsr = 0.0
    for name, _ in ranked:
        selected.append(name)
        m2b = substitute_layers(
            w_benign, w_malicious, SelectionMask.from_names(w_benign, selected))
        bsr = evaluate(m2b, arch, poison_val, scratch=scratch)
        if bsr >= tau * bsr_mal:
            return BCLayerReport(ranked, selected, tau, bsr_mal, bsr, round_index)
    return BCLayerReport(ranked, selected, tau, bsr_mal, bsr, round_index,
                         exhausted=True)


def run_lsa(global_model: LayerMap, arch: Architecture,
            clean_train: LabeledSet, poison_train: LabeledSet,
            poison_val: LabeledSet, spec: TrainSpec, cfg: AttackConfig, *,
            clean_val: LabeledSet | None = None, round_index: int = -1):
    """All three steps; returns (report, w_benign, w_malicious)."""
    w_benign, w_malicious = lsa_step1_train_pair(
        global_model, arch, clean_train, poison_train, spec, cfg,
        clean_val=clean_val, poison_val=poison_val)
    ranked = lsa_forward_rank(w_benign, w_malicious, arch, poison_val)
    report = lsa_step3_backward_select(
        w_benign, w_malicious, arch, ranked, cfg.tau, poison_val, round_index)
    return report, w_benign, w_malicious


# -- LP attack ----------------------------------------------------------------

def craft_lp(u_malicious: LayerMap, u_average: LayerMap, mask: SelectionMask,
             lam: float) -> LayerMap:
    """Blend malicious and average models on the selected layers.

    Selected layers become lam * malicious + relu(1 - lam) * average;
    unselected layers are the average model's entries verbatim.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    check_aligned(u_malicious, u_average)
    if len(mask) != len(u_malicious):
        raise ValueError("mask length does not match model")
    lam64 = np.float64(lam)
    keep = np.float64(max(1.0 - lam, 0.0))  # relu(1 - lam)
    entries = []
    for j, flag in enumerate(mask.flags):
        if flag:
            mixed = (lam64 * u_malicious.entries[j].values.astype(np.float64)
                     + keep * u_average.entries[j].values.astype(np.float64))
            entries.append(replace(u_malicious.entries[j],
                                   values=mixed.astype(np.float32)))
        else:
            entries.append(u_average.entries[j])
    return LayerMap(u_malicious.arch_id, entries)


def compute_u_average(benign_models: list) -> LayerMap:
    """Per-parameter mean of the locally available benign models."""
    if not benign_models:
        raise ValueError("need at least one benign model to average")
    return average_layermaps(benign_models)


def adaptive_layer_control(report: BCLayerReport, craft_fn, benign_models: list,
                           presumed_rule: str, defense_cfg: DefenseConfig,
                           global_model: LayerMap, template: LayerMap):
    """Shrink L* until the crafted model would pass the presumed defense.

    The server's selection is simulated over {crafted} + the attacker's
    own benign models; while the crafted model is rejected and more than
    one layer remains, the most recently added (lowest-ranked) layer is
    dropped and the model re-crafted.  Returns (mask, accepted).
    """
    if len(benign_models) < 2:
        raise ValueError("adaptive control needs >= 2 local benign models")
    if presumed_rule not in ("multikrum", "flame", "layerwise_multikrum"):
        raise ValueError(f"cannot simulate presumed defense {presumed_rule!r}")
    n_sim = len(benign_models) + 1
    sim_cfg = replace(defense_cfg,
                      m_select=min(defense_cfg.m_select, n_sim - 1),
                      f=max(0, min(defense_cfg.f, n_sim - 3)))
    selected = list(report.selected)
    while True:
        mask = SelectionMask.from_names(template, selected)
        crafted = craft_fn(mask)
        updates = [("crafted", crafted)] + [
            (f"benign{k}", m) for k, m in enumerate(benign_models)]
        verdict = aggregate(presumed_rule, global_model, updates, sim_cfg,
                            rng=np.random.default_rng(0))
        accepted = "crafted" in verdict.accepted
        if accepted or len(selected) <= 1:
            return mask, accepted
        selected.pop()  # drop the least backdoor-critical layer first


# -- LF attack ----------------------------------------------------------------

def craft_lf(w_m2b: LayerMap, w_global: LayerMap) -> LayerMap:
    """Reflect the substituted model about the global model (2g - w)."""
    check_aligned(w_m2b, w_global)
    arrays = []
    for em, eg in zip(w_m2b.entries, w_global.entries):
        g64 = eg.values.astype(np.float64)
        arrays.append((2.0 * g64 - em.values.astype(np.float64)).astype(np.float32))
    return LayerMap.from_arrays(w_m2b, arrays)


# -- baselines ----------------------------------------------------------------

def baseline_badnets(global_model: LayerMap, arch: Architecture,
                     poison_train: LabeledSet, spec: TrainSpec) -> LayerMap:
    """Plain local training on the mixed poisoned split."""
    return train_local(global_model, arch, poison_train, spec)


def scale_update(local: LayerMap, global_model: LayerMap, gamma: float) -> LayerMap:
    """global + gamma * (local - global), elementwise."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    check_aligned(local, global_model)
    g64 = np.float64(gamma)
    arrays = []
    for el, eg in zip(local.entries, global_model.entries):
        g = eg.values.astype(np.float64)
        arrays.append((g + g64 * (el.values.astype(np.float64) - g)).astype(np.float32))
    return LayerMap.from_arrays(local, arrays)


def constraint_loss_train(global_model: LayerMap, arch: Architecture,
                          poison_train: LabeledSet, beta: float,
                          spec: TrainSpec,
                          start: LayerMap | None = None) -> LayerMap:
    """SGD on beta * poison loss + (1 - beta) * ||w - w_global||_2.

    Training starts from ``start`` (the anchor itself by default).  The
    regularizer's gradient is (w - w_global) / ||w - w_global|| and zero
    at the anchor.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must be in [0, 1]")
    if start is None:
        start = global_model
    if beta == 1.0:
        return train_local(start, arch, poison_train, spec)
    anchors = [e.reshaped().astype(np.float64) for e in global_model.entries]

    def hook(params, grads):
        diffs = [p.astype(np.float64) - a for p, a in zip(params, anchors)]
        norm = np.sqrt(sum(float((d * d).sum()) for d in diffs))
        out = []
        for g, d in zip(grads, diffs):
            reg = d / norm if norm > 0 else 0.0
            out.append((beta * g.astype(np.float64)
                        + (1.0 - beta) * reg).astype(np.float32))
        return out

    return train_local(start, arch, poison_train, spec, grad_hook=hook)


# -- random-layer ablation ------------------------------------------------------

def random_lp_mask(report: BCLayerReport, template: LayerMap,
                   seed: int) -> SelectionMask:
    """|L*| layers drawn uniformly from the layers outside L*."""
    pool = report.non_selected(template)
    k = len(report.selected)
    if k == 0:
        return SelectionMask.none(len(template))
    if len(pool) < k:
        raise ValueError(f"only {len(pool)} non-selected layers for a {k}-layer mask")
    rng = np.random.default_rng(seed)
    names = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
    return SelectionMask.from_names(template, names)
