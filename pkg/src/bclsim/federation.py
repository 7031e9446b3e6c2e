"""Federated round loop with malicious-client scheduling and metrics.

Runs the client-selection / local-training / aggregation cycle against a
configured defense, with fixed-frequency malicious participation: every
round the same number of attacker-controlled clients appears, rotating
through the malicious pool.  Per-round accuracy and backdoor success are
measured server-side on a clean test split and a fully triggered,
relabeled copy (samples already carrying the target label excluded).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import (AttackConfig, BCLayerReport, LsaAbort, adaptive_layer_control,
                      baseline_badnets, compute_u_average, constraint_loss_train,
                      craft_lf, craft_lp, random_lp_mask, run_lsa,
                      lsa_step1_train_pair, scale_update)
from .data import (LabeledSet, PoisonSpec, build_poison_splits, dba_subtrigger,
                   partition, poison_testset)
from .defenses import AggregationVerdict, DefenseConfig, aggregate
from .layermap import LayerMap, SelectionMask, substitute_layers
from .models import Architecture, get_architecture
from .train import TrainSpec, evaluate, train_local

__all__ = ["FLConfig", "RoundRecord", "ExperimentSummary", "ExperimentState",
           "select_clients", "run_round", "run_experiment", "compute_metrics",
           "child_seed"]

FILTERING_DEFENSES = ("multikrum", "flame", "layerwise_multikrum")


@dataclass(frozen=True)
class FLConfig:
    n_clients: int = 100
    select_fraction: float = 0.1        # C
    local_epochs: int = 2               # E
    batch_size: int = 64                # B
    rounds: int = 200                   # R
    malicious_fraction: float = 0.1     # M/N
    pdr: float = 0.5
    lr: float = 0.01
    q: float = 0.5
    seed: int = 0
    arch_id: str = "cnn5"
    val_fraction: float = 0.2
    warmup_fraction: float = 0.2
    target_label: int = 5
    trigger_value: float = 1.0
    trigger_block: tuple = (5, 5)
    trigger_anchor: object = "bottom-right"
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    attack: AttackConfig | None = None

    def __post_init__(self):
        if not 0 < self.select_fraction <= 1:
            raise ValueError("select fraction must be in (0, 1]")
        if not 0 <= self.malicious_fraction < 0.5:
            raise ValueError("malicious fraction must be below 50%")
        if self.rounds < 1:
            raise ValueError("need at least one round")
        object.__setattr__(self, "trigger_block",
                           tuple(int(v) for v in self.trigger_block))
        if not isinstance(self.trigger_anchor, str):
            object.__setattr__(self, "trigger_anchor",
                               tuple(int(v) for v in self.trigger_anchor))

    @property
    def n_selected(self) -> int:
        return max(1, round(self.n_clients * self.select_fraction))

    @property
    def n_malicious_per_round(self) -> int:
        return round(self.malicious_fraction * self.select_fraction * self.n_clients)

    @property
    def n_malicious_total(self) -> int:
        return round(self.malicious_fraction * self.n_clients)

    def train_spec(self, seed: int) -> TrainSpec:
        return TrainSpec(self.local_epochs, self.batch_size, self.lr, seed)

    def poison_spec(self) -> PoisonSpec:
        bh, bw = self.trigger_block
        offsets = frozenset((r, c) for r in range(bh) for c in range(bw))
        anchor = self.trigger_anchor
        if isinstance(anchor, (list, tuple)):
            anchor = (int(anchor[0]), int(anchor[1]))
        return PoisonSpec(offsets=offsets, block=(bh, bw), anchor=anchor,
                          value=self.trigger_value, target_label=self.target_label,
                          pdr=self.pdr)


@dataclass
class RoundRecord:
    round_index: int
    selected: list
    malicious_selected: list
    accepted: list
    rejected: list
    acc: float
    bsr: float
    diagnostics: dict = field(default_factory=dict)
    bc_report_round: int | None = None
    fallbacks: list = field(default_factory=list)

    @property
    def n_accepted_benign(self) -> int:
        mal = set(self.malicious_selected)
        return sum(1 for c in self.accepted if c not in mal)

    @property
    def n_accepted_malicious(self) -> int:
        mal = set(self.malicious_selected)
        return sum(1 for c in self.accepted if c in mal)


@dataclass
class ExperimentSummary:
    best_bsr: float
    avg_bsr: float
    final_acc: float
    bar: float
    mar: float | None   # None when no malicious upload happened
    wall_time: float
    rounds: int
    warmup: int


def child_seed(*key) -> int:
    """Deterministic child seed from a structured key (master, round, client...)."""
    return int(np.random.SeedSequence(tuple(int(k) for k in key)).generate_state(1)[0])


@dataclass
class ExperimentState:
    cfg: FLConfig
    arch: Architecture
    global_model: LayerMap
    client_data: list
    malicious_ids: list
    poison_spec: PoisonSpec
    test_clean: LabeledSet
    test_bsr: LabeledSet
    root_data: LabeledSet | None = None
    round_index: int = 0
    last_reports: dict = field(default_factory=dict)   # client -> BCLayerReport
    eval_scratch: dict = field(default_factory=dict)


def select_clients(cfg: FLConfig, round_index: int, malicious_ids: list):
    """Fixed-frequency selection: the malicious quota rotates through the
    malicious pool, benign slots are drawn uniformly without replacement."""
    n_mal = cfg.n_malicious_per_round if malicious_ids else 0
    if n_mal > len(malicious_ids) and malicious_ids:
        raise ValueError(
            f"round quota of {n_mal} malicious clients exceeds pool of "
            f"{len(malicious_ids)}")
    mal = [malicious_ids[(round_index * n_mal + i) % len(malicious_ids)]
           for i in range(n_mal)] if n_mal else []
    benign_pool = [c for c in range(cfg.n_clients) if c not in set(malicious_ids)]
    rng = np.random.default_rng(child_seed(cfg.seed, round_index, 0x5E1))
    n_benign = cfg.n_selected - n_mal
    benign = rng.choice(len(benign_pool), size=n_benign, replace=False)
    selected = sorted([benign_pool[i] for i in benign] + mal)
    return selected, mal


def _lp_family_update(state: ExperimentState, cfg: FLConfig, client: int,
                      seed: int, splits, record: RoundRecord):
    """LSA-driven attacks: lp, random_lp, lf."""
    atk = cfg.attack
    arch = state.arch
    clean_train, poison_train, clean_val, poison_val = splits
    tspec = cfg.train_spec(seed)
    last = state.last_reports.get(client)
    due = last is None or (state.round_index - last.round_index) >= atk.interval
    if due:
        report, w_benign, w_malicious = run_lsa(
            state.global_model, arch, clean_train, poison_train, poison_val,
            tspec, atk, clean_val=clean_val, round_index=state.round_index)
        state.last_reports[client] = report
    else:
        report = last
        w_benign = w_malicious = None
    record.bc_report_round = report.round_index

    if atk.method == "lf":
        if w_benign is None:  # identification reused: retrain the pair
            w_benign, w_malicious = lsa_step1_train_pair(
                state.global_model, arch, clean_train, poison_train, tspec,
                atk, clean_val=clean_val, poison_val=poison_val)
        m2b = substitute_layers(w_benign, w_malicious, report.mask(w_malicious))
        return craft_lf(m2b, state.global_model)

    # crafting models carry the round's normal training budget so the
    # submission scale matches the benign crowd (identification, above,
    # is what trains to convergence)
    u_mal = train_local(state.global_model, arch, poison_train,
                        replace(tspec, seed=child_seed(seed, 0xC7)))

    # collusion pool: benign bootstrap replicas on disjoint clean shards,
    # with epochs scaled so the SGD step count matches a full-size client
    k = max(2, atk.collusion_replicas)
    rng = np.random.default_rng(child_seed(seed, 0xC0))
    order = rng.permutation(len(clean_train))
    shards = np.array_split(order, k)
    target_steps = cfg.local_epochs * max(1, -(-len(clean_train) // cfg.batch_size))
    replicas = []
    for i, shard in enumerate(shards):
        if not len(shard):
            continue
        steps_per_epoch = max(1, -(-len(shard) // cfg.batch_size))
        rep_epochs = max(1, round(target_steps / steps_per_epoch))
        replicas.append(train_local(
            state.global_model, arch, clean_train.take(shard),
            replace(tspec, epochs=rep_epochs, seed=child_seed(seed, 0xC1, i))))
    u_avg = compute_u_average(replicas)

    work_report = report
    if atk.method == "random_lp":
        rand_mask = random_lp_mask(report, u_mal, child_seed(seed, 0xAB))
        work_report = replace_selected(report, rand_mask.selected_names(u_mal))
    else:
        selected = list(report.selected)
        if atk.drop_ratio > 0 and selected:
            n_drop = int(atk.drop_ratio * len(selected))
            if n_drop:
                drop_rng = np.random.default_rng(child_seed(seed, 0xD0))
                dropped = set(drop_rng.choice(len(selected), size=n_drop,
                                              replace=False).tolist())
                selected = [n for i, n in enumerate(selected) if i not in dropped]
        if atk.add_ratio > 0 and report.selected:
            pool = [n for n in u_mal.names if n not in set(selected)
                    and n not in set(report.selected)]
            n_add = min(len(pool), round(atk.add_ratio * len(report.selected)))
            if n_add:
                add_rng = np.random.default_rng(child_seed(seed, 0xD1))
                extra = [pool[i] for i in add_rng.choice(len(pool), size=n_add,
                                                         replace=False)]
                selected = selected + extra
        if selected != list(report.selected):
            work_report = replace_selected(report, selected)

    def craft(mask: SelectionMask) -> LayerMap:
        return craft_lp(u_mal, u_avg, mask, atk.lam)

    if atk.adaptive_control and len(replicas) >= 2:
        presumed = (cfg.defense.rule if cfg.defense.rule in FILTERING_DEFENSES
                    else atk.presumed_defense)
        mask, sim_ok = adaptive_layer_control(
            work_report, craft, replicas, presumed, cfg.defense,
            state.global_model, u_mal)
        record.diagnostics.setdefault("adaptive", {})[client] = {
            "layers": mask.count(), "simulated_accept": sim_ok}
    else:
        mask = work_report.mask(u_mal)
    return craft(mask)


def replace_selected(report: BCLayerReport, names: list) -> BCLayerReport:
    return BCLayerReport(report.ranking, list(names), report.tau,
                         report.bsr_malicious, report.bsr_m2b,
                         report.round_index, report.exhausted)


def _malicious_update(state: ExperimentState, cfg: FLConfig, client: int,
                      record: RoundRecord) -> LayerMap:
    atk = cfg.attack
    seed = child_seed(cfg.seed, state.round_index, client)
    pspec = state.poison_spec
    if atk.method == "dba":
        shard = 1 + state.malicious_ids.index(client) % 4
        pspec = dba_subtrigger(pspec, shard)
    splits = build_poison_splits(state.client_data[client], pspec,
                                 cfg.val_fraction, seed=child_seed(seed, 0x5B))
    tspec = cfg.train_spec(seed)
    if atk.method in ("badnets", "dba"):
        return baseline_badnets(state.global_model, state.arch, splits[1], tspec)
    if atk.method == "scaled_badnets":
        local = baseline_badnets(state.global_model, state.arch, splits[1], tspec)
        return scale_update(local, state.global_model, atk.gamma)
    if atk.method == "constraint":
        return constraint_loss_train(state.global_model, state.arch, splits[1],
                                     atk.beta, tspec)
    return _lp_family_update(state, cfg, client, seed, splits, record)


def run_round(state: ExperimentState, cfg: FLConfig):
    """One federated round; mutates ``state`` and returns the RoundRecord."""
    r = state.round_index
    selected, malicious_selected = select_clients(
        cfg, r, state.malicious_ids if cfg.attack else [])
    record = RoundRecord(r, selected, malicious_selected, [], [], 0.0, 0.0)
    updates = []
    sizes = []
    for client in selected:
        data = state.client_data[client]
        sizes.append(len(data))
        if client in malicious_selected:
            try:
                model = _malicious_update(state, cfg, client, record)
            except LsaAbort:
                model = train_local(state.global_model, state.arch, data,
                                    cfg.train_spec(child_seed(cfg.seed, r, client)))
                record.fallbacks.append(client)
        else:
            model = train_local(state.global_model, state.arch, data,
                                cfg.train_spec(child_seed(cfg.seed, r, client)))
        updates.append((client, model))

    weights = np.asarray(sizes, dtype=np.float64)
    weights /= weights.sum()
    verdict = aggregate(
        cfg.defense.rule, state.global_model, updates, cfg.defense,
        weights=weights, root_data=state.root_data, arch=state.arch,
        train_spec=cfg.train_spec(child_seed(cfg.seed, r, 0xF17)),
        rng=np.random.default_rng(child_seed(cfg.seed, r, 0xF1A)))

    state.global_model = verdict.next_global
    record.accepted = list(verdict.accepted)
    record.rejected = list(verdict.rejected)
    record.diagnostics.update(verdict.diagnostics)
    record.acc = evaluate(state.global_model, state.arch, state.test_clean,
                          scratch=state.eval_scratch)
    record.bsr = evaluate(state.global_model, state.arch, state.test_bsr,
                          scratch=state.eval_scratch)
    state.round_index += 1
    return state, record


def build_state(cfg: FLConfig, train_data: LabeledSet,
                test_data: LabeledSet) -> ExperimentState:
    """Materialize the experiment: init model, partition, build test oracles."""
    arch = get_architecture(cfg.arch_id, num_classes=train_data.num_classes) \
        if cfg.arch_id == "cnn5" else get_architecture(
            cfg.arch_id, input_shape=train_data.image_shape,
            num_classes=train_data.num_classes)
    global_model = arch.init_params(cfg.seed)
    pspec = cfg.poison_spec()

    root_data = None
    pool = train_data
    if cfg.defense.rule == "fltrust":
        rng = np.random.default_rng(child_seed(cfg.seed, 0x1007))
        idx = rng.choice(len(train_data), size=cfg.defense.root_size, replace=False)
        mask = np.ones(len(train_data), dtype=bool)
        mask[idx] = False
        root_data = train_data.take(idx)
        pool = train_data.take(np.flatnonzero(mask))

    plan = partition(pool, cfg.n_clients, cfg.q, child_seed(cfg.seed, 0xDA7A))
    client_data = [pool.take(ix) for ix in plan.client_indices]
    malicious_ids = list(range(cfg.n_malicious_total)) if cfg.attack else []
    return ExperimentState(
        cfg=cfg, arch=arch, global_model=global_model, client_data=client_data,
        malicious_ids=malicious_ids, poison_spec=pspec, test_clean=test_data,
        test_bsr=poison_testset(test_data, pspec), root_data=root_data)


def compute_metrics(records: list, warmup: int) -> ExperimentSummary:
    """Best/average BSR, final accuracy, and the acceptance rates."""
    if not records:
        raise ValueError("no round records")
    if warmup >= len(records):
        raise ValueError(f"warmup {warmup} >= {len(records)} rounds")
    best = max(r.bsr for r in records)
    avg = float(np.mean([r.bsr for r in records[warmup:]]))
    bar_num = sum(r.n_accepted_benign for r in records)
    bar_den = sum(len(r.selected) - len(r.malicious_selected) for r in records)
    mar_num = sum(r.n_accepted_malicious for r in records)
    mar_den = sum(len(r.malicious_selected) for r in records)
    return ExperimentSummary(
        best_bsr=best, avg_bsr=avg, final_acc=records[-1].acc,
        bar=bar_num / bar_den if bar_den else 1.0,
        mar=(mar_num / mar_den) if mar_den else None,
        wall_time=0.0, rounds=len(records), warmup=warmup)


def run_experiment(cfg: FLConfig, train_data: LabeledSet, test_data: LabeledSet,
                   *, progress=None):
    """Full experiment; returns (records, summary)."""
    t0 = time.monotonic()
    state = build_state(cfg, train_data, test_data)
    records = []
    for _ in range(cfg.rounds):
        state, record = run_round(state, cfg)
        records.append(record)
        if progress is not None:
            progress(record)
    warmup = int(cfg.warmup_fraction * cfg.rounds)
    summary = compute_metrics(records, warmup)
    summary.wall_time = time.monotonic() - t0
    return records, summary
