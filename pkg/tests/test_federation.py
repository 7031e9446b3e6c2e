import numpy as np
import pytest

from bclsim.attacks import AttackConfig
from bclsim.data import SyntheticSpec, generate_synthetic
from bclsim.defenses import DefenseConfig
from bclsim.federation import (ExperimentSummary, FLConfig, RoundRecord,
                               build_state, child_seed, compute_metrics,
                               run_experiment, run_round, select_clients)

TRAIN = generate_synthetic(SyntheticSpec(n_samples=1500, seed=1))
TEST = generate_synthetic(SyntheticSpec(n_samples=400, seed=2))


def small_cfg(**kw):
    base = dict(n_clients=10, select_fraction=0.5, local_epochs=1,
                batch_size=32, rounds=2, malicious_fraction=0.2, pdr=0.5,
                lr=0.1, q=0.5, seed=0, arch_id="mlp-small",
                defense=DefenseConfig(rule="fedavg"),
                attack=AttackConfig(method="badnets"))
    base.update(kw)
    return FLConfig(**base)


def test_config_invariants():
    with pytest.raises(ValueError):
        small_cfg(select_fraction=0.0)
    with pytest.raises(ValueError):
        small_cfg(malicious_fraction=0.5)
    with pytest.raises(ValueError):
        small_cfg(rounds=0)


def test_select_counts_paper_setting():
    cfg = FLConfig(n_clients=100, select_fraction=0.1, malicious_fraction=0.1,
                   defense=DefenseConfig(), attack=AttackConfig(method="badnets"))
    malicious = list(range(10))
    selected, mal = select_clients(cfg, 0, malicious)
    assert len(selected) == 10
    assert len(mal) == 1
    assert set(mal) <= set(selected)


def test_select_no_malicious():
    cfg = small_cfg(attack=None)
    selected, mal = select_clients(cfg, 3, [])
    assert mal == []
    assert len(selected) == cfg.n_selected


def test_malicious_rotation_counts():
    cfg = FLConfig(n_clients=30, select_fraction=1 / 3, malicious_fraction=0.1,
                   defense=DefenseConfig(), attack=AttackConfig(method="badnets"))
    malicious = [0, 1, 2]
    counts = {m: 0 for m in malicious}
    for r in range(99):
        _, mal = select_clients(cfg, r, malicious)
        assert len(mal) == 1
        counts[mal[0]] += 1
    assert all(abs(c - 33) <= 1 for c in counts.values())


def test_selection_is_deterministic_per_round():
    cfg = small_cfg()
    a = select_clients(cfg, 5, [0, 1])
    b = select_clients(cfg, 5, [0, 1])
    assert a == b
    c = select_clients(cfg, 6, [0, 1])
    assert a != c


def test_round_conservation_and_partition():
    cfg = small_cfg(defense=DefenseConfig(rule="multikrum", f=1, m_select=3))
    state = build_state(cfg, TRAIN, TEST)
    state, rec = run_round(state, cfg)
    assert sorted(rec.accepted + rec.rejected) == sorted(rec.selected)
    assert len(rec.selected) == cfg.n_selected
    assert 0.0 <= rec.acc <= 1.0 and 0.0 <= rec.bsr <= 1.0


def test_architecture_stable_across_rounds():
    cfg = small_cfg(rounds=3)
    state = build_state(cfg, TRAIN, TEST)
    names = state.global_model.names
    for _ in range(3):
        state, _ = run_round(state, cfg)
        assert state.global_model.names == names


def test_replay_determinism():
    cfg = small_cfg(rounds=3, defense=DefenseConfig(rule="flame"),
                    attack=AttackConfig(method="lp", clean_epochs=3,
                                        poison_epochs=2, interval=2))
    rec1, sum1 = run_experiment(cfg, TRAIN, TEST)
    rec2, sum2 = run_experiment(cfg, TRAIN, TEST)
    for a, b in zip(rec1, rec2):
        assert a.acc == b.acc and a.bsr == b.bsr
        assert a.accepted == b.accepted and a.selected == b.selected
    assert sum1.best_bsr == sum2.best_bsr and sum1.mar == sum2.mar


def test_no_attack_bsr_stays_near_prior():
    cfg = small_cfg(rounds=4, attack=None, local_epochs=2)
    records, summary = run_experiment(cfg, TRAIN, TEST)
    assert summary.mar is None
    for r in records:
        assert r.bsr < 1.5 * 0.1 + 0.05  # class prior with small-sample slack


def test_benign_fedavg_bar_is_one():
    cfg = small_cfg(rounds=1, attack=None)
    records, summary = run_experiment(cfg, TRAIN, TEST)
    assert summary.bar == 1.0


def test_compute_metrics_basics():
    def rec(i, bsr, accepted, malicious):
        return RoundRecord(i, [0, 1], malicious, accepted, [], 0.9, bsr)

    records = [rec(0, 1.0, [0, 1], [1]), rec(1, 1.0, [0], [1])]
    s = compute_metrics(records, warmup=0)
    assert s.best_bsr == 1.0 and s.avg_bsr == 1.0
    assert s.bar == 1.0           # benign client 0 accepted twice
    assert s.mar == 0.5           # malicious client 1 accepted once of twice
    with pytest.raises(ValueError):
        compute_metrics(records, warmup=2)


def test_compute_metrics_no_malicious_mar_na():
    records = [RoundRecord(0, [0, 1], [], [0, 1], [], 0.5, 0.0)]
    s = compute_metrics(records, warmup=0)
    assert s.mar is None
    assert s.best_bsr == 0.0


def test_lsa_fallback_records_flag():
    # poison val so small / model so weak that LSA may abort: force it by
    # zero-size interplay is hard; instead check the pipeline handles a
    # degenerate poisoned split gracefully over a full round
    cfg = small_cfg(rounds=1,
                    attack=AttackConfig(method="lp", clean_epochs=2,
                                        poison_epochs=1))
    state = build_state(cfg, TRAIN, TEST)
    state, rec = run_round(state, cfg)  # must not raise
    assert isinstance(rec.fallbacks, list)


def test_lp_drop_and_add_ratio_masks():
    # robustness knobs: drop removes part of L*, add appends non-BC layers
    cfg = small_cfg(rounds=1, defense=DefenseConfig(rule="fedavg"),
                    attack=AttackConfig(method="lp", clean_epochs=2,
                                        poison_epochs=2, drop_ratio=0.5,
                                        add_ratio=1.0, adaptive_control=False))
    state = build_state(cfg, TRAIN, TEST)
    state, rec = run_round(state, cfg)  # exercises the mask rewrite paths
    assert rec.bc_report_round is not None


def test_child_seed_stable():
    assert child_seed(1, 2, 3) == child_seed(1, 2, 3)
    assert child_seed(1, 2, 3) != child_seed(1, 3, 2)


def test_fltrust_round_runs():
    cfg = small_cfg(rounds=1, defense=DefenseConfig(rule="fltrust", root_size=50))
    records, summary = run_experiment(cfg, TRAIN, TEST)
    assert len(records) == 1
    assert records[0].diagnostics.get("trust") is not None


def test_rlr_round_diagnostics():
    cfg = small_cfg(rounds=1, defense=DefenseConfig(rule="rlr", theta=4))
    records, _ = run_experiment(cfg, TRAIN, TEST)
    assert "flipped_fraction" in records[0].diagnostics
    assert records[0].rejected == []


def test_layerwise_multikrum_round_runs():
    cfg = small_cfg(rounds=1, defense=DefenseConfig(rule="layerwise_multikrum",
                                                    f=1, m_select=3))
    records, _ = run_experiment(cfg, TRAIN, TEST)
    assert "per_layer_accepted" in records[0].diagnostics
