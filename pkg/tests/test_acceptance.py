"""Desk-scale acceptance suite.

Each test covers one numbered criterion of the DS1 benchmark (cnn5,
6,000-sample stratified training subset, full 10,000-image test set,
30 clients, 10/round, E=2, B=64, lr=0.01, R=40, 1 malicious client per
round, PDR=0.5, q=0.5, tau=0.95, lambda=0.5, identification every 5
rounds, 3 seeds) and prints one PASS/FAIL line.

Full DS1 runs are expensive (~20 min each on 2 cores); results are
cached under results/ds1/ keyed by scenario, seed and dataset, so only
the first invocation computes them.  ``python demos/run_ds1_battery.py``
populates the cache with progress output (optionally in parallel).
"""

import json

import numpy as np
import pytest

from bclsim.attacks import craft_lf, craft_lp, random_lp_mask, run_lsa
from bclsim.data import build_poison_splits
from bclsim.defenses import (DefenseConfig, agg_fedavg, agg_multikrum,
                             agg_rlr, krum_scores, pairwise_cosine_distances,
                             single_linkage_cluster)
from bclsim.federation import build_state, child_seed, run_round
from bclsim.layermap import LayerMap, SelectionMask, substitute_layers
from bclsim.models import mlp_small
from bclsim.scenarios import ds1_config, ds1_datasets, dataset_tag, run_scenario
from bclsim.train import TrainSpec

SEEDS = (0, 1, 2)


def result(criterion, ok, detail):
    print(f"[acceptance] {criterion}: {'PASS' if ok else 'FAIL'} ({detail},"
          f" dataset={dataset_tag()})")
    assert ok, f"{criterion}: {detail}"


def scenario(name, defense, attack, seed, **overrides):
    return run_scenario(f"{name}", ds1_config(defense, attack, seed, **overrides))


def final_bsr(payload):
    return payload["records"][-1]["bsr"]


def mar_of(payloads):
    return float(np.mean([p["mar"] for p in payloads]))


def avg_bsr_of(payloads):
    return float(np.mean([p["avg_bsr"] for p in payloads]))


# -- 1: BC-layer existence ---------------------------------------------------

def test_criterion_01_bc_layer_existence():
    train, test = ds1_datasets()
    hits = 0
    details = []
    for seed in SEEDS:
        cfg = ds1_config("fedavg", "lp", seed=seed)
        state = build_state(cfg, train, test)
        client = state.malicious_ids[0]
        splits = build_poison_splits(
            state.client_data[client], state.poison_spec, cfg.val_fraction,
            seed=child_seed(seed, 0x5B))
        report, _, _ = run_lsa(
            state.global_model, state.arch, splits[0], splits[1], splits[3],
            cfg.train_spec(seed), cfg.attack, clean_val=splits[2])
        top_drop = report.ranking[0][1]
        weight_layers = sum(1 for e in state.global_model.entries
                            if e.kind == "weight")
        ok = (top_drop >= 0.5
              and report.bsr_m2b >= report.tau * report.bsr_malicious
              and len(report.selected) <= weight_layers / 2)
        hits += ok
        details.append(f"seed{seed}: drop={top_drop:.2f} L*={report.selected}")
    result("criterion-01 bc-layer-existence", hits >= 2,
           f"{hits}/3 seeds ok; " + "; ".join(details))


# -- 2: FedAvg + BadNets --------------------------------------------------------

def test_criterion_02_fedavg_badnets():
    ok = True
    details = []
    for seed in SEEDS:
        p = scenario("badnets_fedavg", "fedavg", "badnets", seed)
        details.append(f"seed{seed}: best={p['best_bsr']:.3f}")
        ok &= p["best_bsr"] >= 0.90
    result("criterion-02 fedavg-badnets", ok, "; ".join(details))


# -- 3: MultiKrum filters baseline, LP bypasses -----------------------------------

def test_criterion_03_multikrum_gap():
    base = [scenario("badnets_multikrum", "multikrum", "badnets", s) for s in SEEDS]
    lp = [scenario("lp_multikrum", "multikrum", "lp", s) for s in SEEDS]
    detail = (f"baseline MAR={mar_of(base):.3f} avgBSR={avg_bsr_of(base):.3f}; "
              f"LP MAR={mar_of(lp):.3f} avgBSR={avg_bsr_of(lp):.3f}")
    ok = (mar_of(base) <= 0.10 and mar_of(lp) >= 0.50
          and avg_bsr_of(lp) >= 0.40 and avg_bsr_of(base) <= 0.10)
    result("criterion-03 multikrum-gap", ok, detail)


# -- 4: FLAME filters baseline, LP bypasses ----------------------------------------

def test_criterion_04_flame_gap():
    base = [scenario("badnets_flame", "flame", "badnets", s) for s in SEEDS]
    lp = [scenario("lp_flame", "flame", "lp", s) for s in SEEDS]
    detail = (f"baseline MAR={mar_of(base):.3f}; LP MAR={mar_of(lp):.3f} "
              f"avgBSR={avg_bsr_of(lp):.3f}")
    ok = (mar_of(base) <= 0.10 and mar_of(lp) >= 0.80
          and avg_bsr_of(lp) >= 0.40)
    result("criterion-04 flame-gap", ok, detail)


# -- 5: RLR ---------------------------------------------------------------------------

def test_criterion_05_rlr():
    # flip fraction of a benign-only round in the converged regime (the
    # sign-consensus claim concerns trained CNNs, not the first step from
    # a fresh initialization, where gradients still strongly agree)
    benign = scenario("benign_rlr", "rlr", None, 0, rounds=12)
    flipped = benign["records"][-1]["flipped_fraction"]

    lf = [scenario("lf_rlr", "rlr", "lf", s) for s in SEEDS]
    lp = [scenario("lp_rlr", "rlr", "lp", s) for s in SEEDS]
    detail = (f"benign flipped={flipped:.3f}; LF avgBSR={avg_bsr_of(lf):.3f}; "
              f"LP avgBSR={avg_bsr_of(lp):.3f}")
    ok = (flipped > 0.5 and avg_bsr_of(lf) >= 0.35 and avg_bsr_of(lp) <= 0.05)
    result("criterion-05 rlr", ok, detail)


# -- 6: random-LP ablation ---------------------------------------------------------------

def test_criterion_06_random_lp_ablation():
    lp = [scenario("lp_flame", "flame", "lp", s) for s in SEEDS]
    rand = [scenario("randomlp_flame", "flame", "random_lp", s) for s in SEEDS]
    detail = f"random avgBSR={avg_bsr_of(rand):.3f} vs LP {avg_bsr_of(lp):.3f}"
    ok = avg_bsr_of(rand) <= 0.5 * avg_bsr_of(lp)
    result("criterion-06 random-lp-ablation", ok, detail)


# -- 7: oracle equivalence -----------------------------------------------------------------

def krum_bruteforce(vectors, f):
    n = len(vectors)
    scores = []
    for i in range(n):
        d = sorted(float(np.sum((vectors[i] - vectors[j]) ** 2))
                   for j in range(n) if j != i)
        scores.append(sum(d[: n - f - 2]))
    return np.array(scores)


def test_criterion_07_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(5, 11))
        dim = int(rng.integers(1, 51))
        f = int(rng.integers(0, max(1, n - 4)))
        vecs = rng.normal(scale=rng.uniform(0.05, 20), size=(n, dim))
        ours = krum_scores(vecs, f)
        oracle = krum_bruteforce(vecs, f)
        rel = np.max(np.abs(ours - oracle) / np.maximum(np.abs(oracle), 1e-30))
        worst = max(worst, float(rel))
    krum_ok = worst < 1e-9

    from scipy.cluster.hierarchy import fcluster, linkage
    from scipy.spatial.distance import squareform
    flame_ok = True
    for trial in range(20):
        vecs = rng.normal(size=(10, 8))
        dist = pairwise_cosine_distances(vecs)
        ours = set(single_linkage_cluster(dist, 6))
        z = linkage(squareform(dist, checks=False), method="single")
        oracle = None
        for h in sorted(set(z[:, 2])):
            labels = fcluster(z, t=h, criterion="distance")
            counts = np.bincount(labels)
            big = np.flatnonzero(counts >= 6)
            if len(big):
                oracle = set(np.flatnonzero(labels == big[0]).tolist())
                break
        flame_ok &= ours == oracle
    result("criterion-07 oracle-equivalence",
           krum_ok and flame_ok,
           f"krum rel err={worst:.2e}; flame 20/20={'ok' if flame_ok else 'mismatch'}")


# -- 8: exact algebraic properties ------------------------------------------------------------

def test_criterion_08_algebraic_properties():
    arch = mlp_small((4,), hidden=5, num_classes=3)
    template = arch.init_params(0)
    dim = template.num_params()
    rng = np.random.default_rng(8)

    def vec_model(v):
        return LayerMap.from_vector(template, np.asarray(v, dtype=np.float32))

    # craft_lf involution, bit-exact: about zero (IEEE negation) and on a
    # shared power-of-two lattice (the reflection stays on the lattice)
    zero = vec_model(np.zeros(dim))
    x = vec_model(rng.normal(scale=3.0, size=dim))
    inv_zero = craft_lf(craft_lf(x, zero), zero)
    lf_ok = all(a.values.tobytes() == b.values.tobytes()
                for a, b in zip(inv_zero.entries, x.entries))
    scale = np.float32(2.0 ** -10)
    g = vec_model(rng.integers(-2000, 2000, size=dim).astype(np.float32) * scale)
    xl = vec_model(rng.integers(-2000, 2000, size=dim).astype(np.float32) * scale)
    inv_grid = craft_lf(craft_lf(xl, g), g)
    lf_ok &= all(a.values.tobytes() == b.values.tobytes()
                 for a, b in zip(inv_grid.entries, xl.entries))

    # craft_lp: mask-false layers equal u_average exactly
    mal, avg = arch.init_params(1), arch.init_params(2)
    mask = SelectionMask.from_names(mal, ["fc1.weight"])
    crafted = craft_lp(mal, avg, mask, 0.37)
    lp_ok = all(np.array_equal(crafted.entries[j].values, avg.entries[j].values)
                for j in range(len(mask.flags)) if not mask.flags[j])

    # substitute_layers identities
    base, donor = arch.init_params(3), arch.init_params(4)
    sub_ok = (substitute_layers(base, donor, SelectionMask.none(len(base))) == base
              and substitute_layers(base, donor, SelectionMask.all(len(base))) == donor
              and substitute_layers(base, base, mask) == base)

    # agg_rlr(theta=0) == FedAvg(eta)
    models = [(i, vec_model(rng.normal(size=dim))) for i in range(5)]
    rlr = agg_rlr(zero, models, DefenseConfig(rule="rlr", theta=0, server_lr=1.0))
    fed = agg_fedavg(zero, models)
    rlr_ok = np.array_equal(rlr.next_global.to_vector(),
                            fed.next_global.to_vector())

    # agg_multikrum(m_select=n) == FedAvg
    mk = agg_multikrum(zero, models,
                       DefenseConfig(rule="multikrum", f=1, m_select=5))
    mk_ok = np.array_equal(mk.next_global.to_vector(),
                           fed.next_global.to_vector())

    ok = lf_ok and lp_ok and sub_ok and rlr_ok and mk_ok
    result("criterion-08 exact-algebra", ok,
           f"lf={lf_ok} lp={lp_ok} sub={sub_ok} rlr0={rlr_ok} mk_all={mk_ok}")


# -- 9: gradient suite ---------------------------------------------------------------------------

def test_criterion_09_gradient_suite():
    from test_models_grad import check_grads, tiny_cnn
    from bclsim.models import cnn5
    worst_small = check_grads(tiny_cnn(), seed=11)
    worst_mlp = check_grads(mlp_small((6,), hidden=5, num_classes=3), seed=12)
    worst_cnn5 = check_grads(cnn5(), seed=13, max_per_entry=8)
    worst = max(worst_small, worst_mlp, worst_cnn5)
    result("criterion-09 gradient-suite", worst < 1e-3,
           f"worst rel err={worst:.2e}")


# -- 10: robustness to dropped BC layers ------------------------------------------------------------

def test_criterion_10_drop_robustness():
    full = [scenario("lp_fedavg", "fedavg", "lp", s) for s in SEEDS]
    dropped = [scenario("lp_fedavg_drop60", "fedavg", "lp", s,
                        attack_overrides={"drop_ratio": 0.6}) for s in SEEDS]
    f_mean = float(np.mean([final_bsr(p) for p in full]))
    d_mean = float(np.mean([final_bsr(p) for p in dropped]))
    detail = f"final BSR full={f_mean:.3f} dropped60%={d_mean:.3f}"
    result("criterion-10 drop-robustness", d_mean >= 0.5 * f_mean, detail)


# -- auxiliary paper-level checks (not numbered criteria) ---------------------------------------------

def test_aux_layerwise_multikrum_lp():
    lp = [scenario("lp_layerwise", "layerwise_multikrum", "lp", s) for s in SEEDS]
    best = float(np.mean([p["best_bsr"] for p in lp]))
    result("aux layerwise-multikrum-lp", best >= 0.3,
           f"mean best BSR={best:.3f}")


def test_aux_constraint_loss_filtered_by_multikrum():
    p = scenario("constraint_multikrum_short", "multikrum", "constraint", 0,
                 rounds=8, attack_overrides={"beta": 0.001})
    result("aux constraint-loss-vs-multikrum", p["mar"] <= 0.15,
           f"MAR={p['mar']:.3f} over {len(p['records'])} rounds")


def test_aux_identification_interval_trend():
    every = [scenario("lp_fedavg_int1", "fedavg", "lp", s,
                      attack_overrides={"interval": 1}) for s in SEEDS]
    sparse = [scenario("lp_fedavg_int10", "fedavg", "lp", s,
                       attack_overrides={"interval": 10}) for s in SEEDS]
    a, b = avg_bsr_of(every), avg_bsr_of(sparse)
    result("aux identification-interval-trend", a >= b - 0.05,
           f"avgBSR interval1={a:.3f} vs interval10={b:.3f}")
