"""Why trigger training gets caught and layer-wise poisoning does not.

Part 1 runs the trigger-training baseline against plain averaging and
against MultiKrum at small scale: the same attack that backdoors FedAvg
is filtered out completely by distance-based selection.

Part 2 dissects a single round at CNN scale: one malicious client crafts
both a baseline submission and a layer-wise one, and we print the Krum
score of every candidate.  The baseline update is an obvious outlier;
the crafted model, which copies the benign average everywhere except the
backdoor-critical layer (blended at lambda = 0.5), hides inside the
benign crowd.

Takes 2-3 minutes on two cores.
"""

import time

import numpy as np

from bclsim import (AttackConfig, DefenseConfig, FLConfig, PoisonSpec,
                    SyntheticSpec, TrainSpec, build_poison_splits, cnn5,
                    compute_u_average, craft_lp, generate_synthetic,
                    krum_scores, partition, run_experiment, run_lsa,
                    train_local)

# -- part 1: baseline vs two defenses ---------------------------------------

train = generate_synthetic(SyntheticSpec(
    n_samples=4000, height=12, width=12, blob_sigma=1.5, ring_radius=3.5,
    jitter=1, noise=0.1, seed=1))
test = generate_synthetic(SyntheticSpec(
    n_samples=1500, height=12, width=12, blob_sigma=1.5, ring_radius=3.5,
    jitter=1, noise=0.1, seed=2))

print("trigger-training baseline, 20 clients, 12 rounds, small MLP:")
print(f"{'defense':<11} {'acc':>6} {'best BSR':>9} {'avg BSR':>8} {'MAR':>6}")
for defense in ("fedavg", "multikrum"):
    cfg = FLConfig(
        n_clients=20, select_fraction=0.5, local_epochs=2, batch_size=32,
        rounds=12, malicious_fraction=0.1, pdr=0.5, lr=0.3, q=0.5, seed=0,
        arch_id="mlp-small",
        defense=DefenseConfig(rule=defense, f=2, m_select=7),
        attack=AttackConfig(method="badnets"))
    records, s = run_experiment(cfg, train, test)
    mar = "-" if s.mar is None else f"{s.mar:.2f}"
    print(f"{defense:<11} {s.final_acc:6.3f} {s.best_bsr:9.3f} "
          f"{s.avg_bsr:8.3f} {mar:>6}")

# -- part 2: one round of Krum forensics at CNN scale --------------------------

print("\none round at CNN scale: Krum scores of every submission")
t0 = time.time()
arch = cnn5()
global_model = arch.init_params(seed=0)
data = generate_synthetic(SyntheticSpec(n_samples=2200, seed=3))
plan = partition(data, 10, q=0.5, seed=0)
clients = [data.take(ix) for ix in plan.client_indices]
tspec = TrainSpec(epochs=2, batch_size=64, lr=0.01, seed=0)

benign_models = [train_local(global_model, arch, clients[i], tspec)
                 for i in range(1, 10)]

# the malicious client (client 0) prepares both submissions
pspec = PoisonSpec(pdr=0.5, target_label=5)
splits = build_poison_splits(clients[0], pspec, val_fraction=0.2, seed=0)
clean_train, poison_train, _, poison_val = splits

badnets_model = train_local(global_model, arch, poison_train, tspec)

report, _, _ = run_lsa(global_model, arch, clean_train, poison_train,
                       poison_val, tspec,
                       AttackConfig(method="lp", clean_epochs=8, poison_epochs=4))
shards = np.array_split(np.arange(len(clean_train)), 4)
replicas = [train_local(global_model, arch, clean_train.take(s),
                        TrainSpec(epochs=8, batch_size=64, lr=0.01, seed=i))
            for i, s in enumerate(shards)]
lp_model = craft_lp(badnets_model, compute_u_average(replicas),
                    report.mask(badnets_model), lam=0.5)

g = global_model.to_vector(np.float64)
for label, candidate in (("baseline", badnets_model), ("layer-wise", lp_model)):
    rows = np.stack([m.to_vector(np.float64) - g
                     for m in [candidate] + benign_models])
    scores = krum_scores(rows, f=2)
    order = np.argsort(scores)
    rank = int(np.where(order == 0)[0][0]) + 1
    print(f"\n{label} submission (identified L* = {report.selected}):")
    print("  candidate score: "
          f"{scores[0]:8.3f}   benign scores: "
          + " ".join(f"{s:.3f}" for s in scores[1:]))
    print(f"  rank {rank} of 10 -> "
          f"{'accepted' if rank <= 4 else 'REJECTED'} by MultiKrum (m=4)")

print(f"\n({time.time() - t0:.0f}s)")
