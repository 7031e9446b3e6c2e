"""Populate the DS1 result cache used by the acceptance suite.

Runs every desk-scale scenario x seed combination and stores the outcome
under results/ds1/.  Each run takes ~20 minutes on two CPU cores, and
there are 39 of them, so use --workers 2 and let it cook:

    python demos/run_ds1_battery.py --workers 2

Scenarios already present in the cache are skipped, so the script is
safe to re-run after an interruption.  --only filters by substring.
"""

import argparse
import json
import os
import subprocess
import sys
import time
from pathlib import Path

SEEDS = (0, 1, 2)

# name -> (defense, attack, attack_overrides, config_overrides)
SCENARIOS = {
    "lp_multikrum": ("multikrum", "lp", {}, {}),
    "badnets_multikrum": ("multikrum", "badnets", {}, {}),
    "lp_flame": ("flame", "lp", {}, {}),
    "badnets_flame": ("flame", "badnets", {}, {}),
    "badnets_fedavg": ("fedavg", "badnets", {}, {}),
    "lf_rlr": ("rlr", "lf", {}, {}),
    "lp_rlr": ("rlr", "lp", {}, {}),
    "randomlp_flame": ("flame", "random_lp", {}, {}),
    "lp_fedavg": ("fedavg", "lp", {}, {}),
    "lp_fedavg_drop60": ("fedavg", "lp", {"drop_ratio": 0.6}, {}),
    "lp_layerwise": ("layerwise_multikrum", "lp", {}, {}),
    "lp_fedavg_int1": ("fedavg", "lp", {"interval": 1}, {}),
    "lp_fedavg_int10": ("fedavg", "lp", {"interval": 10}, {}),
    "constraint_multikrum_short": ("multikrum", "constraint", {"beta": 0.001},
                                   {"rounds": 8}),
    "benign_rlr": ("rlr", None, {}, {"rounds": 12}),
}


def run_one(name: str, seed: int) -> dict:
    from bclsim.scenarios import ds1_config, run_scenario

    defense, attack, atk_over, cfg_over = SCENARIOS[name]
    cfg = ds1_config(defense, attack, seed=seed,
                     attack_overrides=dict(atk_over), **cfg_over)
    t0 = time.time()

    def progress(rec):
        print(f"  {name} seed{seed} r{rec.round_index:02d} "
              f"acc={rec.acc:.3f} bsr={rec.bsr:.3f} "
              f"mal={rec.n_accepted_malicious}/{len(rec.malicious_selected)}",
              flush=True)

    payload = run_scenario(name, cfg, progress=progress)
    print(f"== {name} seed{seed}: best={payload['best_bsr']:.3f} "
          f"avg={payload['avg_bsr']:.3f} acc={payload['final_acc']:.3f} "
          f"mar={payload['mar']} ({time.time() - t0:.0f}s)", flush=True)
    return payload


def pending_jobs(only: str | None):
    from bclsim.scenarios import DEFAULT_CACHE, dataset_tag

    tag = dataset_tag()
    jobs = []
    for name in SCENARIOS:
        if only and only not in name:
            continue
        for seed in SEEDS:
            if not (DEFAULT_CACHE / f"{name}_seed{seed}_{tag}.json").exists():
                jobs.append((name, seed))
    return jobs


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--only")
    ap.add_argument("--job", help="internal: run one '<name>:<seed>' job")
    args = ap.parse_args()

    if args.job:
        name, seed = args.job.rsplit(":", 1)
        run_one(name, int(seed))
        return 0

    jobs = pending_jobs(args.only)
    print(f"{len(jobs)} runs pending")
    if args.workers <= 1:
        for name, seed in jobs:
            run_one(name, seed)
        return 0

    env = dict(os.environ, OPENBLAS_NUM_THREADS="1")
    queue = list(jobs)
    active: list[tuple[subprocess.Popen, str]] = []
    failed = []
    while queue or active:
        while queue and len(active) < args.workers:
            name, seed = queue.pop(0)
            job = f"{name}:{seed}"
            p = subprocess.Popen(
                [sys.executable, __file__, "--job", job], env=env)
            active.append((p, job))
            print(f"-> started {job}", flush=True)
        time.sleep(5)
        still = []
        for p, job in active:
            if p.poll() is None:
                still.append((p, job))
            else:
                print(f"<- finished {job} (rc={p.returncode})", flush=True)
                if p.returncode != 0:
                    failed.append(job)
        active = still
    if failed:
        print(f"FAILED jobs: {failed}")
        return 1
    print("battery complete")
    return 0


if __name__ == "__main__":
    sys.exit(main())
