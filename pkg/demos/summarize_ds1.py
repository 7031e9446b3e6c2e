"""Render the cached desk-scale results as an attack x defense matrix.

Aggregates whatever results/ds1/ currently holds (run run_ds1_battery.py
to fill it) and prints mean best/average backdoor success rate, final
accuracy, and the acceptance rates per scenario, one row per scenario,
seeds pooled.
"""

import json
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

cache = Path(__file__).resolve().parents[1] / "results" / "ds1"
files = sorted(cache.glob("*.json")) if cache.is_dir() else []
if not files:
    sys.exit(f"no cached runs under {cache}; run demos/run_ds1_battery.py first")

groups = defaultdict(list)
for f in files:
    payload = json.loads(f.read_text())
    groups[payload["name"]].append(payload)

print(f"{len(files)} cached runs, dataset(s): "
      f"{sorted({p['dataset'] for g in groups.values() for p in g})}\n")
print(f"{'scenario':<28} {'seeds':>5} {'best BSR':>9} {'avg BSR':>8} "
      f"{'acc':>6} {'BAR':>6} {'MAR':>6}")
for name in sorted(groups):
    g = groups[name]
    mars = [p["mar"] for p in g if p["mar"] is not None]
    mar = f"{np.mean(mars):.2f}" if mars else "-"
    print(f"{name:<28} {len(g):>5} "
          f"{np.mean([p['best_bsr'] for p in g]):9.3f} "
          f"{np.mean([p['avg_bsr'] for p in g]):8.3f} "
          f"{np.mean([p['final_acc'] for p in g]):6.3f} "
          f"{np.mean([p['bar'] for p in g]):6.2f} {mar:>6}")

print("\nhow to read this: the trigger-training baseline only survives "
      "plain averaging; the layer-wise poisoning attack keeps its "
      "malicious acceptance rate (MAR) high under the distance filters "
      "and carries the backdoor through them; the flipping variant "
      "works specifically against the sign-based rule.")
