"""Every aggregation rule against the same rigged round.

Ten clients submit updates: nine benign ones clustered around a common
direction and one malicious outlier with a large, differently oriented
update.  Each defense gets the identical round; the table shows who
accepted the outlier and where the next global model landed.
"""

import numpy as np

from bclsim import (DefenseConfig, LayerMap, SyntheticSpec, TrainSpec,
                    aggregate, generate_synthetic, mlp_small)

arch = mlp_small((1, 1, 4), hidden=8, num_classes=4)
template = arch.init_params(0)
dim = template.num_params()
rng = np.random.default_rng(7)

g_vec = rng.normal(scale=0.1, size=dim)
global_model = LayerMap.from_vector(template, g_vec.astype(np.float32))

benign_dir = rng.normal(size=dim)
benign_dir /= np.linalg.norm(benign_dir)
updates = []
for i in range(9):
    u = 0.5 * benign_dir + rng.normal(scale=0.15, size=dim)
    updates.append((i, LayerMap.from_vector(
        template, (g_vec + u).astype(np.float32))))

evil_dir = rng.normal(size=dim)
evil_dir -= evil_dir @ benign_dir * benign_dir  # orthogonal to the crowd
evil_dir /= np.linalg.norm(evil_dir)
updates.append((9, LayerMap.from_vector(
    template, (g_vec + 3.0 * evil_dir).astype(np.float32))))

root = generate_synthetic(SyntheticSpec(
    n_samples=60, num_classes=4, height=1, width=4, jitter=0, seed=3))
tspec = TrainSpec(epochs=1, batch_size=16, lr=0.05, seed=0)

print(f"{'rule':<22} {'outlier?':<10} {'#accepted':<10} {'|g_next - g|':>12}")
for rule in ("fedavg", "multikrum", "flame", "fltrust", "rlr",
             "layerwise_multikrum"):
    cfg = DefenseConfig(rule=rule, f=2, m_select=4, theta=4)
    v = aggregate(rule, global_model, updates, cfg, root_data=root,
                  arch=arch, train_spec=tspec, rng=np.random.default_rng(0))
    moved = np.linalg.norm(
        v.next_global.to_vector(np.float64) - g_vec)
    took_evil = 9 in v.accepted
    print(f"{rule:<22} {'accepted' if took_evil else 'rejected':<10} "
          f"{len(v.accepted):<10} {moved:12.3f}")

print("\nfedavg and rlr never filter clients (rlr flips learning rates "
      "per dimension instead); the distance-based rules drop the outlier.")
