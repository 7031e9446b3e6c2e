"""Triggers, DBA sub-triggers, and label-skewed client partitions.

ASCII-renders the trigger geometry, shows that the four DBA shards tile
the full 5x5 pattern, and prints how the q parameter skews each client
group's class mix.
"""

import numpy as np

from bclsim import (PoisonSpec, SyntheticSpec, dba_subtrigger, embed_trigger,
                    generate_synthetic, partition)


def render(img, size=12):
    # draw the bottom-right corner of the image
    rows = []
    for r in range(img.shape[0] - size, img.shape[0]):
        rows.append("".join(
            "#" if img[r, c, 0] == 1.0 else "." for c in
            range(img.shape[1] - size, img.shape[1])))
    return "\n".join(rows)


blank = np.zeros((28, 28, 1), dtype=np.float32)
full = PoisonSpec(pdr=0.5, target_label=5)
print("full 5x5 trigger (bottom-right corner shown):")
print(render(embed_trigger(blank, full)))

print("\nDBA sub-triggers (2x2 / 2x3 / 3x2 / 3x3):")
pieced = blank
for shard in (1, 2, 3, 4):
    sub = dba_subtrigger(full, shard)
    print(f"\nshard {shard} ({len(sub.offsets)} cells):")
    print(render(embed_trigger(blank, sub)))
    pieced = embed_trigger(pieced, sub)

assert np.array_equal(pieced, embed_trigger(blank, full))
print("\nall four shards together == the full trigger  [ok]")

# -- partitions ------------------------------------------------------------

data = generate_synthetic(SyntheticSpec(n_samples=20000, seed=0))
print(f"\n{len(data)} samples, 10 classes, 30 clients (3 clients per group)")
for q in (0.1, 0.5, 0.9):
    plan = partition(data, 30, q=q, seed=1)
    own = []
    for g in range(10):
        members = np.concatenate(
            [plan.client_indices[c] for c in range(30) if c % 10 == g])
        labels = data.labels[members]
        own.append(np.mean(labels == g))
    print(f"q={q}: fraction of group-matching labels per group "
          f"min={min(own):.2f} mean={np.mean(own):.2f} max={max(own):.2f}"
          f"{'  (IID point)' if q == 0.1 else ''}")

sizes = [len(ix) for ix in partition(data, 30, q=0.5, seed=1).client_indices]
print(f"client dataset sizes at q=0.5: min={min(sizes)} max={max(sizes)}")
