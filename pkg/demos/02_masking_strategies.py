"""Visualize the two masking strategies on a 4x4 patch grid.

Every sampled pair keeps context and target disjoint. random_disjoint
scatters target tokens uniformly; multi_block carves contiguous
rectangles, which makes the prediction task harder because nearby
context is hidden too.
"""

import numpy as np

from featpred.masking import MaskConfig, sample_mask, target_count

GRID = (4, 4)
N = GRID[0] * GRID[1]


def render(pair):
    cells = np.full(N, ".", dtype=object)          # "." = dropped token
    cells[pair.context_indices] = "c"
    for g, group in enumerate(pair.target_groups):
        cells[group] = str(g)
    return "\n".join("  " + " ".join(cells[r * GRID[1]:(r + 1) * GRID[1]])
                     for r in range(GRID[0]))


for strategy in ("random_disjoint", "multi_block"):
    cfg = MaskConfig(strategy=strategy, target_ratio=0.25,
                     n_target_groups=2, seed=11)
    rng = cfg.make_rng()
    print(f"{strategy} (target_ratio=0.25 -> "
          f"{target_count(N, cfg)} of {N} tokens)")
    for draw in range(2):
        pair = sample_mask(N, GRID, cfg, rng)
        pair.validate()  # disjointness and coverage are checked, not hoped
        print(render(pair))
        print()

# empirical check: over many draws, every token appears as a target at
# roughly the same frequency, so no grid position is systematically easy
cfg = MaskConfig(strategy="random_disjoint", target_ratio=0.25, seed=0)
rng = cfg.make_rng()
hits = np.zeros(N)
draws = 4000
for _ in range(draws):
    hits[sample_mask(N, GRID, cfg, rng).target_indices()] += 1
freq = hits / draws
print(f"random_disjoint target frequency over {draws} draws:")
print(f"  min {freq.min():.3f}  max {freq.max():.3f}  expected 0.250")
