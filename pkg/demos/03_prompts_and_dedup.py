"""From a foreground mask to point prompts to deduplicated instances.

The mask is cut into grid cells; each cell's saliency is its foreground
fraction; cells above the threshold drop a prompt at the centroid of their
foreground pixels. Candidate instance masks realized from those prompts are
then thinned greedily by predicted-IoU score so each object keeps one mask.
"""

import numpy as np

from dsga import (
    PromptConfig,
    ScoredInstance,
    dedup_instances,
    generate_prompts,
    grid_saliency,
    mask_iou,
)

# three rectangular objects on a 96x96 canvas
mask = np.zeros((96, 96), dtype=bool)
objects = [(8, 8, 20), (12, 60, 24), (60, 30, 18)]
for y, x, side in objects:
    mask[y : y + side, x : x + side] = True

cfg = PromptConfig(grid_size=32, saliency_threshold=0.05, n_min=1, n_max=16)
rho = grid_saliency(mask, cfg.grid_size)
print("cell saliency grid (foreground fraction per 32x32 cell):")
for row in rho:
    print("  " + " ".join(f"{v:4.2f}" for v in row))

prompts = generate_prompts(mask, cfg)
print(f"\n{len(prompts)} prompts, highest saliency first:")
for p in prompts:
    print(f"  cell {p.source_cell} -> point ({p.x:2d}, {p.y:2d})  "
          f"confidence {p.confidence:.3f}")

# simulate a promptable segmenter: per prompt, the containing object, plus a
# sloppy one-pixel-dilated duplicate from a neighboring prompt
candidates = []
for i, p in enumerate(prompts):
    for y, x, side in objects:
        if y <= p.y < y + side and x <= p.x < x + side:
            exact = np.zeros_like(mask)
            exact[y : y + side, x : x + side] = True
            sloppy = np.zeros_like(mask)
            sloppy[max(y - 1, 0) : y + side + 1, max(x - 1, 0) : x + side + 1] = True
            candidates.append(ScoredInstance(mask=exact, score=0.95 - 0.01 * i))
            candidates.append(ScoredInstance(mask=sloppy, score=0.80 - 0.01 * i))

print(f"\n{len(candidates)} candidates before suppression")
pairwise = [
    mask_iou(candidates[i].mask, candidates[i + 1].mask)
    for i in range(0, len(candidates), 2)
]
print(f"exact-vs-sloppy overlap per object: {np.round(pairwise, 3)}")

for tau in (0.75, 0.99):
    kept = dedup_instances(candidates, tau_o=tau)
    print(f"suppression at tau = {tau}: {len(kept)} instances kept "
          f"(scores {[round(k.score, 3) for k in kept]})")

kept = dedup_instances(candidates, tau_o=0.75)
print(f"\nfinal count matches the number of objects: {len(kept)} == {len(objects)}")
