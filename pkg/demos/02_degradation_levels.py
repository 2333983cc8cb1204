"""Render one clean sample next to its three degraded versions and print the recipes.

Run: python demos/02_degradation_levels.py [out.png]
"""
import sys

import numpy as np
from PIL import Image

from latentseg import synth

out = sys.argv[1] if len(sys.argv) > 1 else "degradation_levels.png"
rows = []
for seed in range(4):
    hq, mask = synth.gen_shape_sample(seed)
    tiles = [hq, np.repeat(mask[..., None], 3, axis=-1)]
    for level in synth.LEVELS:
        lq, recipe = synth.degrade(hq, level, seed=100 + seed)
        lq8 = synth.to_uint8(lq)
        tiles.append(lq8)
        ops = ", ".join(op["op"] for op in recipe.ops)
        print(f"sample {seed} LQ{level}: PSNR {synth.psnr(lq8, hq):6.2f} dB  [{ops}]")
    rows.append(np.concatenate(tiles, axis=1))
grid = np.concatenate(rows, axis=0)
Image.fromarray(grid).resize((grid.shape[1] * 2, grid.shape[0] * 2), Image.NEAREST).save(out)
print(f"columns: clean, mask, LQ1, LQ2, LQ3 -> {out}")
