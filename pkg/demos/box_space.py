"""Walk through the discretized box space and its smoothed training targets.

Run: python demos/box_space.py
"""

import numpy as np

from objectness.bbox import BBoxGrid, Box, box_params, decode, encode, target_distribution, unravel

grid = BBoxGrid()
print(f"default grid: {grid.nx}x{grid.ny} positions, {grid.ns} scales, {grid.na} aspects = {grid.size} cells")

box = Box(0.2, 0.3, 0.6, 0.5)
cx, cy, s, a = box_params(box)
cell = encode(box, grid)
print(f"box {box.as_tuple()} -> center ({cx:.2f}, {cy:.2f}), scale {s:.3f}, aspect {a:.2f}")
print(f"  cell {cell} = bins {unravel(cell, grid)}, decoded back to {tuple(round(v, 3) for v in decode(cell, grid).as_tuple())}")

# The target spreads mass over neighbouring cells; its mode stays on the box's own cell.
t = target_distribution([box], grid)
top = np.argsort(t)[::-1][:5]
print("five heaviest target cells:")
for k in top:
    print(f"  cell {k:3d} bins {unravel(int(k), grid)} mass {t[k]:.3f}")

# Two objects share the mass equally.
two = target_distribution([box, Box(0.0, 0.0, 0.3, 0.3)], grid)
print(f"two boxes: mass on each box's cell {two[cell]:.3f} and {two[encode(Box(0.0, 0.0, 0.3, 0.3), grid)]:.3f}")
