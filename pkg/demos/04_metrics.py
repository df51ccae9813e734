"""Segmentation and classification metrics on hand-built cases.

Run: python demos/04_metrics.py
"""
# %%
import numpy as np

from brainmvp import downstream as D

a = np.zeros((4, 4, 4), bool)
b = np.zeros((4, 4, 4), bool)
a[0, 0, :4] = True
b[0, 0, :2] = True
print("Dice |A|=4 |B|=2 |A&B|=2:", D.dice_score(a, b))

# %% HD95 counts surface voxels (6-neighbourhood, grid edge is outside)
p = np.zeros((8, 8, 8), bool)
q = np.zeros((8, 8, 8), bool)
p[2:6, 2:6, 2:6] = True
q[2:6, 2:6, 3:7] = True
print("surface voxels of a 4^3 cube:", len(D.surface_voxels(p)))
print("HD95 shifted cube:", D.hd95(p, q), " Hausdorff:", D.hausdorff(p, q))
print("HD95 vs empty:", D.hd95(p, np.zeros_like(p)))

# %% classification
scores = [(0.9, 1), (0.4, 0), (0.6, 1), (0.3, 0)]
print("acc, auc, f1:", D.cls_metrics(scores))
print("inverted:    ", D.cls_metrics([(1 - s, y) for s, y in scores]))

# %% report serialization: infinite HD95 becomes null
rep = D.evaluate_predictions([p, np.zeros_like(p)], [q, q])
print(rep.to_json())
