"""Cross-modal and template masking on one synthetic study.

Run: python demos/01_masking.py
"""
# %%
import numpy as np

from brainmvp import synthgen
from brainmvp.maskops import cross_modal_mask, desk_cube_edge, distill_mask, mask_target
from brainmvp.volcore import Volume

study = synthgen.gen_study(synthgen.GenConfig(), 0)
print(study.study_id, list(study.modality_names), study.dims)

# %% cube edge scales with crop size: 8 at 96^3 becomes 2 at 16^3
r = desk_cube_edge(16)
print("cube edge r =", r, " voxels to cover at p*=0.875:", mask_target(0.875, 16 ** 3))

# %% swap covered cubes of T1 for the co-located T2 content
t1, t2 = study.modalities["T1"], study.modalities["T2"]
res = cross_modal_mask(t1, t2, r, 0.875, seed=42)
occ = res.occupancy
print(f"covered {res.covered} voxels, fraction {res.masked_fraction:.4f}")
print("uncovered voxels untouched:", np.array_equal(res.masked.data[~occ], t1.data[~occ]))
print("covered voxels from T2:    ", np.array_equal(res.masked.data[occ], t2.data[occ]))

# %% same seed with a template as fill source: identical occupancy
tpl = Volume(synthgen.population_mean([study], "T1").astype(np.float32))
res_t = distill_mask(t1, tpl, r, 0.875, seed=42)
print("same occupancy as cross-modal:", np.array_equal(res_t.occupancy, occ), res_t.fill_source)

# %% coverage overshoot is bounded by one cube
for p in (0.0, 0.5, 0.875, 1.0):
    f = cross_modal_mask(t1, t2, 4, p, seed=7).masked_fraction
    print(f"p*={p:<6} fraction={f:.4f}  bound={min(1.0, p + 4 ** 3 / 16 ** 3):.4f}")

# %% one axial slice, coarse text rendering (# = masked)
z = 8
for row in occ[z]:
    print("".join("#" if v else "." for v in row))
