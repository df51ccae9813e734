"""Fine-tuning for lesion segmentation, scratch vs pre-trained init with template replacement.

Run: python demos/03_finetune.py   (a few minutes on one core)
"""
# %%
import numpy as np

from brainmvp import autonet, synthgen, trainer
from brainmvp import downstream as D

studies, splits = synthgen.gen_dataset(synthgen.GenConfig(), 32)
by_id = {s.study_id: s for s in studies}
train = [by_id[i] for i in splits["train"]]
test = [by_id[i] for i in splits["test"]]
net = autonet.NetConfig(stage_channels=(8, 16))
print(f"train {len(train)}  test {len(test)}")

# %% pre-train on the training split only
pre, bank, _ = trainer.run_pretrain(trainer.PretrainConfig(epochs=30), net, train)

# %% one augmented pair: copies differ in how many modalities were swapped for templates
cfg = D.FinetuneConfig(epochs=60)
a, b = D.make_copies(train[0], bank, cfg, np.random.default_rng(0))
swapped = [[not np.array_equal(x[i], train[0].modalities[m].data) for i, m in enumerate(train[0].modality_names)]
           for x in (a, b)]
print("templated channels, copy 1:", swapped[0], " copy 2:", swapped[1])

# %% fine-tune both inits on the same 8 studies
ids = D.nested_subsets(splits["train"], [8 / len(train)], seed=0)[0]
few = [by_id[i] for i in ids]
for init, p, bk in (("scratch", None, None), ("pretrained", pre, bank)):
    c = D.FinetuneConfig(**{**cfg.to_dict(), "init": init})
    state, recs = D.run_finetune(c, net, few, p, bk, seed=0)
    rep = D.evaluate(state, test)
    print(f"{init:<10} final L_ft {recs[-1]['l_ft']:.3f}  test Dice {rep.dice_mean:.3f}  "
          f"HD95 {rep.hd95_mean:.2f} ({rep.hd95_missing} empty)")
print("bank unchanged by fine-tuning:", bank.frozen)
