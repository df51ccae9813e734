"""Fine-tuning with frozen modality templates, evaluation metrics, label-efficiency runs.

Each training study yields two augmented copies in which a random number of
modalities is swapped for the matching frozen template (or, for single-modality
inputs, two independent template-filled cube masks).  Both copies go through
the network; the task loss is applied to each and their pooled encoder
features are tied together with a mean-squared consistency term.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from . import autonet
from . import tape as T
from .distill import FrozenBankError, TemplateBank
from .losses import ce_loss, consistency_loss, dice_loss, finetune_total
from .maskops import desk_cube_edge, distill_mask
from .optim import AdamW, cosine_lr
from .volcore import Study, Volume, nearest_rank

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetuneConfig:
    task: str = "segmentation"
    replace_m: int | None = None       # None: uniform in {0, .., M-1} per step
    replace_n: int | None = None
    r: int | None = None               # uni-modal masking cube edge (default: scaled to dims)
    p_star: float = 0.875
    lambda_cons: float = 0.1
    cons_features: str = "bottleneck"  # or "embedding"
    label_fractions: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    epochs: int = 40
    batch_size: int = 4
    lr: float = 3e-3
    weight_decay: float = 1e-5
    cls_classes: int = 2
    seed: int = 0
    init: str = "pretrained"

    def __post_init__(self):
        object.__setattr__(self, "label_fractions", tuple(float(f) for f in self.label_fractions))
        if self.task not in ("segmentation", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.init not in ("scratch", "pretrained"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.cons_features not in ("bottleneck", "embedding"):
            raise ValueError(f"unknown cons_features {self.cons_features!r}")
        fr = self.label_fractions
        if not fr or any(not 0 < f <= 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError("label_fractions must be strictly increasing values in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label_fractions"] = list(self.label_fractions)
        return d


@dataclass
class MetricReport:
    dice: list[float] = field(default_factory=list)
    dice_mean: float = float("nan")
    hd95: list[float] = field(default_factory=list)
    hd95_mean: float = float("nan")
    hd95_missing: int = 0
    acc: float = float("nan")
    auc: float = float("nan")
    f1: float = float("nan")
    n_samples: int = 0

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v
        return json.dumps({k: clean(v) for k, v in asdict(self).items()}, indent=2)

    def row(self) -> dict:
        return {"dice_mean": self.dice_mean, "hd95_mean": self.hd95_mean, "hd95_missing": self.hd95_missing,
                "acc": self.acc, "auc": self.auc, "f1": self.f1, "n_samples": self.n_samples}


# ---------------------------------------------------------------- metrics

def dice_score(pred, target) -> float:
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(target, dtype=bool)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)


_FACE = ndimage.generate_binary_structure(3, 1)


def surface_voxels(mask) -> np.ndarray:
    """Coordinates of mask voxels with a 6-neighbour outside the mask (volume edge counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(m, structure=_FACE, border_value=0)
    return np.argwhere(m & ~inner)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(d, dtype=np.float64)


def hd95(pred, target) -> float:
    """Symmetric 95th-percentile surface distance in voxel units.

    Each direction takes the nearest-rank 95th percentile of its surface-to-surface
    distances; the result is the larger of the two.  Both masks empty gives 0,
    exactly one empty gives +inf.
    """
    sa, sb = surface_voxels(pred), surface_voxels(target)
    if len(sa) == 0 and len(sb) == 0:
        return 0.0
    if len(sa) == 0 or len(sb) == 0:
        return math.inf
    dab = np.sort(_directed(sa, sb))
    dba = np.sort(_directed(sb, sa))
    return max(nearest_rank(dab, 0.95), nearest_rank(dba, 0.95))


def hausdorff(pred, target) -> float:
    sa, sb = surface_voxels(pred), surface_voxels(target)
    if len(sa) == 0 or len(sb) == 0:
        return 0.0 if len(sa) == len(sb) else math.inf
    return float(max(_directed(sa, sb).max(), _directed(sb, sa).max()))


def cls_metrics(scores: Sequence[tuple[float, int]], threshold: float = 0.5) -> tuple[float, float, float]:
    """Accuracy at ``threshold``, rank-statistic AUC (ties count half), positive-class F1."""
    s = np.array([float(x) for x, _ in scores])
    y = np.array([int(l) for _, l in scores])
    pred = s >= threshold
    acc = float(np.mean(pred == (y == 1))) if len(y) else float("nan")
    n_pos, n_neg = int((y == 1).sum()), int((y != 1).sum())
    if n_pos and n_neg:
        ranks = rankdata(s)
        auc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    else:
        auc = float("nan")
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y != 1)))
    fn = int(np.sum(~pred & (y == 1)))
    f1 = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return acc, float(auc), float(f1)


# ---------------------------------------------------------------- template augmentation

def _fit_template(tpl: np.ndarray, dims) -> np.ndarray:
    if tpl.shape == tuple(dims):
        return tpl
    if all(t >= d for t, d in zip(tpl.shape, dims)):
        o = [(t - d) // 2 for t, d in zip(tpl.shape, dims)]
        return tpl[o[0]:o[0] + dims[0], o[1]:o[1] + dims[1], o[2]:o[2] + dims[2]]
    zoom = [d / t for d, t in zip(dims, tpl.shape)]
    return ndimage.zoom(tpl, zoom, order=1).astype(tpl.dtype)


def replace_with_templates(study: Study, bank: TemplateBank, k: int, rng: np.random.Generator) -> Study:
    """Copy of ``study`` with ``k`` uniformly chosen modalities swapped for their templates."""
    if not bank.frozen:
        raise FrozenBankError("downstream template replacement needs a frozen bank")
    names = study.modality_names
    if not 0 <= k <= len(names):
        raise ValueError(f"k={k} outside [0, {len(names)}]")
    chosen = set(rng.choice(len(names), size=k, replace=False).tolist()) if k else set()
    mods = {}
    for i, m in enumerate(names):
        if i in chosen:
            mods[m] = Volume(_fit_template(bank.templates[m], study.dims))
        else:
            mods[m] = study.modalities[m]
    return Study(study.study_id, mods, study.seg_label, study.cls_label, dict(study.meta))


def unimodal_template_mask(x: Volume, template: Volume, r: int, p_star: float,
                           rng: np.random.Generator) -> Volume:
    seed = int(rng.integers(0, 2**63))
    return distill_mask(x, template, r, p_star, seed).masked


def _stack(study: Study, order: Sequence[str]) -> np.ndarray:
    return np.stack([study.modalities[m].data for m in order])


def make_copies(study: Study, bank: TemplateBank | None, cfg: FinetuneConfig,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """The two augmented channel-stacked copies (M, D, H, W) of one study."""
    names = study.modality_names
    if bank is None:
        x = _stack(study, names)
        return x, x
    if len(names) == 1:
        m = names[0]
        tpl = Volume(_fit_template(bank.templates[m], study.dims))
        r = cfg.r if cfg.r is not None else desk_cube_edge(min(study.dims))
        a = unimodal_template_mask(study.modalities[m], tpl, r, cfg.p_star, rng)
        b = unimodal_template_mask(study.modalities[m], tpl, r, cfg.p_star, rng)
        return a.data[None], b.data[None]
    top = len(names) - 1
    k1 = cfg.replace_m if cfg.replace_m is not None else int(rng.integers(0, top + 1))
    k2 = cfg.replace_n if cfg.replace_n is not None else int(rng.integers(0, top + 1))
    return (_stack(replace_with_templates(study, bank, k1, rng), names),
            _stack(replace_with_templates(study, bank, k2, rng), names))


def cls_target(study: Study, classes: int) -> int:
    c = int(study.cls_label or 0)
    return min(c, 1) if classes == 2 else c


def build_model(net_cfg: autonet.NetConfig, in_channels: int, cfg: FinetuneConfig,
                pretrained: autonet.ModelState | None, seed: int) -> autonet.ModelState:
    seg_out = 1 if cfg.task == "segmentation" else 0
    cls_out = cfg.cls_classes if cfg.task == "classification" else 0
    if pretrained is not None:
        return autonet.widen_input(pretrained, in_channels, seg_out, cls_out, seed)
    c = net_cfg
    return autonet.init_state(autonet.NetConfig(in_channels, c.stage_channels, c.kernel, c.activation,
                                                c.embed_dim, seg_out, cls_out, c.dtype), seed)


def finetune_step(state: autonet.ModelState, studies: Sequence[Study], bank: TemplateBank | None,
                  cfg: FinetuneConfig, opt: AdamW, lr: float, rng: np.random.Generator,
                  update: bool = True) -> dict:
    """One fine-tuning update on a batch of studies; returns the loss record."""
    ncfg = state.config
    dt = np.dtype(ncfg.dtype)
    firsts, seconds = [], []
    for st in studies:
        a, b = make_copies(st, bank, cfg, rng)
        firsts.append(a)
        seconds.append(b)
    n = len(studies)
    x = np.stack(firsts + seconds).astype(dt)
    params = T.leaves(state.params.items())
    out = autonet.apply(ncfg, params, T.Tensor(x))

    if cfg.task == "segmentation":
        prob = T.cast(T.sigmoid(out.seg_logits), np.float64)
        per = []
        for i in range(2 * n):
            tgt = studies[i % n].seg_label.data.astype(np.float64)[None]
            per.append(dice_loss(T.index(prob, i), tgt))
        sl1 = T.tmean(T.stack(per[:n]))
        sl2 = T.tmean(T.stack(per[n:]))
    else:
        logits = T.cast(out.cls_logits, np.float64)
        labels = [cls_target(s, cfg.cls_classes) for s in studies]
        sl1 = ce_loss(T.index(logits, slice(0, n)), labels)
        sl2 = ce_loss(T.index(logits, slice(n, 2 * n)), labels)
    feats = out.pooled if cfg.cons_features == "bottleneck" else out.embedding
    feats = T.cast(feats, np.float64)
    cons = consistency_loss(T.index(feats, slice(0, n)), T.index(feats, slice(n, 2 * n)))
    total = finetune_total(sl1, sl2, cons, cfg.lambda_cons)
    rec = {"l_sl1": float(sl1.data), "l_sl2": float(sl2.data), "l_cons": float(cons.data),
           "l_ft": float(total.data), "identical_copies": bool(np.array_equal(x[:n], x[n:]))}
    if update:
        total.backward()
        opt.step(state.params, {k: t.grad for k, t in params.items() if t.grad is not None}, lr)
    return rec


def predict(state: autonet.ModelState, study: Study):
    """Foreground probability volume (segmentation) or class-probability vector."""
    x = _stack(study, study.modality_names)[None].astype(state.config.dtype)
    p = {k: T.Tensor(v) for k, v in state.params.items()}
    out = autonet.apply(state.config, p, T.Tensor(x))
    if out.seg_logits is not None:
        return T._sigmoid(out.seg_logits.data[0, 0].astype(np.float64))
    z = out.cls_logits.data[0].astype(np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def evaluate(state: autonet.ModelState, studies: Sequence[Study], task: str = "segmentation") -> MetricReport:
    rep = MetricReport(n_samples=len(studies))
    if task == "segmentation":
        dices, hds = [], []
        for st in studies:
            pred = predict(state, st) >= 0.5
            tgt = st.seg_label.data > 0.5
            dices.append(dice_score(pred, tgt))
            hds.append(hd95(pred, tgt))
        return evaluate_predictions([], [], rep, dices, hds)
    classes = state.config.cls_out
    pairs = []
    for st in studies:
        prob = predict(state, st)
        pairs.append((float(1.0 - prob[0]), 1 if cls_target(st, classes) > 0 else 0))
    rep.acc, rep.auc, rep.f1 = cls_metrics(pairs)
    return rep


def evaluate_predictions(preds: Sequence[np.ndarray], targets: Sequence[np.ndarray],
                         rep: MetricReport | None = None, dices=None, hds=None) -> MetricReport:
    """Segmentation report from binary prediction / label volumes."""
    if rep is None:
        rep = MetricReport(n_samples=len(preds))
    if dices is None:
        dices = [dice_score(p, t) for p, t in zip(preds, targets)]
        hds = [hd95(p, t) for p, t in zip(preds, targets)]
    rep.dice = [float(d) for d in dices]
    rep.dice_mean = float(np.mean(dices)) if dices else float("nan")
    finite = [h for h in hds if math.isfinite(h)]
    rep.hd95 = [float(h) for h in hds]
    rep.hd95_mean = float(np.mean(finite)) if finite else float("nan")
    rep.hd95_missing = len(hds) - len(finite)
    return rep


def run_finetune(cfg: FinetuneConfig, net_cfg: autonet.NetConfig, train: Sequence[Study],
                 pretrained: autonet.ModelState | None = None, bank: TemplateBank | None = None,
                 seed: int | None = None) -> tuple[autonet.ModelState, list[dict]]:
    seed = cfg.seed if seed is None else seed
    if not train:
        raise ValueError("no training studies")
    in_ch = len(train[0].modality_names)
    state = build_model(net_cfg, in_ch, cfg, pretrained if cfg.init == "pretrained" else None, seed)
    opt = AdamW(weight_decay=cfg.weight_decay)
    rng = np.random.Generator(np.random.PCG64([seed, 0xF17E]))
    n_batches = -(-len(train) // cfg.batch_size)
    total = cfg.epochs * n_batches
    records, step = [], 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train))
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = cosine_lr(step, total, cfg.lr)
            records.append(finetune_step(state, [train[i] for i in idx], bank, cfg, opt, lr, rng))
            step += 1
        log.info("finetune %s epoch %d/%d  L_ft=%.5f", cfg.init, epoch + 1, cfg.epochs, records[-1]["l_ft"])
    return state, records


def nested_subsets(ids: Sequence[str], fractions: Sequence[float], seed: int) -> list[list[str]]:
    """Prefixes of one fixed permutation, so each larger subset contains the smaller ones."""
    perm = np.random.Generator(np.random.PCG64([seed, 0x1AB])).permutation(len(ids))
    order = [ids[i] for i in perm]
    return [order[:max(1, int(math.ceil(f * len(ids) - 1e-9)))] for f in fractions]


def run_label_efficiency(cfg: FinetuneConfig, net_cfg: autonet.NetConfig, studies: Sequence[Study],
                         splits: dict[str, list[str]], pretrained: autonet.ModelState | None,
                         bank: TemplateBank | None, seeds: Sequence[int] = (0,)) -> list[dict]:
    """One MetricReport row per (init, fraction, seed); scratch runs use no templates."""
    by_id = {s.study_id: s for s in studies}
    test = [by_id[i] for i in splits["test"]]
    rows = []
    inits = [("scratch", None, None)]
    if pretrained is not None:
        inits.append(("pretrained", pretrained, bank))
    for seed in seeds:
        subsets = nested_subsets(splits["train"], cfg.label_fractions, seed)
        for frac, ids in zip(cfg.label_fractions, subsets):
            train = [by_id[i] for i in ids]
            for name, init_state, init_bank in inits:
                c = FinetuneConfig(**{**cfg.to_dict(), "init": name})
                state, _ = run_finetune(c, net_cfg, train, init_state, init_bank, seed)
                rep = evaluate(state, test, cfg.task)
                rows.append({"init": name, "fraction": frac, "seed": seed, "n_train": len(train),
                             **rep.row()})
    return rows


def curves_tsv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
