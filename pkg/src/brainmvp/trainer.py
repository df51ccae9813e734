"""Self-supervised pre-training loop.

Per batch item one modality crop ``x`` is sampled together with a second
modality ``y`` of the same study at the same coordinates.  Two masked views
are built (cubes filled from ``y`` and cubes filled from the learnable
template of ``x``'s modality), both are reconstructed back to ``x``, and once
the contrastive gate opens their embeddings form positive pairs.  Network
parameters and templates are updated in the same step.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autonet
from . import tape as T
from .distill import TemplateBank, export_bank, init_bank, template_step
from .losses import LossWeights, contrastive_loss, recon_loss, ssl_total
from .maskops import desk_cube_edge, occupancy_field
from .optim import AdamW, cosine_lr
from .volcore import ModalityRegistry, Study, crop_study, sample_crop_origin

log = logging.getLogger(__name__)

RUNLOG_FIELDS = ("step", "epoch", "lr", "l_cmr", "l_md", "l_cl", "l_ssl", "cl_active")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 150
    batch_size: int = 8
    lr0: float = 3e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    cl_start_fraction: float = 2.0 / 3.0
    r: int | None = None
    p_star: float = 0.875
    crop_dims: tuple[int, int, int] = (16, 16, 16)
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    template_lr: float | None = None
    template_optimizer: str = "adamw"   # or "sgd"
    normalize_embeddings: bool = True
    fg_threshold: float = 0.05
    fg_prob: float = 0.5
    checkpoint_every: int = 0
    snapshot_every: int = 0
    freeze_bank: bool = True

    def __post_init__(self):
        object.__setattr__(self, "crop_dims", tuple(int(c) for c in self.crop_dims))
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if not 0.0 <= self.cl_start_fraction <= 1.0:
            raise ValueError("cl_start_fraction must lie in [0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (contrastive loss needs negatives)")
        if self.template_optimizer not in ("adamw", "sgd"):
            raise ValueError("template_optimizer must be 'adamw' or 'sgd'")
        if self.epochs < 0 or not 0.0 <= self.p_star <= 1.0:
            raise ValueError("epochs must be >= 0 and p_star in [0, 1]")

    @property
    def cube_edge(self) -> int:
        return self.r if self.r is not None else desk_cube_edge(min(self.crop_dims))

    def gate_epoch(self) -> float:
        return self.cl_start_fraction * self.epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_dims"] = list(self.crop_dims)
        return d


@dataclass
class BatchItem:
    study_id: str
    modality: str
    x: np.ndarray
    partner: str | None
    y: np.ndarray | None
    origin: tuple[int, int, int]
    seed_cross: int
    seed_distill: int


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    snapshots: list[int] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        self.records.append(dict(rec))

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def to_tsv(self) -> str:
        lines = ["\t".join(RUNLOG_FIELDS)]
        for r in self.records:
            lines.append("\t".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in RUNLOG_FIELDS))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "runlog.tsv").write_text(self.to_tsv())
        summary = {
            "steps": len(self.records),
            "final": self.records[-1] if self.records else None,
            "checkpoints": self.checkpoints,
            "snapshots": self.snapshots,
        }
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def smooth(values, window: int = 10) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def sample_batch(studies: Sequence[Study], indices: Sequence[int], cfg: PretrainConfig,
                 rng: np.random.Generator) -> list[BatchItem]:
    """One uni-modal crop per study plus a co-located crop of a different modality."""
    items = []
    for i in indices:
        st = studies[i]
        origin = sample_crop_origin(st, cfg.crop_dims, rng, cfg.fg_threshold, cfg.fg_prob)
        st_c = crop_study(st, origin, cfg.crop_dims)
        names = st_c.modality_names
        m = names[int(rng.integers(len(names)))]
        others = [n for n in names if n != m]
        partner = others[int(rng.integers(len(others)))] if others else None
        seeds = rng.integers(0, 2**63, size=2)
        items.append(BatchItem(
            st.study_id, m, st_c.modalities[m].data,
            partner, st_c.modalities[partner].data if partner else None,
            origin, int(seeds[0]), int(seeds[1]),
        ))
    return items


def pretrain_step(state: autonet.ModelState, bank: TemplateBank, batch: Sequence[BatchItem],
                  cfg: PretrainConfig, step: int, total_steps: int, steps_per_epoch: int,
                  opt: AdamW) -> dict:
    """One joint update; returns the RunLog record for this step."""
    ncfg = state.config
    dt = np.dtype(ncfg.dtype)
    lr = cosine_lr(step, total_steps, cfg.lr0)
    epoch = step // max(1, steps_per_epoch)
    cl_active = epoch >= cfg.gate_epoch()
    r, p_star = cfg.cube_edge, cfg.p_star

    params = T.leaves(state.params.items())
    tpl = {m: T.Tensor(bank.templates[m].astype(dt), requires_grad=True, name=f"tpl/{m}")
           for m in sorted({it.modality for it in batch})}
    occ_union = {m: np.zeros(cfg.crop_dims, dtype=bool) for m in tpl}

    def template_view(x, m, occ):
        occ_f = occ.astype(dt)
        occ_union[m] |= occ
        return T.Tensor(x * (1 - occ_f)) + tpl[m] * occ_f

    view_a, view_b, targets = [], [], []
    for it in batch:
        x = it.x.astype(dt)
        occ_a = occupancy_field(cfg.crop_dims, r, p_star, it.seed_cross)
        if it.y is not None:
            view_a.append(T.Tensor(np.where(occ_a, it.y.astype(dt), x)))
        else:
            # single-modality study: the cross branch falls back to template fill
            view_a.append(template_view(x, it.modality, occ_a))
        occ_b = occupancy_field(cfg.crop_dims, r, p_star, it.seed_distill)
        view_b.append(template_view(x, it.modality, occ_b))
        targets.append(x)

    n = len(batch)
    inp = T.reshape(T.stack(view_a + view_b), (2 * n, 1) + cfg.crop_dims)
    out = autonet.apply(ncfg, params, inp)
    tgt = np.stack(targets)[:, None].astype(np.float64)
    # loss terms are reduced in float64 so the logged components recombine exactly
    recon = T.cast(out.reconstruction, np.float64)
    l_cmr = recon_loss(T.index(recon, slice(0, n)), tgt)
    l_md = recon_loss(T.index(recon, slice(n, 2 * n)), tgt)
    w = cfg.weights
    if cl_active:
        emb = T.cast(out.embedding, np.float64)
        l_cl = contrastive_loss(T.index(emb, slice(0, n)), T.index(emb, slice(n, 2 * n)),
                                w.tau, normalize=cfg.normalize_embeddings)
    else:
        l_cl = None
    total = ssl_total(l_cmr, l_md, l_cl if cl_active else 0.0, w, cl_active)

    rec = {
        "step": step, "epoch": epoch, "lr": float(lr),
        "l_cmr": float(l_cmr.data), "l_md": float(l_md.data),
        "l_cl": float(l_cl.data) if l_cl is not None else 0.0,
        "l_ssl": float(total.data), "cl_active": int(cl_active),
    }
    if not all(math.isfinite(rec[k]) for k in ("l_cmr", "l_md", "l_cl", "l_ssl")):
        raise TrainingDivergedError(f"non-finite loss at step {step}", rec)

    total.backward()
    grads = {k: t.grad for k, t in params.items() if t.grad is not None}
    opt.step(state.params, grads, lr)
    t_lr = lr if cfg.template_lr is None else cosine_lr(step, total_steps, cfg.template_lr)
    for m, leaf in tpl.items():
        if leaf.grad is not None:
            template_step(bank, m, leaf.grad, occ_union[m], t_lr, cfg.template_optimizer)
    return rec


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def steps_per_epoch(n: int, batch_size: int) -> int:
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= 2 else 0)


def run_pretrain(cfg: PretrainConfig, net_cfg: autonet.NetConfig, studies: Sequence[Study],
                 registry: ModalityRegistry | None = None, out_dir=None,
                 on_epoch_end: Callable[[int, autonet.ModelState, TemplateBank], None] | None = None,
                 ) -> tuple[autonet.ModelState, TemplateBank, RunLog]:
    """Full pre-training run; deterministic in (cfg, net_cfg, studies)."""
    if net_cfg.in_channels != 1:
        raise ValueError("pre-training uses single-channel (uni-modal) inputs")
    autonet.check_dims(net_cfg, cfg.crop_dims)
    if registry is None:
        names = []
        for s in studies:
            names += [m for m in s.modalities if m not in names]
        registry = ModalityRegistry(tuple(names) if len(names) >= 2 else tuple(names) + ("_unused",))
    state = autonet.init_state(net_cfg, cfg.seed)
    bank = init_bank(registry, cfg.crop_dims)
    runlog = RunLog()
    opt = AdamW(cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
    bank.optimizer = AdamW(cfg.beta1, cfg.beta2, weight_decay=0.0)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    spe = steps_per_epoch(len(studies), cfg.batch_size)
    total = cfg.epochs * spe
    out = Path(out_dir) if out_dir is not None else None

    def snapshot(step):
        if out is not None:
            export_bank(bank, out / "snapshots", step)
        runlog.snapshots.append(step)

    if cfg.snapshot_every:
        snapshot(0)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            for idx in _batches(len(studies), cfg.batch_size, rng):
                batch = sample_batch(studies, idx, cfg, rng)
                runlog.append(pretrain_step(state, bank, batch, cfg, step, total, spe, opt))
                step += 1
            if on_epoch_end is not None:
                on_epoch_end(epoch, state, bank)
            if cfg.snapshot_every and (epoch + 1) % cfg.snapshot_every == 0:
                snapshot(step)
            if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                path = out / "checkpoints" / f"epoch{epoch + 1:05d}.mvpc"
                autonet.save_checkpoint(state, path)
                runlog.checkpoints.append(str(path.relative_to(out)))
            log.info("epoch %d/%d  L_SSL=%.5f", epoch + 1, cfg.epochs,
                     runlog.records[-1]["l_ssl"] if runlog.records else float("nan"))
    except KeyboardInterrupt:
        if out is not None:
            autonet.save_checkpoint(state, out / "checkpoint.mvpc")
            runlog.write(out)
        raise
    if cfg.freeze_bank:
        bank.freeze()
    if out is not None:
        autonet.save_checkpoint(state, out / "checkpoint.mvpc")
        export_bank(bank, out / "bank", step)
        runlog.write(out)
    return state, bank, runlog
