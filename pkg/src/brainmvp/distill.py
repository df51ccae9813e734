"""Learnable per-modality template volumes.

Templates start at zero and are updated from the input-voxel gradient of the
template-masked reconstruction loss, only where the template was actually
pasted into the input.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import AdamW, sgd_step
from .volcore import ModalityRegistry, Volume, load_volume, save_volume


class FrozenBankError(RuntimeError):
    pass


@dataclass
class TemplateBank:
    registry: ModalityRegistry
    templates: dict[str, np.ndarray]
    frozen: bool = False
    update_count: dict[str, int] = field(default_factory=dict)
    optimizer: AdamW = field(default_factory=lambda: AdamW(weight_decay=0.0))

    @property
    def dims(self) -> tuple[int, int, int]:
        return next(iter(self.templates.values())).shape

    def volume(self, modality: str) -> Volume:
        return Volume(self.templates[modality])

    def freeze(self) -> "TemplateBank":
        self.frozen = True
        for t in self.templates.values():
            t.setflags(write=False)
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        for m in self.registry:
            h.update(m.encode())
            h.update(np.ascontiguousarray(self.templates[m]).tobytes())
        return h.hexdigest()

    def copy(self) -> "TemplateBank":
        return TemplateBank(self.registry, {k: v.copy() for k, v in self.templates.items()},
                            False, dict(self.update_count), AdamW(weight_decay=0.0))


def init_bank(registry: ModalityRegistry, crop_dims, dtype=np.float32) -> TemplateBank:
    dims = tuple(int(d) for d in crop_dims)
    return TemplateBank(registry, {m: np.zeros(dims, dtype=dtype) for m in registry},
                        update_count={m: 0 for m in registry})


def template_step(bank: TemplateBank, modality: str, input_grad, occupancy, lr: float,
                  optimizer: str | AdamW = "adamw") -> None:
    """Update one template at the voxels in ``occupancy`` only.

    ``optimizer`` is ``"adamw"`` (the bank's own zero-decay AdamW state),
    ``"sgd"`` (plain gradient descent), or an explicit AdamW instance.
    """
    if bank.frozen:
        raise FrozenBankError("template bank is frozen")
    tpl = bank.templates[modality]
    g = np.asarray(input_grad, dtype=tpl.dtype)
    occ = np.asarray(occupancy, dtype=bool)
    if g.shape != tpl.shape or occ.shape != tpl.shape:
        raise ValueError(f"gradient/occupancy dims must equal template dims {tpl.shape}")
    if not occ.any():
        return
    if optimizer == "sgd":
        sgd_step(tpl, g, lr, occ)
    else:
        opt = bank.optimizer if optimizer == "adamw" else optimizer
        opt.step({modality: tpl}, {modality: g}, lr, masks={modality: occ})
    bank.update_count[modality] = bank.update_count.get(modality, 0) + 1


def export_bank(bank: TemplateBank, out_dir, step: int) -> Path:
    """Write ``templates/<modality>/<step>.mvpv`` and append to ``manifest.tsv``."""
    out_dir = Path(out_dir)
    manifest = out_dir / "manifest.tsv"
    rows = []
    if manifest.exists():
        rows = manifest.read_text().splitlines()[1:]
    for m in bank.registry:
        rel = f"templates/{m}/{step:06d}.mvpv"
        save_volume(bank.templates[m], out_dir / rel)
        row = f"{m}\t{step}\t{rel}"
        if row not in rows:
            rows.append(row)
    manifest.write_text("modality\tstep\tpath\n" + "".join(r + "\n" for r in rows))
    return manifest


def read_export(out_dir) -> list[tuple[str, int, Path]]:
    out_dir = Path(out_dir)
    lines = (out_dir / "manifest.tsv").read_text().splitlines()
    rows = []
    for ln in lines[1:]:
        m, step, rel = ln.split("\t")
        rows.append((m, int(step), out_dir / rel))
    return rows


def load_bank(out_dir, registry: ModalityRegistry, step: int | None = None) -> TemplateBank:
    """Load the snapshot at ``step`` (latest when None) from an export directory."""
    rows = read_export(out_dir)
    if step is None:
        step = max(s for _, s, _ in rows)
    chosen = {m: p for m, s, p in rows if s == step}
    missing = [m for m in registry if m not in chosen]
    if missing:
        raise FileNotFoundError(f"no snapshot at step {step} for {missing}")
    templates = {m: np.array(load_volume(chosen[m]).data) for m in registry}
    return TemplateBank(registry, templates, update_count={m: step for m in registry})
