"""Objective terms for pre-training and fine-tuning.

Every loss accepts numpy arrays / Volumes (returning a float) or tape
Tensors (returning a Tensor that can be backpropagated).  Reductions run in
fixed index order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .volcore import Volume

DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    lambda_md: float = 1.0
    lambda_cl: float = 1.0
    lambda_cons: float = 0.1
    tau: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature tau must be positive")
        if min(self.lambda_md, self.lambda_cl, self.lambda_cons) < 0:
            raise ValueError("loss weights must be non-negative")


def _wrap(*xs):
    """Lift inputs to Tensors; plain arrays follow the dtype of any Tensor argument."""
    tensors = [x for x in xs if isinstance(x, T.Tensor)]
    dt = tensors[0].dtype if tensors else np.float64
    out = []
    for x in xs:
        if isinstance(x, Volume):
            x = x.data
        out.append(x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=dt)))
    return bool(tensors), out


def _ret(tracked: bool, t: T.Tensor):
    return t if tracked else float(t.data)


def recon_loss(pred, target):
    """Voxel-mean squared error."""
    tracked, (p, t) = _wrap(pred, target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    d = p - t
    return _ret(tracked, T.tmean(d * d))


def consistency_loss(e1, e2):
    """Mean squared difference between two feature vectors (same convention as recon_loss)."""
    tracked, (a, b) = _wrap(e1, e2)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return _ret(tracked, T.tmean(d * d))


def l2_normalize(x: T.Tensor, eps: float = 1e-12) -> T.Tensor:
    norm = T.sqrt(T.tsum(x * x, axis=-1, keepdims=True) + eps)
    return x / norm


def info_nce(f, g, tau: float = 0.1, normalize: bool = False):
    """Mean over rows i of -log softmax_j(f_i . g_j / tau)[i].

    Rows are expected to be unit vectors already; ``normalize=True`` applies
    L2 normalization first (differentiably).
    """
    if tau <= 0:
        raise ValueError("temperature tau must be positive")
    tracked, (a, b) = _wrap(f, g)
    if a.data.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"need equal (B, E) batches, got {a.shape} and {b.shape}")
    if a.shape[0] < 2:
        raise ValueError("info_nce needs at least 2 rows")
    if normalize:
        a, b = l2_normalize(a), l2_normalize(b)
    logits = (a @ T.transpose(b)) * (1.0 / tau)
    n = a.shape[0]
    diag = T.index(logits, (np.arange(n), np.arange(n)))
    return _ret(tracked, T.tmean(T.logsumexp(logits, axis=1) - diag))


def contrastive_loss(f, g, tau: float = 0.1, normalize: bool = False):
    """Symmetric InfoNCE: 0.5 * (L_{f->g} + L_{g->f})."""
    fg = info_nce(f, g, tau, normalize)
    gf = info_nce(g, f, tau, normalize)
    return (fg + gf) * 0.5


def ssl_total(cmr, md, cl, w: LossWeights, cl_active: bool):
    total = cmr + w.lambda_md * md
    if cl_active:
        total = total + w.lambda_cl * cl
    return total


def finetune_total(sl1, sl2, cons, lambda_cons: float = 0.1):
    return sl1 + sl2 + lambda_cons * cons


def dice_loss(pred_prob, target, eps: float = DICE_EPS):
    """Soft Dice loss 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    tracked, (p, t) = _wrap(pred_prob, target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    inter = T.tsum(p * t)
    denom = T.tsum(p) + T.tsum(t) + eps
    return _ret(tracked, 1.0 - (2.0 * inter + eps) / denom)


def ce_loss(logits, labels):
    """Mean cross-entropy of integer ``labels`` under row-wise ``logits`` (B, C) or (C,)."""
    tracked, (z,) = _wrap(logits)
    if z.data.ndim == 1:
        z = T.reshape(z, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != z.shape[0]:
        raise ValueError("one label per logits row required")
    picked = T.index(z, (np.arange(z.shape[0]), labels))
    return _ret(tracked, T.tmean(T.logsumexp(z, axis=1) - picked))
