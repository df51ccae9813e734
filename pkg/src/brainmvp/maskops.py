"""Pixel-level cube masking with cross-modal or template fill.

Sampler contract (so other implementations can reproduce occupancy fields):

* generator: ``numpy.random.Generator(PCG64(seed))`` (``SAMPLER_ID``);
* centres are drawn as flat voxel indices in blocks,
  ``rng.integers(0, D*H*W, size=CENTER_BLOCK)``, consumed in order and unravelled
  row-major into (d, h, w);
* a cube of edge ``r`` centred at ``c`` covers ``c - r//2 .. c - r//2 + r - 1`` on each
  axis, clipped at the volume border;
* masking stops at the first cube after which the union of covered voxels
  reaches ``ceil(p_star * D*H*W)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .volcore import Volume

SAMPLER_ID = "numpy.PCG64/flat-integers-block-512"
CENTER_BLOCK = 512
CENTER_OFFSET = "centered"  # cube spans c - r//2 .. c - r//2 + r - 1


class FillSource(enum.Enum):
    OTHER_MODALITY = "other_modality"
    TEMPLATE = "template"


@dataclass(frozen=True)
class MaskResult:
    masked: Volume
    occupancy: np.ndarray
    fill_source: FillSource
    masked_fraction: float

    @property
    def covered(self) -> int:
        return int(np.count_nonzero(self.occupancy))


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def mask_target(p_star: float, total: int) -> int:
    """Smallest voxel count whose fraction of ``total`` is >= p_star (exact rational)."""
    return math.ceil(Fraction(p_star) * total)


def occupancy_field(dims, r: int, p_star: float, seed) -> np.ndarray:
    """Boolean field of voxels covered by the seeded cube sequence."""
    dims = tuple(int(d) for d in dims)
    if not 1 <= r <= min(dims):
        raise ValueError(f"cube edge r={r} must lie in [1, {min(dims)}]")
    if not 0.0 <= p_star <= 1.0:
        raise ValueError(f"p_star={p_star} outside [0, 1]")
    total = dims[0] * dims[1] * dims[2]
    target = mask_target(p_star, total)
    occ = np.zeros(total, dtype=bool)
    if target == 0:
        return occ.reshape(dims)
    rng = make_rng(seed)
    offs = np.arange(r) - r // 2
    hi = np.array(dims)[None, :, None]
    strides = np.array([dims[1] * dims[2], dims[2], 1])
    buf = np.empty(0, dtype=np.int64)
    covered = 0
    chunk = max(1, -(-target // r ** 3))
    while covered < target:
        if len(buf) < chunk:
            more = -(-(chunk - len(buf)) // CENTER_BLOCK)
            buf = np.concatenate([buf] + [rng.integers(0, total, size=CENTER_BLOCK) for _ in range(more)])
        centers = np.stack(np.unravel_index(buf[:chunk], dims), axis=1)
        buf = buf[chunk:]
        n = chunk
        chunk = min(2 * chunk, 64 * CENTER_BLOCK)
        # only cubes touching an uncovered voxel can add coverage
        useful = _touching(~occ.reshape(dims), offs)[centers[:, 0], centers[:, 1], centers[:, 2]]
        idx = np.flatnonzero(useful)
        coords = centers[idx, :, None] + offs[None, None, :]  # (B', 3, r)
        valid = (coords >= 0) & (coords < hi)
        lin = np.where(valid, coords * strides[None, :, None], -(total * 4))
        flat = (lin[:, 0, :, None, None] + lin[:, 1, None, :, None]
                + lin[:, 2, None, None, :]).reshape(len(idx), r ** 3)
        cube_of = np.broadcast_to(idx[:, None], flat.shape).ravel()
        flat = flat.ravel()
        keep = flat >= 0
        keep[keep] = ~occ[flat[keep]]
        # first cube (in draw order) to reach each still-uncovered voxel
        first = np.full(total, n, dtype=np.int64)
        np.minimum.at(first, flat[keep], cube_of[keep])
        vox = np.flatnonzero(first < n)
        first_cube = first[vox]
        gained = np.cumsum(np.bincount(first_cube, minlength=n))
        need = target - covered
        if gained[-1] >= need:
            stop = int(np.searchsorted(gained, need))  # index of the terminating cube
            occ[vox[first_cube <= stop]] = True
            covered += int(gained[stop])
        else:
            occ[vox] = True
            covered += int(gained[-1])
    return occ.reshape(dims)


def _touching(uncovered: np.ndarray, offs: np.ndarray) -> np.ndarray:
    """Centres whose cube (``c + offs`` per axis) contains an uncovered voxel."""
    out = uncovered
    for axis in range(3):
        acc = np.zeros_like(out)
        n = out.shape[axis]
        for o in offs:
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if o >= 0:
                src[axis], dst[axis] = slice(o, n), slice(0, n - o)
            else:
                src[axis], dst[axis] = slice(0, n + o), slice(-o, n)
            acc[tuple(dst)] |= out[tuple(src)]
        out = acc
    return out


def _apply(x: Volume, fill: Volume, r: int, p_star: float, seed, source: FillSource) -> MaskResult:
    if x.dims != fill.dims:
        raise ValueError(f"shape mismatch: input {x.dims} vs fill {fill.dims}")
    occ = occupancy_field(x.dims, r, p_star, seed)
    fill_data = fill.data.astype(x.data.dtype, copy=False)
    masked = Volume(np.where(occ, fill_data, x.data))
    occ.setflags(write=False)
    frac = np.count_nonzero(occ) / occ.size
    return MaskResult(masked, occ, source, float(frac))


def cross_modal_mask(x: Volume, fill: Volume, r: int, p_star: float, seed) -> MaskResult:
    """Replace cubes of ``x`` with the co-located content of another modality."""
    return _apply(x, fill, r, p_star, seed, FillSource.OTHER_MODALITY)


def distill_mask(x: Volume, template: Volume, r: int, p_star: float, seed) -> MaskResult:
    """Replace cubes of ``x`` with the co-located voxels of a modality template."""
    return _apply(x, template, r, p_star, seed, FillSource.TEMPLATE)


def desk_cube_edge(crop_edge: int, ref_r: int = 8, ref_crop: int = 96) -> int:
    """Cube edge scaled to keep the 8/96 cube-to-crop ratio, never below 2."""
    return max(2, math.floor(ref_r * crop_edge / ref_crop + 0.5))
