"""Volumetric data types, intensity normalization, cropping and the MVPV format.

MVPV v1 layout (all little-endian)::

    0..3   b"MVPV"
    4      version (1)
    5      dtype code (1 = float32, 2 = float64)
    6..7   reserved, zero
    8..19  uint32 D, H, W
    20..   D*H*W payload values, row-major (W fastest)
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MVPV"
VERSION = 1
HEADER = struct.Struct("<4sBBH3I")
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}

DEFAULT_MODALITIES = ("T1", "T1CE", "T2", "FLAIR", "DWI", "ADC", "MRA", "PD")


class VolumeFormatError(ValueError):
    """Base class for MVPV parse failures."""


class BadMagicError(VolumeFormatError):
    pass


class UnsupportedVersionError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class DimOverflowError(VolumeFormatError):
    pass


class Volume:
    """An immutable single-channel 3D scalar field.

    ``data`` is stored as float32 unless a float64 array is passed explicitly
    (the 64-bit compute mode used by gradient checks).
    """

    __slots__ = ("_data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _default_dtype(data), copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"Volume needs 3 positive dims, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Volume values must be finite")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def zeros(cls, dims, dtype=np.float32) -> "Volume":
        return cls(np.zeros(tuple(dims), dtype=dtype))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self._data.shape)  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return int(self._data.size)

    def __array__(self, dtype=None, copy=None):
        return self._data if dtype is None else self._data.astype(dtype)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (self._data.dtype == other._data.dtype
                and self._data.shape == other._data.shape
                and self._data.tobytes() == other._data.tobytes())

    def __hash__(self):
        return hash((self._data.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"Volume(dims={self.dims}, dtype={self._data.dtype})"


def _default_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype == np.float64:
        return np.float64
    if isinstance(data, Volume):
        return data.data.dtype
    return np.float32


@dataclass(frozen=True)
class ModalityRegistry:
    names: tuple[str, ...] = DEFAULT_MODALITIES

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise ValueError("registry needs at least 2 modalities")
        if len(set(self.names)) != len(self.names):
            raise ValueError("modality names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name) -> bool:
        return name in self.names

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class Study:
    study_id: str
    modalities: dict[str, Volume]
    seg_label: Volume | None = None
    cls_label: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.modalities:
            raise ValueError("a Study needs at least one modality")
        dims = {v.dims for v in self.modalities.values()}
        if self.seg_label is not None:
            dims.add(self.seg_label.dims)
        if len(dims) != 1:
            raise ValueError(f"all volumes of study {self.study_id!r} must share dims, got {dims}")
        if self.cls_label is not None and self.cls_label < 0:
            raise ValueError("cls_label must be non-negative")

    @property
    def dims(self) -> tuple[int, int, int]:
        return next(iter(self.modalities.values())).dims

    @property
    def modality_names(self) -> list[str]:
        return list(self.modalities)

    def check_registry(self, registry: ModalityRegistry) -> None:
        unknown = [m for m in self.modalities if m not in registry]
        if unknown:
            raise ValueError(f"study {self.study_id!r} has modalities outside the registry: {unknown}")


# ---------------------------------------------------------------- normalization / crop

def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th smallest value (1-based, min rank 1)."""
    n = sorted_values.size
    rank = max(1, int(np.ceil(q * n - 1e-12)))
    return float(sorted_values[min(rank, n) - 1])


def normalize_percentile(v: Volume, lo_pct: float = 0.01, hi_pct: float = 0.99) -> Volume:
    """Clip to the [lo_pct, hi_pct] nearest-rank percentiles and rescale to [0, 1].

    A degenerate clip range (p_lo == p_hi) gives an all-zeros volume.
    """
    if not 0.0 <= lo_pct < hi_pct <= 1.0:
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 1, got {lo_pct}, {hi_pct}")
    x = v.data.astype(np.float64)
    s = np.sort(x, axis=None)
    p_lo, p_hi = nearest_rank(s, lo_pct), nearest_rank(s, hi_pct)
    if p_hi <= p_lo:
        return Volume(np.zeros_like(v.data))
    out = (np.clip(x, p_lo, p_hi) - p_lo) / (p_hi - p_lo)
    return Volume(out.astype(v.data.dtype))


def crop(v: Volume, origin, size) -> Volume:
    origin, size = tuple(int(o) for o in origin), tuple(int(s) for s in size)
    if len(origin) != 3 or len(size) != 3:
        raise ValueError("origin and size must have 3 components")
    for o, s, d in zip(origin, size, v.dims):
        if o < 0 or s < 1 or o + s > d:
            raise IndexError(f"crop origin={origin} size={size} outside dims {v.dims}")
    (a, b, c), (p, q, r) = origin, size
    return Volume(v.data[a:a + p, b:b + q, c:c + r])


def crop_study(study: Study, origin, size) -> Study:
    return Study(
        study.study_id,
        {m: crop(v, origin, size) for m, v in study.modalities.items()},
        crop(study.seg_label, origin, size) if study.seg_label is not None else None,
        study.cls_label,
        dict(study.meta),
    )


def sample_crop_origin(study: Study, size, rng: np.random.Generator,
                       fg_threshold: float = 0.05, fg_prob: float = 0.5) -> tuple[int, int, int]:
    """Crop origin centred on a foreground voxel with probability ``fg_prob``, else uniform.

    Foreground is any voxel where the mean over modalities exceeds ``fg_threshold``.
    """
    dims = study.dims
    hi = [d - s for d, s in zip(dims, size)]
    if min(hi) < 0:
        raise IndexError(f"crop size {tuple(size)} larger than study dims {dims}")
    if all(h == 0 for h in hi):
        return (0, 0, 0)
    if rng.random() < fg_prob:
        mean = np.mean([v.data for v in study.modalities.values()], axis=0)
        fg = np.argwhere(mean > fg_threshold)
        if len(fg):
            c = fg[rng.integers(len(fg))]
            return tuple(int(np.clip(ci - s // 2, 0, h)) for ci, s, h in zip(c, size, hi))
    return tuple(int(rng.integers(0, h + 1)) for h in hi)


# ---------------------------------------------------------------- MVPV I/O

def encode_volume(v: Volume | np.ndarray) -> bytes:
    arr = v.data if isinstance(v, Volume) else np.asarray(v)
    code = _CODE_OF.get(arr.dtype)
    if code is None:
        arr = arr.astype(np.float32)
        code = 1
    d, h, w = arr.shape
    return HEADER.pack(MAGIC, VERSION, code, 0, d, h, w) + arr.astype(DTYPE_CODES[code]).tobytes(order="C")


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("bad magic")
    if len(buf) < HEADER.size:
        raise TruncatedPayloadError("truncated header")
    _, version, code, _, d, h, w = HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if code not in DTYPE_CODES:
        raise VolumeFormatError(f"unknown dtype code {code}")
    n = d * h * w
    if n == 0 or n > 2**31 - 1:
        raise DimOverflowError(f"dims {d}x{h}x{w} out of range")
    dt = DTYPE_CODES[code]
    need = n * dt.itemsize
    payload = memoryview(buf)[HEADER.size:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"truncated payload: need {need} bytes, got {len(payload)}")
    if len(payload) > need:
        raise VolumeFormatError(f"trailing bytes after payload ({len(payload) - need})")
    arr = np.frombuffer(payload, dtype=dt, count=n).reshape(d, h, w)
    return Volume(arr.astype(dt.newbyteorder("=")))


def save_volume(v: Volume | np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_volume(v))
    os.replace(tmp, path)


def load_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())


# ---------------------------------------------------------------- study manifest

def write_manifest(studies: list[Study], root, registry: ModalityRegistry,
                   splits: Mapping[str, list[str]] | None = None, extra: dict | None = None) -> Path:
    """Write each study's volumes under ``root/<study_id>/`` plus ``root/manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in studies:
        entry = {"study_id": s.study_id, "modalities": {}}
        for m, v in s.modalities.items():
            rel = f"{s.study_id}/{m}.mvpv"
            save_volume(v, root / rel)
            entry["modalities"][m] = rel
        if s.seg_label is not None:
            rel = f"{s.study_id}/seg.mvpv"
            save_volume(s.seg_label, root / rel)
            entry["seg_label"] = rel
        if s.cls_label is not None:
            entry["cls_label"] = int(s.cls_label)
        if s.meta:
            entry["meta"] = s.meta
        entries.append(entry)
    doc = {"format": "mvp-manifest", "version": 1, "registry": list(registry.names),
           "studies": entries, "splits": {k: list(v) for k, v in (splits or {}).items()}}
    if extra:
        doc.update(extra)
    path = root / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> tuple[list[Study], ModalityRegistry, dict[str, list[str]]]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    root = path.parent
    registry = ModalityRegistry(tuple(doc["registry"]))
    studies = []
    for e in doc["studies"]:
        mods = {}
        for m, rel in e["modalities"].items():
            p = root / rel
            if not p.exists():
                raise FileNotFoundError(f"volume file missing: {p}")
            mods[m] = load_volume(p)
        seg = load_volume(root / e["seg_label"]) if "seg_label" in e else None
        st = Study(e["study_id"], mods, seg, e.get("cls_label"), e.get("meta", {}))
        st.check_registry(registry)
        studies.append(st)
    return studies, registry, doc.get("splits", {})
