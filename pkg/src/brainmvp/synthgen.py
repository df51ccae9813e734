"""Deterministic synthetic multi-modal studies.

Each study draws one latent anatomy field ``A`` in [0, 1] (a jittered brain-like
ellipsoid with inner structures and random smooth blobs).  Modality ``m`` is
``clip(curve_m(A) + lesion_m + noise, 0, 1)`` where ``curve_m`` is a strictly
monotone piecewise-linear map, so all modalities share structure and differ in
appearance.  An optional ellipsoidal lesion shifts each modality by its own
signed contrast and provides the segmentation / classification labels.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .volcore import DEFAULT_MODALITIES, ModalityRegistry, Study, Volume, write_manifest


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    dims: tuple[int, int, int] = (16, 16, 16)
    num_modalities: int = 3
    registry: tuple[str, ...] = DEFAULT_MODALITIES
    blob_count: int = 4
    blob_radius: tuple[float, float] = (1.5, 3.0)
    blob_amplitude: float = 0.15
    smoothness: float = 0.8
    jitter: float = 1.0
    curve_knots: int = 4
    contrast_signs: tuple[int, ...] = (1, -1, 1, 1, -1, 1, 1, -1)
    curves: tuple[tuple[float, ...], ...] | None = None
    noise_sigma: float = 0.02
    lesion_enabled: bool = True
    lesion_prob: float = 0.75
    lesion_radius: tuple[float, float] = (1.5, 3.0)
    lesion_contrast: tuple[float, ...] = (0.45, 0.35, -0.4, 0.3, 0.4, -0.35, 0.3, 0.35)
    cls_volume_threshold: float = 50.0
    divisible_by: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("dims", "registry", "blob_radius", "contrast_signs", "lesion_radius",
                     "lesion_contrast"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.curves is not None:
            object.__setattr__(self, "curves", tuple(tuple(float(v) for v in c) for c in self.curves))
        self.validate()

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ConfigError(f"dims must be 3 values >= 4, got {self.dims}")
        if any(d % self.divisible_by for d in self.dims):
            raise ConfigError(f"dims {self.dims} must be divisible by {self.divisible_by}")
        if not 1 <= self.num_modalities <= len(self.registry):
            raise ConfigError("num_modalities must be between 1 and the registry size")
        if len(self.contrast_signs) < self.num_modalities or len(self.lesion_contrast) < self.num_modalities:
            raise ConfigError("need one contrast sign and lesion contrast per modality")
        if self.curves is not None:
            if len(self.curves) < self.num_modalities:
                raise ConfigError("need one curve per modality")
            for c in self.curves:
                if len(c) < 2 or not (np.all(np.diff(c) > 0) or np.all(np.diff(c) < 0)):
                    raise ConfigError(f"curve {c} is not strictly monotone")
                if min(c) < 0 or max(c) > 1:
                    raise ConfigError(f"curve {c} leaves [0, 1]")
        half = min(self.dims) / 2
        if self.lesion_radius[0] <= 0 or self.lesion_radius[1] < self.lesion_radius[0]:
            raise ConfigError("lesion_radius must be an increasing positive range")
        if self.lesion_radius[1] >= half * 0.5:
            raise ConfigError(f"lesion radius {self.lesion_radius[1]} does not fit dims {self.dims}")
        if self.blob_radius[0] <= 0 or self.blob_radius[1] >= half:
            raise ConfigError(f"blob radius range {self.blob_radius} does not fit dims {self.dims}")
        if self.noise_sigma < 0 or not 0 <= self.lesion_prob <= 1:
            raise ConfigError("noise_sigma must be >= 0 and lesion_prob in [0, 1]")

    @property
    def modality_names(self) -> tuple[str, ...]:
        return self.registry[:self.num_modalities]

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def transfer_curves(cfg: GenConfig) -> list[np.ndarray]:
    """Knot values (evenly spaced over [0, 1]) of each modality's transfer curve."""
    if cfg.curves is not None:
        return [np.asarray(c, dtype=np.float64) for c in cfg.curves[:cfg.num_modalities]]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0FFEE]))
    out = []
    for m in range(cfg.num_modalities):
        inc = rng.uniform(0.3, 1.0, size=cfg.curve_knots)
        y = np.concatenate([[0.0], np.cumsum(inc)])
        y = 0.05 + 0.9 * y / y[-1]
        if cfg.contrast_signs[m] < 0:
            y = y[::-1].copy()
        out.append(y)
    return out


def apply_curve(knots: np.ndarray, a: np.ndarray) -> np.ndarray:
    xs = np.linspace(0.0, 1.0, len(knots))
    return np.interp(a, xs, knots)


def _grid(dims):
    return np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")


def _ellipsoid(grid, center, radii) -> np.ndarray:
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def anatomy_field(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    dims = np.array(cfg.dims, dtype=np.float64)
    grid = _grid(cfg.dims)
    mid = (dims - 1) / 2
    j = cfg.jitter
    brain_c = mid + rng.uniform(-j, j, 3)
    brain_r = dims * 0.42 * rng.uniform(0.92, 1.05, 3)
    a = np.where(_ellipsoid(grid, brain_c, brain_r), 0.45, 0.0)
    inner_r = brain_r * 0.6 * rng.uniform(0.9, 1.1, 3)
    a = a + np.where(_ellipsoid(grid, brain_c + rng.uniform(-j, j, 3) * 0.5, inner_r), 0.35, 0.0)
    for side in (-1, 1):
        vc = brain_c + np.array([0.0, side * dims[1] * 0.12, 0.0]) + rng.uniform(-j, j, 3) * 0.5
        vr = dims * np.array([0.14, 0.06, 0.1]) * rng.uniform(0.85, 1.15, 3)
        a = np.where(_ellipsoid(grid, vc, vr), 0.15, a)
    for _ in range(cfg.blob_count):
        c = brain_c + rng.uniform(-0.6, 0.6, 3) * brain_r
        r = rng.uniform(*cfg.blob_radius)
        amp = rng.uniform(-cfg.blob_amplitude, cfg.blob_amplitude)
        d2 = sum((g - ci) ** 2 for g, ci in zip(grid, c))
        a = a + amp * np.exp(-d2 / (2 * r * r)) * (a > 0)
    if cfg.smoothness > 0:
        a = gaussian_filter(a, cfg.smoothness, mode="constant")
    return np.clip(a, 0.0, 1.0)


def lesion_class(radii, present: bool, threshold: float) -> int:
    """0 = no lesion, 1 = small, 2 = large (ellipsoid volume vs ``threshold``)."""
    if not present:
        return 0
    vol = 4.0 / 3.0 * np.pi * float(np.prod(radii))
    return 1 if vol < threshold else 2


def study_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


def gen_study(cfg: GenConfig, study_index: int) -> Study:
    rng = np.random.default_rng(study_seed(cfg.seed, study_index))
    a = anatomy_field(cfg, rng)
    curves = transfer_curves(cfg)
    grid = _grid(cfg.dims)
    dims = np.array(cfg.dims, dtype=np.float64)

    present = cfg.lesion_enabled and rng.random() < cfg.lesion_prob
    lesion = np.zeros(cfg.dims, dtype=bool)
    meta: dict = {"lesion": None}
    lesion_radii = np.zeros(3)
    if cfg.lesion_enabled:
        # always consume the same draws so studies stay aligned across lesion_prob settings
        center = (dims - 1) / 2 + rng.uniform(-0.2, 0.2, 3) * dims
        lesion_radii = rng.uniform(*cfg.lesion_radius, size=3)
        if present:
            lesion = _ellipsoid(grid, center, lesion_radii)
            meta["lesion"] = {"center": center.tolist(), "radii": lesion_radii.tolist()}

    mods = {}
    for m, name in enumerate(cfg.modality_names):
        v = apply_curve(curves[m], a)
        if present:
            v = v + cfg.lesion_contrast[m] * lesion
        if cfg.noise_sigma > 0:
            v = v + rng.normal(0.0, cfg.noise_sigma, cfg.dims)
        mods[name] = Volume(np.clip(v, 0.0, 1.0).astype(np.float32))
    seg = Volume(lesion.astype(np.float32)) if cfg.lesion_enabled else None
    cls = lesion_class(lesion_radii, present, cfg.cls_volume_threshold) if cfg.lesion_enabled else None
    return Study(f"study{study_index:05d}", mods, seg, cls, meta)


def split_sizes(n: int, ratios=(6, 1, 3)) -> tuple[int, int, int]:
    tot = sum(ratios)
    n_train = int(np.floor(n * ratios[0] / tot + 0.5))
    n_val = min(n - n_train, int(np.floor(n * ratios[1] / tot + 0.5)))
    return n_train, n_val, n - n_train - n_val


def make_splits(ids: list[str], seed: int) -> dict[str, list[str]]:
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B117])).permutation(len(ids))
    a, b, _ = split_sizes(len(ids))
    order = [ids[i] for i in perm]
    return {"train": order[:a], "val": order[a:a + b], "test": order[a + b:]}


def gen_dataset(cfg: GenConfig, n: int, out_dir=None, workers: int = 1) -> tuple[list[Study], dict[str, list[str]]]:
    """Generate ``n`` studies with 6:1:3 train/val/test splits; optionally write them to disk."""
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            studies = list(pool.map(lambda i: gen_study(cfg, i), range(n)))
    else:
        studies = [gen_study(cfg, i) for i in range(n)]
    splits = make_splits([s.study_id for s in studies], cfg.seed)
    if out_dir is not None:
        write_manifest(studies, out_dir, ModalityRegistry(cfg.registry), splits,
                       extra={"generator": cfg.to_dict()})
    return studies, splits


def population_mean(studies: list[Study], modality: str) -> np.ndarray:
    vols = [s.modalities[modality].data.astype(np.float64) for s in studies if modality in s.modalities]
    return np.mean(vols, axis=0)


def gradient_magnitude(v: np.ndarray) -> np.ndarray:
    g = np.gradient(np.asarray(v, dtype=np.float64))
    return np.sqrt(sum(gi * gi for gi in g))
