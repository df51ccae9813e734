"""Strict YAML run configuration and the run manifest.

A config file is a key/value tree with the sections below; every key maps
onto a field of the matching dataclass and unknown keys are errors.

    seed: 0
    data: {root: null, n: 64, generator: {...GenConfig fields}}
    model: {...NetConfig fields}
    pretrain: {...PretrainConfig fields, weights: {...LossWeights fields}}
    finetune: {...FinetuneConfig fields, pretrained: <pretrain out dir>, seeds: [0]}
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .autonet import NetConfig
from .downstream import FinetuneConfig
from .losses import LossWeights
from .synthgen import ConfigError, GenConfig
from .trainer import PretrainConfig

__all__ = ["ConfigError", "RunConfig", "RunManifest", "load_config", "parse_config"]

# run-level seed owns these; they are not settable inside sections
_SEEDED = {"seed"}


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _check(section: str, d, allowed: set[str]) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    return dict(d)


def _build(section: str, cls, d: dict):
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r}: {e}") from e


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_root: str | None = None
    n_studies: int = 64
    generator: GenConfig = field(default_factory=GenConfig)
    model: NetConfig = field(default_factory=NetConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    pretrained: str | None = None
    finetune_seeds: tuple[int, ...] = (0,)

    def to_dict(self) -> dict:
        pre = self.pretrain.to_dict()
        pre.pop("seed", None)
        ft = self.finetune.to_dict()
        ft.pop("seed", None)
        ft.update(pretrained=self.pretrained, seeds=list(self.finetune_seeds))
        return {"seed": self.seed,
                "data": {"root": self.data_root, "n": self.n_studies, "generator": self.generator.to_dict()},
                "model": self.model.to_dict(), "pretrain": pre, "finetune": ft}

    def with_seed(self, seed: int) -> "RunConfig":
        return parse_config({**self.to_dict(), "seed": int(seed)})


def parse_config(doc: dict | None) -> RunConfig:
    doc = _check("<root>", doc or {}, {"seed", "data", "model", "pretrain", "finetune"})
    seed = int(doc.get("seed", 0))
    data = _check("data", doc.get("data"), {"root", "n", "generator"})
    gen = _build("data.generator", GenConfig,
                 _check("data.generator", data.get("generator"), _fields(GenConfig)))
    model = _build("model", NetConfig, _check("model", doc.get("model"), _fields(NetConfig)))
    pre = _check("pretrain", doc.get("pretrain"), _fields(PretrainConfig) - _SEEDED)
    if "weights" in pre:
        pre["weights"] = _build("pretrain.weights", LossWeights,
                                _check("pretrain.weights", pre["weights"], _fields(LossWeights)))
    pre = _build("pretrain", PretrainConfig, {**pre, "seed": seed})
    ft = _check("finetune", doc.get("finetune"), (_fields(FinetuneConfig) - _SEEDED) | {"pretrained", "seeds"})
    pretrained = ft.pop("pretrained", None)
    seeds = tuple(int(s) for s in ft.pop("seeds", [seed]))
    ft = _build("finetune", FinetuneConfig, {**ft, "seed": seed})
    n = data.get("n", 64)
    if not isinstance(n, int) or n < 0:
        raise ConfigError("data.n must be a non-negative integer")
    return RunConfig(seed, data.get("root"), n, gen, model, pre, ft, pretrained, seeds)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    return parse_config(doc)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    code_version: str
    started: float = field(default_factory=time.time)
    finished: float | None = None
    outputs: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "run_manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, out_dir) -> "RunManifest":
        path = Path(out_dir) / "run_manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"run manifest not found: {path}")
        return cls(**json.loads(path.read_text()))
