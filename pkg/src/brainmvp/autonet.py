"""Small 3D encoder-decoder without skip connections, plus a projection head.

Encoder: one stride-2 3x3x3 convolution + activation per stage.
Decoder: mirrored stride-2 transposed convolutions back to the input grid,
then a bias-free 1x1x1 convolution to a single reconstruction channel.
Embedding: global average pool of the bottleneck followed by one affine map.

Optional task heads (used by fine-tuning) sit on the same trunk:
``seg_head`` is a 1x1x1 convolution on the last decoder feature map and
``cls_head`` an affine map on the pooled bottleneck.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tape as T
from .volcore import Volume

CKPT_MAGIC = b"MVPC"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sBBH32sQQ")
_DTYPES = {"float32": 1, "float64": 2}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    activation: str = "silu"
    embed_dim: int = 32
    seg_out: int = 0
    cls_out: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if not self.stage_channels:
            raise ValueError("need at least one encoder stage")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd")
        if self.activation not in T.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; options: {sorted(T.ACTIVATIONS)}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.embed_dim < 1 or self.in_channels < 1:
            raise ValueError("embed_dim and in_channels must be positive")

    @property
    def strides(self) -> tuple[int, ...]:
        return (2,) * len(self.stage_channels)

    @property
    def downsample(self) -> int:
        return 2 ** len(self.stage_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel
        ch = (self.in_channels,) + self.stage_channels
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(len(self.stage_channels)):
            shapes[f"enc{i}.w"] = (ch[i + 1], ch[i], k, k, k)
            shapes[f"enc{i}.b"] = (ch[i + 1],)
        # decoder stage i maps stage_channels[i] back to stage_channels[i-1] (or c0 at the top)
        dec = self.stage_channels[::-1] + (self.stage_channels[0],)
        for i in range(len(self.stage_channels)):
            shapes[f"dec{i}.w"] = (dec[i], dec[i + 1], k, k, k)
            shapes[f"dec{i}.b"] = (dec[i + 1],)
        shapes["out.w"] = (1, self.stage_channels[0], 1, 1, 1)
        shapes["proj.w"] = (self.stage_channels[-1], self.embed_dim)
        shapes["proj.b"] = (self.embed_dim,)
        if self.seg_out:
            shapes["seg_head.w"] = (self.seg_out, self.stage_channels[0], 1, 1, 1)
            shapes["seg_head.b"] = (self.seg_out,)
        if self.cls_out:
            shapes["cls_head.w"] = (self.stage_channels[-1], self.cls_out)
            shapes["cls_head.b"] = (self.cls_out,)
        return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.startswith("dec"):
        # each transposed-conv output sees ~ C_in * k^3 / 8 taps
        return max(1, shape[0] * int(np.prod(shape[2:])) // 8)
    if len(shape) == 5:
        return shape[1] * int(np.prod(shape[2:]))
    return shape[0]


@dataclass
class ModelState:
    config: NetConfig
    params: dict[str, np.ndarray]
    seed: int = 0

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.config.param_shapes()])

    def digest(self) -> str:
        h = hashlib.sha256(self.config.digest())
        for k in self.config.param_shapes():
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def init_state(config: NetConfig, seed: int = 0) -> ModelState:
    """Fan-in-scaled uniform weights, zero biases, deterministic in (config, seed)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    dt = np.dtype(config.dtype)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dt)
        else:
            bound = np.sqrt(6.0 / _fan_in(name, shape))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dt)
    return ModelState(config, params, seed)


def zero_state(config: NetConfig) -> ModelState:
    dt = np.dtype(config.dtype)
    return ModelState(config, {k: np.zeros(s, dtype=dt) for k, s in config.param_shapes().items()})


@dataclass
class NetOutputs:
    reconstruction: T.Tensor        # (N, 1, D, H, W)
    embedding: T.Tensor             # (N, embed_dim)
    pooled: T.Tensor                # (N, C_bottleneck)
    bottleneck: T.Tensor            # (N, C_bottleneck, d, h, w)
    features: T.Tensor              # last decoder feature map (N, C0, D, H, W)
    seg_logits: T.Tensor | None = None
    cls_logits: T.Tensor | None = None


def check_dims(config: NetConfig, dims) -> None:
    f = config.downsample
    if any(d % f for d in dims):
        raise ValueError(f"input dims {tuple(dims)} must be divisible by {f}")


def encode(config: NetConfig, p: dict[str, T.Tensor], x: T.Tensor) -> T.Tensor:
    act = T.ACTIVATIONS[config.activation]
    pad = config.kernel // 2
    h = x
    for i in range(len(config.stage_channels)):
        h = T.conv3d(h, p[f"enc{i}.w"], stride=2, pad=pad)
        h = act(h + T.reshape(p[f"enc{i}.b"], (1, -1, 1, 1, 1)))
    return h


def decode(config: NetConfig, p: dict[str, T.Tensor], z: T.Tensor) -> T.Tensor:
    """Decoder trunk; consumes only the bottleneck tensor."""
    act = T.ACTIVATIONS[config.activation]
    pad = config.kernel // 2
    h = z
    for i in range(len(config.stage_channels)):
        out_spatial = tuple(2 * s for s in h.shape[2:])
        h = T.conv_transpose3d(h, p[f"dec{i}.w"], stride=2, pad=pad, out_spatial=out_spatial)
        h = act(h + T.reshape(p[f"dec{i}.b"], (1, -1, 1, 1, 1)))
    return h


def apply(config: NetConfig, p: dict[str, T.Tensor], x: T.Tensor) -> NetOutputs:
    """Run the network on a batch ``x`` of shape (N, C_in, D, H, W)."""
    if x.data.ndim != 5 or x.shape[1] != config.in_channels:
        raise ValueError(f"expected (N, {config.in_channels}, D, H, W) input, got {x.shape}")
    check_dims(config, x.shape[2:])
    z = encode(config, p, x)
    feats = decode(config, p, z)
    recon = T.conv3d(feats, p["out.w"])
    pooled = T.tmean(z, axis=(2, 3, 4))
    emb = pooled @ p["proj.w"] + p["proj.b"]
    out = NetOutputs(recon, emb, pooled, z, feats)
    if config.seg_out:
        out.seg_logits = T.conv3d(feats, p["seg_head.w"]) + T.reshape(p["seg_head.b"], (1, -1, 1, 1, 1))
    if config.cls_out:
        out.cls_logits = pooled @ p["cls_head.w"] + p["cls_head.b"]
    return out


def _as_batch(config: NetConfig, x) -> np.ndarray:
    dt = np.dtype(config.dtype)
    if isinstance(x, Volume):
        return x.data.astype(dt)[None, None]
    arr = np.asarray(x, dtype=dt)
    if arr.ndim == 3:
        return arr[None, None]
    if arr.ndim == 4:
        return arr[None]
    return arr


def forward(state: ModelState, x) -> tuple[Volume, np.ndarray]:
    """Reconstruction volume and embedding vector for a single input volume."""
    p = {k: T.Tensor(v) for k, v in state.params.items()}
    out = apply(state.config, p, T.Tensor(_as_batch(state.config, x)))
    return Volume(out.reconstruction.data[0, 0]), out.embedding.data[0].copy()


@dataclass
class TapeGradients:
    params: dict[str, np.ndarray]
    input: np.ndarray | None = None
    loss: float = float("nan")


def backward(state: ModelState, x, loss_fn: Callable[[NetOutputs], T.Tensor],
             input_grad: bool = False) -> TapeGradients:
    """Gradients of ``loss_fn(apply(state, x))`` w.r.t. every parameter (and optionally ``x``)."""
    p = T.leaves(state.params.items())
    xt = T.Tensor(_as_batch(state.config, x), requires_grad=input_grad)
    loss = loss_fn(apply(state.config, p, xt))
    if not isinstance(loss, T.Tensor):
        loss = T.Tensor(np.asarray(loss, dtype=xt.dtype))
    if loss.requires_grad:
        loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in p.items()}
    gin = None
    if input_grad:
        gin = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
        if np.ndim(x) == 3 or isinstance(x, Volume):
            gin = gin[0, 0]
    return TapeGradients(grads, gin, float(loss.data))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(state: ModelState, path) -> None:
    """MVPC file: header (magic, version, dtype, config sha256, seed, value count) + payload."""
    cfg = state.config
    dt = np.dtype(cfg.dtype).newbyteorder("<")
    flat = state.flat().astype(dt)
    header = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, _DTYPES[cfg.dtype], 0,
                               cfg.digest(), state.seed, flat.size)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + flat.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, config: NetConfig) -> ModelState:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    if len(buf) < _CKPT_HEADER.size:
        raise CheckpointError("truncated header")
    _, version, code, _, digest, seed, count = _CKPT_HEADER.unpack_from(buf)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if digest != config.digest():
        raise CheckpointError("config hash mismatch")
    if code != _DTYPES[config.dtype]:
        raise CheckpointError("dtype mismatch")
    shapes = config.param_shapes()
    expect = sum(int(np.prod(s)) for s in shapes.values())
    dt = np.dtype(config.dtype).newbyteorder("<")
    if count != expect or len(buf) - _CKPT_HEADER.size != count * dt.itemsize:
        raise CheckpointError("truncated or oversized payload")
    flat = np.frombuffer(buf, dtype=dt, offset=_CKPT_HEADER.size).astype(config.dtype)
    params, i = {}, 0
    for k, s in shapes.items():
        n = int(np.prod(s))
        params[k] = flat[i:i + n].reshape(s).copy()
        i += n
    return ModelState(config, params, int(seed))


def widen_input(state: ModelState, in_channels: int, seg_out: int = 0, cls_out: int = 0,
                seed: int = 0) -> ModelState:
    """Copy of ``state`` accepting ``in_channels`` stacked modalities, with fresh task heads.

    The first convolution's single-channel kernel is replicated over the new
    channels and scaled by 1/in_channels; heads are initialised from ``seed``.
    """
    cfg = state.config
    new_cfg = NetConfig(in_channels, cfg.stage_channels, cfg.kernel, cfg.activation,
                        cfg.embed_dim, seg_out, cls_out, cfg.dtype)
    fresh = init_state(new_cfg, seed)
    params = {}
    for k, shape in new_cfg.param_shapes().items():
        if k == "enc0.w":
            base = state.params["enc0.w"].mean(axis=1, keepdims=True)
            params[k] = (np.repeat(base, in_channels, axis=1) * (cfg.in_channels / in_channels)).astype(cfg.dtype)
        elif k in state.params and state.params[k].shape == shape:
            params[k] = state.params[k].copy()
        else:
            params[k] = fresh.params[k]
    return ModelState(new_cfg, params, seed)
