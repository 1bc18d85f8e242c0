"""Convolutional feature-pyramid encoder and the binary checkpoint format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import engine as E
from .engine import ShapeError, Tensor

CHECKPOINT_MAGIC = b"FWCK"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    levels: int = 5
    embed_dim: int = 32
    base_channels: int = 8
    kernel_size: int = 3
    leaky_slope: float = 0.1
    in_channels: int = 3

    def __post_init__(self):
        if self.levels < 1 or self.embed_dim < 1 or self.base_channels < 1:
            raise ValueError("levels, embed_dim and base_channels must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")

    def channels(self, level: int) -> int:
        """Conv feature width at ``level`` (1 = coarsest)."""
        return self.base_channels * 2 ** (self.levels - level)

    def level_shape(self, height: int, width: int, level: int) -> tuple[int, int]:
        factor = 2 ** (self.levels - level + 1)
        return -(-height // factor), -(-width // factor)


@dataclass
class FeaturePyramid:
    """Per-level embeddings and conv features for a batch of frames.

    ``embeddings[l - 1]`` has shape ``(N, h_l, w_l, d)``; level 1 is coarsest.
    """
    embeddings: list[Tensor]
    features: list[Tensor]
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def levels(self) -> int:
        return len(self.embeddings)

    @property
    def batch(self) -> int:
        return self.embeddings[0].shape[0]

    def embedding(self, level: int, frame: int = 0) -> Tensor:
        key = ("emb", level, frame)
        if key not in self._cache:
            self._cache[key] = self.embeddings[level - 1][frame]
        return self._cache[key]

    def feature(self, level: int, frame: int = 0) -> Tensor:
        key = ("feat", level, frame)
        if key not in self._cache:
            self._cache[key] = self.features[level - 1][frame]
        return self._cache[key]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(config: EncoderConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    params: dict[str, Tensor] = {}
    cin = config.in_channels
    for level in range(config.levels, 0, -1):
        ch = config.channels(level)
        for name, c_in in (("conv_a", cin), ("conv_b", ch)):
            fan_in = k * k * c_in
            params[f"encoder.block{level}.{name}.weight"] = Tensor(
                _uniform(rng, (k, k, c_in, ch), fan_in), requires_grad=True)
            params[f"encoder.block{level}.{name}.bias"] = Tensor(
                _uniform(rng, (ch,), fan_in), requires_grad=True)
        params[f"encoder.head{level}.weight"] = Tensor(
            _uniform(rng, (1, 1, ch, config.embed_dim), ch), requires_grad=True)
        params[f"encoder.head{level}.bias"] = Tensor(
            _uniform(rng, (config.embed_dim,), ch), requires_grad=True)
        cin = ch
    return params


def prepare_images(images, in_channels: int = 3) -> np.ndarray:
    """Coerce ``(H, W)``, ``(H, W, C)`` or ``(N, H, W, C)`` input to NHWC float64."""
    arr = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :, None]
    elif arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected an image or image batch, got shape {arr.shape}")
    if arr.shape[3] == 1 and in_channels > 1:
        arr = np.repeat(arr, in_channels, axis=3)
    if arr.shape[3] != in_channels:
        raise ShapeError(f"expected {in_channels} channels, got {arr.shape[3]}")
    return arr


def encode(images, params: Mapping[str, Tensor], config: EncoderConfig) -> FeaturePyramid:
    """Run the encoder on images scaled to [-1, 1]."""
    x = prepare_images(images, config.in_channels)
    h, w = x.shape[1:3]
    factor = 2 ** config.levels
    if h % factor or w % factor:
        raise ShapeError(f"image size {h}x{w} not divisible by {factor}; pad first")
    feat = Tensor(x)
    embeddings: list[Tensor] = []
    features: list[Tensor] = []
    slope = config.leaky_slope
    for level in range(config.levels, 0, -1):
        pre = f"encoder.block{level}"
        feat = E.leaky_relu(E.conv2d(feat, params[f"{pre}.conv_a.weight"],
                                     params[f"{pre}.conv_a.bias"], stride=2), slope)
        feat = E.leaky_relu(E.conv2d(feat, params[f"{pre}.conv_b.weight"],
                                     params[f"{pre}.conv_b.bias"]), slope)
        emb = E.conv2d(feat, params[f"encoder.head{level}.weight"],
                       params[f"encoder.head{level}.bias"], padding=0)
        embeddings.append(E.l2_normalize(emb))
        features.append(feat)
    return FeaturePyramid(embeddings[::-1], features[::-1])


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Little-endian: magic, version, count, then (name, rank, dims, float64 data) per entry."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * size
    return out


def params_from_arrays(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()}


def infer_config(arrays: Mapping[str, np.ndarray], **overrides) -> EncoderConfig:
    """Recover an EncoderConfig from stored parameter shapes."""
    levels = sum(1 for k in arrays if k.startswith("encoder.head") and k.endswith(".weight"))
    head = arrays[f"encoder.head{levels}.weight"]
    first = arrays[f"encoder.block{levels}.conv_a.weight"]
    cfg = dict(levels=levels, embed_dim=head.shape[3], base_channels=head.shape[2],
               kernel_size=first.shape[0], in_channels=first.shape[2])
    cfg.update(overrides)
    return EncoderConfig(**cfg)
