"""Vanilla ViT backbone: configuration, patch embedding, pre-norm blocks."""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class ConfigError(ValueError):
    """Invalid model/train/data configuration."""


class FreezePolicy(str, enum.Enum):
    ADAPTER_ONLY = "AdapterOnly"
    ADAPTER_PLUS_BLOCK1_MHSA = "AdapterPlusBlock1MHSA"
    LINEAR_PROBE = "LinearProbe"
    FULL_TUNING = "FullTuning"


@dataclass
class ModelConfig:
    blocks: int = 12
    width: int = 768
    mlp_dim: int = 3072
    heads: int = 12
    patch: int = 16
    image: tuple = (224, 224)
    channels: int = 3
    stages: int = 3
    gba_dim: int = 64
    lsa_heads: int = 6
    pyramid_ratios: tuple = (8, 16, 32)
    num_classes: int = 2
    freeze_policy: FreezePolicy = FreezePolicy.ADAPTER_ONLY
    # ablation switches; both on is the full adapter model
    use_gba: bool = True
    use_lsa: bool = True
    # LSA-H widths: base, conv1, conv2, conv3
    lsa_channels: tuple = (64, 128, 256, 256)
    dtype: str = "f32"

    def __post_init__(self):
        self.image = tuple(int(v) for v in self.image)
        self.pyramid_ratios = tuple(int(v) for v in self.pyramid_ratios)
        self.lsa_channels = tuple(int(v) for v in self.lsa_channels)
        self.freeze_policy = FreezePolicy(self.freeze_policy)
        self.validate()

    @property
    def num_patches(self) -> int:
        return (self.image[0] // self.patch) * (self.image[1] // self.patch)

    @property
    def num_spatial_tokens(self) -> int:
        h, w = self.image
        return sum((h // r) * (w // r) for r in self.pyramid_ratios)

    @property
    def np_dtype(self):
        return ad.DTYPES[self.dtype]

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for name in ("blocks", "width", "mlp_dim", "heads", "patch", "channels", "stages",
                     "gba_dim", "lsa_heads", "num_classes"):
            need(int(getattr(self, name)) > 0, f"{name} must be positive")
        need(len(self.image) == 2, "image must be (height, width)")
        need(len(self.pyramid_ratios) == 3, "pyramid_ratios must have three entries")
        need(len(self.lsa_channels) == 4, "lsa_channels must have four entries")
        need(self.blocks % self.stages == 0, f"blocks ({self.blocks}) not divisible by stages ({self.stages})")
        need(self.width % self.heads == 0, f"width ({self.width}) not divisible by heads ({self.heads})")
        need(self.width % self.lsa_heads == 0,
             f"width ({self.width}) not divisible by lsa_heads ({self.lsa_heads})")
        need(self.gba_dim < self.width, "gba_dim must be smaller than width (bottleneck)")
        for extent in self.image:
            need(extent % self.patch == 0, f"image extent {extent} not divisible by patch {self.patch}")
            for r in self.pyramid_ratios:
                need(extent % r == 0, f"image extent {extent} not divisible by pyramid ratio {r}")
        r1, r2, r3 = self.pyramid_ratios
        need(r1 % 4 == 0 and r1 >= 4, "first pyramid ratio must be a multiple of 4 (base network downsamples by 4)")
        need(r2 % r1 == 0 and r3 % r2 == 0, "pyramid ratios must each divide the next")
        need(self.dtype in ad.DTYPES, f"dtype must be one of {sorted(ad.DTYPES)}")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            elif isinstance(v, FreezePolicy):
                v = v.value
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- parameters


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +/- 2 std (resampling out-of-range draws).

    ``rng=None`` returns zeros: used when only shapes matter (parameter counting).
    """
    if rng is None:
        return np.zeros(shape, dtype)
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


@dataclass
class Linear:
    weight: Tensor  # (in, out)
    bias: Tensor

    @classmethod
    def init(cls, rng, din: int, dout: int, dtype, zero: bool = False, std: float = 0.02) -> "Linear":
        w = np.zeros((din, dout), dtype) if zero else trunc_normal(rng, (din, dout), std, dtype)
        return cls(Tensor(w), Tensor(np.zeros(dout, dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, d: int, dtype) -> "LayerNormParams":
        return cls(Tensor(np.ones(d, dtype)), Tensor(np.zeros(d, dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, eps=1e-6)


@dataclass
class PatchEmbedParams:
    proj: Linear  # (C*P*P, D)
    pos: Tensor  # (K, D)


@dataclass
class AttentionParams:
    qkv: Linear  # D -> 3D
    proj: Linear  # D -> D


@dataclass
class MlpParams:
    fc1: Linear
    fc2: Linear


@dataclass
class BlockParams:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    mlp: MlpParams


def init_patch_embed(rng, cfg: ModelConfig) -> PatchEmbedParams:
    dt = cfg.np_dtype
    fan_in = cfg.channels * cfg.patch * cfg.patch
    return PatchEmbedParams(
        proj=Linear.init(rng, fan_in, cfg.width, dt),
        pos=Tensor(trunc_normal(rng, (cfg.num_patches, cfg.width), 0.02, dt)),
    )


def init_block(rng, cfg: ModelConfig, zero_out: bool = False) -> BlockParams:
    dt, d = cfg.np_dtype, cfg.width
    return BlockParams(
        ln1=LayerNormParams.init(d, dt),
        attn=AttentionParams(
            qkv=Linear.init(rng, d, 3 * d, dt),
            proj=Linear.init(rng, d, d, dt, zero=zero_out),
        ),
        ln2=LayerNormParams.init(d, dt),
        mlp=MlpParams(
            fc1=Linear.init(rng, d, cfg.mlp_dim, dt),
            fc2=Linear.init(rng, cfg.mlp_dim, d, dt, zero=zero_out),
        ),
    )


# ---------------------------------------------------------------- forward pieces


def patch_embed(image: Tensor, params: PatchEmbedParams, patch: int) -> Tensor:
    """Split (B, C, H, W) into non-overlapping patches and project each to D."""
    B, C, H, W = image.shape
    if H % patch or W % patch:
        raise ShapeError(f"image extent {(H, W)} not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    x = ad.reshape(image, (B, C, gh, patch, gw, patch))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
    x = ad.reshape(x, (B, gh * gw, C * patch * patch))
    x = params.proj(x)
    if params.pos.shape[0] != gh * gw:
        raise ShapeError(f"positional embedding holds {params.pos.shape[0]} tokens, image yields {gh * gw}")
    return ad.add(x, params.pos)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, probs_out: Optional[list] = None) -> Tensor:
    """Scaled dot-product attention; q is (B, Kq, D), k and v are (B, Kv, D)."""
    B, Kq, D = q.shape
    Kv = k.shape[1]
    if D % heads:
        raise ShapeError(f"width {D} not divisible by {heads} heads")
    dh = D // heads
    qh = ad.transpose(ad.reshape(q, (B, Kq, heads, dh)), (0, 2, 1, 3))
    kt = ad.transpose(ad.reshape(k, (B, Kv, heads, dh)), (0, 2, 3, 1))
    vh = ad.transpose(ad.reshape(v, (B, Kv, heads, dh)), (0, 2, 1, 3))
    scores = ad.scale(ad.matmul(qh, kt), 1.0 / np.sqrt(dh))
    probs = ad.softmax(scores, axis=-1)
    if probs_out is not None:
        probs_out.append(probs.data)
    ctx = ad.matmul(probs, vh)  # (B, H, Kq, dh)
    return ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, Kq, D))


def mhsa_block(f: Tensor, params: BlockParams, heads: int, probs_out: Optional[list] = None) -> Tensor:
    """f' = f + MHSA(LN(f))."""
    D = f.shape[-1]
    if D % heads:
        raise ShapeError(f"width {D} not divisible by {heads} heads")
    h = params.ln1(f)
    qkv = params.attn.qkv(h)
    q = ad.narrow(qkv, 0, D)
    k = ad.narrow(qkv, D, 2 * D)
    v = ad.narrow(qkv, 2 * D, 3 * D)
    ctx = attention(q, k, v, heads, probs_out)
    return ad.add(f, params.attn.proj(ctx))


def mlp_block(f_prime: Tensor, params: BlockParams, adapter_delta: Optional[Tensor] = None) -> Tensor:
    """MLP(LN(f')) + f', plus the adapter delta when one is given."""
    if adapter_delta is not None and adapter_delta.shape != f_prime.shape:
        raise ShapeError(f"adapter delta shape {adapter_delta.shape} != block input {f_prime.shape}")
    h = params.ln2(f_prime)
    h = params.mlp.fc2(ad.gelu(params.mlp.fc1(h)))
    out = ad.add(h, f_prime)
    if adapter_delta is not None:
        out = ad.add(out, adapter_delta)
    return out


def partition_stages(num_blocks: int, num_stages: int) -> list[range]:
    if num_stages <= 0 or num_blocks % num_stages:
        raise ConfigError(f"{num_blocks} blocks cannot be split evenly into {num_stages} stages")
    per = num_blocks // num_stages
    return [range(i * per, (i + 1) * per) for i in range(num_stages)]


def block_param_count(width: int, mlp_dim: int) -> int:
    d = width
    return 2 * (2 * d) + (3 * d * d + 3 * d) + (d * d + d) + (d * mlp_dim + mlp_dim) + (mlp_dim * d + d)
