"""Locally-aware Spatial Adapter: convolutional pyramid head, cross-attention
interactions with the ViT stream, and the linear classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .vit import LayerNormParams, Linear, ModelConfig, attention, trunc_normal

BN_EPS = 1e-5


@dataclass
class ConvBN:
    """3x3 convolution (no bias) followed by batch norm; ReLU is applied by the caller."""

    weight: Tensor
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    stride: int = 1

    @classmethod
    def init(cls, rng, cin: int, cout: int, stride: int, dtype, k: int = 3) -> "ConvBN":
        std = np.sqrt(2.0 / (cout * k * k))  # He init, fan-out
        if rng is None:  # shape-only build
            w = np.zeros((cout, cin, k, k), dtype)
        else:
            w = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        return cls(
            weight=Tensor(w),
            gamma=Tensor(np.ones(cout, dtype)),
            beta=Tensor(np.zeros(cout, dtype)),
            running_mean=np.zeros(cout, dtype),
            running_var=np.ones(cout, dtype),
            stride=stride,
        )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = ad.conv2d(x, self.weight, None, stride=self.stride, padding=self.weight.shape[-1] // 2)
        # frozen BN layers keep their statistics fixed
        bn_train = training and self.gamma.requires_grad
        y = ad.batch_norm2d(y, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=bn_train, eps=BN_EPS)
        return ad.relu(y)


@dataclass
class Projector:
    """1x1 convolution to the token width."""

    weight: Tensor  # (D, Cin, 1, 1)
    bias: Tensor

    @classmethod
    def init(cls, rng, cin: int, d: int, dtype) -> "Projector":
        return cls(Tensor(trunc_normal(rng, (d, cin, 1, 1), 0.02, dtype)), Tensor(np.zeros(d, dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias)


@dataclass
class LsaHeadParams:
    conv0_1: ConvBN
    conv0_2: ConvBN
    conv0_3: ConvBN
    conv1: ConvBN
    conv2: ConvBN
    conv3: ConvBN
    proj1: Projector
    proj2: Projector
    proj3: Projector

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> "LsaHeadParams":
        dt = cfg.np_dtype
        c0, c1, c2, c3 = cfg.lsa_channels
        r1, r2, r3 = cfg.pyramid_ratios
        return cls(
            conv0_1=ConvBN.init(rng, cfg.channels, c0, 2, dt),
            conv0_2=ConvBN.init(rng, c0, c0, 1, dt),
            conv0_3=ConvBN.init(rng, c0, c0, 1, dt),
            conv1=ConvBN.init(rng, c0, c1, r1 // 4, dt),
            conv2=ConvBN.init(rng, c1, c2, r2 // r1, dt),
            conv3=ConvBN.init(rng, c2, c3, r3 // r2, dt),
            proj1=Projector.init(rng, c1, cfg.width, dt),
            proj2=Projector.init(rng, c2, cfg.width, dt),
            proj3=Projector.init(rng, c3, cfg.width, dt),
        )


@dataclass
class MhcaParams:
    ln_q: LayerNormParams
    ln_kv: LayerNormParams
    q: Linear
    k: Linear
    v: Linear
    out: Linear

    @classmethod
    def init(cls, rng, width: int, dtype) -> "MhcaParams":
        return cls(
            ln_q=LayerNormParams.init(width, dtype),
            ln_kv=LayerNormParams.init(width, dtype),
            q=Linear.init(rng, width, width, dtype),
            k=Linear.init(rng, width, width, dtype),
            v=Linear.init(rng, width, width, dtype),
            out=Linear.init(rng, width, width, dtype, zero=True),
        )


def _to_tokens(fmap: Tensor) -> Tensor:
    B, D, h, w = fmap.shape
    return ad.transpose(ad.reshape(fmap, (B, D, h * w)), (0, 2, 1))


def lsa_head(image: Tensor, params: LsaHeadParams, ratios=(8, 16, 32), training: bool = False,
             capture: Optional[dict] = None) -> Tensor:
    """Pyramid features at 1/r1, 1/r2, 1/r3 resolution, projected and concatenated to (B, M, D)."""
    H, W = image.shape[2:]
    for r in ratios:
        if H % r or W % r:
            raise ShapeError(f"image extent {(H, W)} not divisible by pyramid ratio {r}")
    x = params.conv0_1(image, training)
    x = params.conv0_2(x, training)
    x = params.conv0_3(x, training)
    x = ad.maxpool2d(x, 2, 2)
    c1 = params.conv1(x, training)
    c2 = params.conv2(c1, training)
    c3 = params.conv3(c2, training)
    if capture is not None:
        capture["pyramid"] = (c1, c2, c3)
    tokens = [_to_tokens(params.proj1(c1)), _to_tokens(params.proj2(c2)), _to_tokens(params.proj3(c3))]
    return ad.concat(tokens, axis=1)


def mhca(q_seq: Tensor, kv_seq: Tensor, params: MhcaParams, heads: int,
         probs_out: Optional[list] = None) -> Tensor:
    """q_seq + Attention(Q=LN(q_seq), K=V=LN(kv_seq)); no feed-forward sublayer."""
    if q_seq.shape[-1] != kv_seq.shape[-1]:
        raise ShapeError(f"cross-attention width mismatch: {q_seq.shape} vs {kv_seq.shape}")
    hq = params.ln_q(q_seq)
    hkv = params.ln_kv(kv_seq)
    ctx = attention(params.q(hq), params.k(hkv), params.v(hkv), heads, probs_out)
    return ad.add(q_seq, params.out(ctx))


def lsa_inject(f_vit: Tensor, f_spa: Tensor, params: MhcaParams, heads: int) -> Tensor:
    """ViT tokens query the spatial tokens."""
    return mhca(f_vit, f_spa, params, heads)


def lsa_extract(f_spa: Tensor, f_vit_end: Tensor, params: MhcaParams, heads: int) -> Tensor:
    """Spatial tokens query the ViT tokens at the end of a stage."""
    return mhca(f_spa, f_vit_end, params, heads)


def pool_tokens(f: Tensor) -> Tensor:
    return ad.mean_pool(f, axis=1)


def classify(f_spa: Tensor, params: Linear) -> Tensor:
    """Mean-pool the tokens, then a linear layer to class logits."""
    if f_spa.shape[-1] != params.weight.shape[0]:
        raise ShapeError(f"classifier expects width {params.weight.shape[0]}, got {f_spa.shape}")
    return params(pool_tokens(f_spa))
