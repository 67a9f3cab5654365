"""N-stage assembly of backbone, GBA and LSA; freeze policies; parameter accounting."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .gba import GbaParams, gba_forward
from .lsa import LsaHeadParams, MhcaParams, classify, lsa_extract, lsa_head, lsa_inject, pool_tokens
from .vit import (
    BlockParams,
    FreezePolicy,
    Linear,
    ModelConfig,
    PatchEmbedParams,
    init_block,
    init_patch_embed,
    mhsa_block,
    mlp_block,
    partition_stages,
    patch_embed,
)

GROUPS = ("backbone", "gba", "lsa", "head")


@dataclass
class Param:
    name: str
    tensor: Tensor
    trainable: bool
    group: str

    @property
    def size(self) -> int:
        return int(self.tensor.data.size)


@dataclass
class StageIO:
    f_vit: Tensor
    f_spa: Optional[Tensor]


def _walk(obj, prefix: str) -> Iterator[tuple[str, object]]:
    """Yield (dotted name, Tensor | ndarray) leaves of nested dataclasses/lists."""
    if isinstance(obj, (Tensor, np.ndarray)):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")


def is_trainable(group: str, name: str, policy: FreezePolicy) -> bool:
    if policy is FreezePolicy.FULL_TUNING:
        return True
    if policy is FreezePolicy.LINEAR_PROBE:
        return group == "head"
    if group != "backbone":
        return True
    return policy is FreezePolicy.ADAPTER_PLUS_BLOCK1_MHSA and name.startswith("backbone.blocks.0.attn.")


class Model:
    """Parameter container plus the structural pieces the forward pass walks."""

    def __init__(self, config: ModelConfig, patch: PatchEmbedParams, blocks: list[BlockParams],
                 gbas: list[GbaParams], lsa_head: Optional[LsaHeadParams],
                 injectors: list[MhcaParams], extractors: list[MhcaParams], classifier: Linear):
        self.config = config
        self.patch = patch
        self.blocks = blocks
        self.gbas = gbas
        self.lsa_head = lsa_head
        self.injectors = injectors
        self.extractors = extractors
        self.classifier = classifier
        self.training = False
        self.params: dict[str, Param] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._register()
        self.apply_policy(config.freeze_policy)

    def _register(self) -> None:
        roots = [
            ("backbone.patch_embed", self.patch),
            ("backbone.blocks", self.blocks),
            ("gba", self.gbas),
            ("lsa.head", self.lsa_head),
            ("lsa.inject", self.injectors),
            ("lsa.extract", self.extractors),
            ("head", self.classifier),
        ]
        for prefix, obj in roots:
            if obj is None:
                continue
            group = prefix.split(".")[0]
            for name, leaf in _walk(obj, prefix):
                if isinstance(leaf, Tensor):
                    leaf.name = name
                    self.params[name] = Param(name, leaf, False, group)
                else:
                    self.buffers[name] = leaf

    def apply_policy(self, policy) -> None:
        policy = FreezePolicy(policy)
        self.config.freeze_policy = policy
        for p in self.params.values():
            p.trainable = is_trainable(p.group, p.name, policy)
            p.tensor.requires_grad = p.trainable
            p.tensor.grad = None

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def trainable_params(self) -> list[Param]:
        return [p for p in self.params.values() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.grad = None

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by name."""
        out = {n: p.tensor.data.copy() for n, p in self.params.items()}
        out.update({n: b.copy() for n, b in self.buffers.items()})
        return out

    def astype(self, dtype: str) -> "Model":
        """Convert all parameters and buffers in place (e.g. to f64 for gradient checks)."""
        npdt = ad.DTYPES[dtype]
        for p in self.params.values():
            p.tensor.data = p.tensor.data.astype(npdt)
        if self.lsa_head is not None:
            # layers hold the buffer arrays themselves, so swap them on the layers
            for f in dataclasses.fields(self.lsa_head):
                layer = getattr(self.lsa_head, f.name)
                if hasattr(layer, "running_mean"):
                    layer.running_mean = layer.running_mean.astype(npdt)
                    layer.running_var = layer.running_var.astype(npdt)
            self.buffers = {n: leaf for n, leaf in _walk(self.lsa_head, "lsa.head")
                            if isinstance(leaf, np.ndarray)}
        self.config.dtype = dtype
        return self


def build_model(config: ModelConfig, seed: Optional[int] = 0) -> Model:
    """Assemble and initialise the model; ``seed=None`` builds zero-filled tensors (shapes only)."""
    config.validate()
    rng = None if seed is None else np.random.default_rng(seed)
    dt = config.np_dtype
    patch = init_patch_embed(rng, config)
    blocks = [init_block(rng, config) for _ in range(config.blocks)]
    gbas = [GbaParams.init(rng, config.width, config.gba_dim, dt) for _ in range(config.blocks)] \
        if config.use_gba else []
    head = injectors = extractors = None
    if config.use_lsa:
        head = LsaHeadParams.init(rng, config)
        injectors = [MhcaParams.init(rng, config.width, dt) for _ in range(config.stages)]
        extractors = [MhcaParams.init(rng, config.width, dt) for _ in range(config.stages)]
    classifier = Linear.init(rng, config.width, config.num_classes, dt)
    return Model(dataclasses.replace(config), patch, blocks, gbas, head,
                 injectors or [], extractors or [], classifier)


def _as_image(model: Model, images) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=model.config.np_dtype))
    cfg = model.config
    expect = (cfg.channels,) + cfg.image
    if x.ndim != 4 or x.shape[1:] != expect:
        raise ShapeError(f"expected images of shape (B, {expect[0]}, {expect[1]}, {expect[2]}), got {x.shape}")
    return x


def vit_forward(model: Model, images) -> Tensor:
    """Plain backbone forward with no adapter contribution; returns final ViT tokens."""
    x = _as_image(model, images)
    f = patch_embed(x, model.patch, model.config.patch)
    for bp in model.blocks:
        f = mlp_block(mhsa_block(f, bp, model.config.heads), bp)
    return f


def forward(model: Model, images, capture: Optional[dict] = None) -> Tensor:
    """Logits (B, num_classes) through the N-stage adapter pipeline.

    ``capture`` (optional dict) receives ``f_vit``, ``f_spa``, ``pooled`` and
    the LSA-H ``pyramid`` activations.
    """
    cfg = model.config
    x = _as_image(model, images)
    f_vit = patch_embed(x, model.patch, cfg.patch)
    f_spa = None
    if cfg.use_lsa:
        f_spa = lsa_head(x, model.lsa_head, cfg.pyramid_ratios, model.training, capture)
    for i, stage in enumerate(partition_stages(cfg.blocks, cfg.stages)):
        if cfg.use_lsa:
            f_vit = lsa_inject(f_vit, f_spa, model.injectors[i], cfg.lsa_heads)
        for idx in stage:
            bp = model.blocks[idx]
            f_prime = mhsa_block(f_vit, bp, cfg.heads)
            delta = gba_forward(f_prime, model.gbas[idx]) if cfg.use_gba else None
            f_vit = mlp_block(f_prime, bp, delta)
        if cfg.use_lsa:
            f_spa = lsa_extract(f_spa, f_vit, model.extractors[i], cfg.lsa_heads)
    tokens = f_spa if cfg.use_lsa else f_vit
    if capture is not None:
        capture.update(f_vit=f_vit, f_spa=f_spa, pooled=pool_tokens(tokens))
    return classify(tokens, model.classifier)


def count_config_params(config: ModelConfig) -> dict:
    """Parameter counts for a config without drawing any initial values."""
    return count_params(build_model(config, seed=None))


def count_params(model: Model) -> dict:
    counts = {g: 0 for g in GROUPS}
    trainable = 0
    for p in model.params.values():
        counts[p.group] += p.size
        if p.trainable:
            trainable += p.size
    counts["trainable_total"] = trainable
    counts["total"] = sum(counts[g] for g in GROUPS)
    return counts

