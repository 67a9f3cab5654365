"""SGD-momentum training with warmup + cosine decay, and the synthetic forgery dataset."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .model import Model, Param, forward
from .vit import ConfigError

logger = logging.getLogger(__name__)

ARTIFACT_MODES = ("boundary", "texture", "both")


class ContractError(RuntimeError):
    """A caller broke an interface contract (e.g. gradient on a frozen parameter)."""


def _strict(cls, d: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class TrainConfig:
    base_lr: float = 0.1
    warmup_epochs: int = 10
    total_epochs: int = 30
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    # global gradient-norm ceiling applied before each step; 0 disables clipping
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.warmup_epochs > self.total_epochs:
            raise ConfigError("warmup_epochs must not exceed total_epochs")
        if min(self.base_lr, self.momentum, self.weight_decay, self.warmup_epochs, self.grad_clip) < 0:
            raise ConfigError("rates and epoch counts must be nonnegative")
        if self.total_epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("total_epochs and batch_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _strict(cls, d, "train config")


@dataclass
class SyntheticSpec:
    count: int = 400
    image_size: int = 64
    artifact_mode: str = "both"
    blend_sigma: float = 2.0
    texture_patch_size: int = 16
    # std of the additive noise in the texture patch (image range is [0, 1])
    texture_sigma: float = 0.12
    seed: int = 0
    # held-out split generated from an independent stream of the same seed
    val_count: int = 0

    def __post_init__(self):
        if self.artifact_mode not in ARTIFACT_MODES:
            raise ConfigError(f"artifact_mode must be one of {ARTIFACT_MODES}")
        if self.count < 0 or self.count % 2 or self.val_count < 0 or self.val_count % 2:
            raise ConfigError("count and val_count must be even and nonnegative (balanced labels)")
        if self.texture_patch_size > self.image_size or self.texture_patch_size <= 0:
            raise ConfigError(
                f"texture patch {self.texture_patch_size} larger than image {self.image_size}"
            )
        if self.texture_sigma < 0:
            raise ConfigError("texture_sigma must be nonnegative")
        if self.blend_sigma <= 0:
            raise ConfigError("blend_sigma must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return _strict(cls, d, "data spec")


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, S, S) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64, 1 = fake
    support: np.ndarray  # (N, S, S) bool, pixels an artifact may have touched
    bases: Optional[np.ndarray] = None  # pristine renders, kept on request

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.support[idx],
                       None if self.bases is None else self.bases[idx])

    def save(self, path) -> None:
        np.savez_compressed(path, images=self.images, labels=self.labels, support=self.support)

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            return cls(z["images"], z["labels"], z["support"])


# ---------------------------------------------------------------- schedule / optimiser


def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Rate for zero-based optimiser step ``step``.

    Progress is measured at the end of the step, t = (step + 1) / steps_per_epoch
    epochs: linear ramp to ``base_lr`` at t = warmup_epochs, then cosine decay
    reaching 0 at t = total_epochs.
    """
    if step < 0:
        raise ValueError("step must be nonnegative")
    t = (step + 1) / steps_per_epoch
    w, total = cfg.warmup_epochs, cfg.total_epochs
    if w > 0 and t <= w:
        return cfg.base_lr * t / w
    if t >= total:
        return 0.0
    frac = (t - w) / (total - w)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def sgd_step(params: list[Param], velocity: dict, lr: float, cfg: TrainConfig) -> None:
    """v <- m*v + (g + wd*w); w <- w - lr*v, in place, trainable parameters only."""
    for p in params:
        t = p.tensor
        if not p.trainable:
            if t.grad is not None:
                raise ContractError(f"gradient present for frozen parameter {p.name}")
            continue
        if t.grad is None:
            raise ContractError(f"no gradient for trainable parameter {p.name}")
        dt = t.data.dtype.type
        g = t.grad + dt(cfg.weight_decay) * t.data
        v = velocity.get(p.name)
        v = g if v is None else dt(cfg.momentum) * v + g
        velocity[p.name] = v
        t.data -= dt(lr) * v


def clip_grad_norm(params: list[Param], max_norm: float) -> float:
    """Rescale trainable gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.tensor.grad for p in params if p.trainable and p.tensor.grad is not None]
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for g in grads:
            g *= g.dtype.type(factor)
    return norm


# ---------------------------------------------------------------- synthetic data


def _grid(size: int):
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")


def _geometry(rng) -> dict:
    return dict(
        cy=rng.uniform(0.4, 0.6), cx=rng.uniform(0.4, 0.6),
        ay=rng.uniform(0.24, 0.32), ax=rng.uniform(0.18, 0.26),
        theta=rng.uniform(-0.4, 0.4),
    )


def _ellipse_rho(geo: dict, yy, xx, shrink: float = 1.0):
    dy, dx = yy - geo["cy"], xx - geo["cx"]
    c, s = math.cos(geo["theta"]), math.sin(geo["theta"])
    u = (dx * c + dy * s) / (geo["ax"] * shrink)
    v = (-dx * s + dy * c) / (geo["ay"] * shrink)
    return np.sqrt(u * u + v * v), dy, dx


def _render(rng, size: int, geo: dict, background: Optional[np.ndarray] = None) -> np.ndarray:
    """Smooth-shaded ellipse on a gradient background, (3, S, S) float."""
    yy, xx = _grid(size)
    if background is None:
        c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
        a, b = rng.uniform(-1, 1, 2)
        ramp = np.clip(0.5 + 0.5 * (a * (xx - 0.5) + b * (yy - 0.5)), 0, 1)
        background = c0[:, None, None] + (c1 - c0)[:, None, None] * ramp
    face = rng.uniform(0.25, 0.85, 3)
    ly, lx = rng.uniform(-1, 1, 2)
    rho, dy, dx = _ellipse_rho(geo, yy, xx)
    shade = 1.0 - 0.3 * rho**2 + 0.12 * (ly * dy / geo["ay"] + lx * dx / geo["ax"])
    inside = rho <= 1.0
    return np.where(inside, face[:, None, None] * shade, background), background


def synth_dataset(spec: SyntheticSpec, return_bases: bool = False, _stream: int = 0) -> Dataset:
    """Render ``spec.count`` images, half real, half carrying forgery artifacts.

    Fakes get a blended inner-region swap (``boundary``), a high-frequency
    texture patch inside the face (``texture``), or both.  Pixels outside
    ``support`` equal the pristine render bit for bit.
    """
    size, n = spec.image_size, spec.count
    rng = np.random.default_rng([spec.seed, _stream])
    labels = np.repeat(np.array([0, 1], dtype=np.int64), n // 2)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, 3, size, size), dtype=np.float32)
    support = np.zeros((n, size, size), dtype=bool)
    bases = np.empty_like(images) if return_bases else None
    yy, xx = _grid(size)
    ts = spec.texture_patch_size
    for i in range(n):
        geo = _geometry(rng)
        base, bg = _render(rng, size, geo)
        base = np.clip(base, 0.0, 1.0)
        img = base.copy()
        if labels[i] == 1:
            if spec.artifact_mode in ("boundary", "both"):
                donor, _ = _render(rng, size, geo, background=bg)
                donor = np.clip(donor, 0.0, 1.0)
                rho, _, _ = _ellipse_rho(geo, yy, xx, shrink=0.7)
                mask = gaussian_filter((rho <= 1.0).astype(np.float64), spec.blend_sigma, truncate=3.0)
                touched = mask > 0
                img = np.where(touched, base * (1.0 - mask) + donor * mask, img)
                support[i] |= touched
            if spec.artifact_mode in ("texture", "both"):
                half = ts / (2 * size)
                oy = rng.uniform(-0.3, 0.3) * geo["ay"]
                ox = rng.uniform(-0.3, 0.3) * geo["ax"]
                y0 = int(np.clip(round((geo["cy"] + oy - half) * size), 0, size - ts))
                x0 = int(np.clip(round((geo["cx"] + ox - half) * size), 0, size - ts))
                noise = rng.normal(0.0, spec.texture_sigma, (3, ts, ts))
                sl = (slice(None), slice(y0, y0 + ts), slice(x0, x0 + ts))
                img[sl] = np.clip(img[sl] + noise, 0.0, 1.0)
                support[i, y0:y0 + ts, x0:x0 + ts] = True
        images[i] = img
        if bases is not None:
            bases[i] = base
    return Dataset(images, labels, support, bases)


def synth_splits(spec: SyntheticSpec) -> tuple[Dataset, Optional[Dataset]]:
    """Train split of ``count`` samples and, when ``val_count`` > 0, an independent validation split."""
    train = synth_dataset(spec)
    val = None
    if spec.val_count:
        val_spec = SyntheticSpec(**{**asdict(spec), "count": spec.val_count, "val_count": 0})
        val = synth_dataset(val_spec, _stream=1)
    return train, val


# ---------------------------------------------------------------- loop


def fake_probability(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e[:, 1] / e.sum(axis=1)).astype(np.float64)


def accuracy(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    pred = (np.asarray(scores) > threshold).astype(np.int64)
    return float(np.mean(pred == np.asarray(labels)))


def predict_scores(model: Model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Fake-class probabilities in inference mode (no graph recorded)."""
    was_training = model.training
    model.eval()
    out = []
    try:
        for s in range(0, len(images), batch_size):
            out.append(fake_probability(forward(model, images[s:s + batch_size]).data))
    finally:
        model.training = was_training
    return np.concatenate(out) if out else np.zeros(0)


def train_loop(model: Model, dataset: Dataset, cfg: TrainConfig, val: Optional[Dataset] = None,
               log_path=None) -> tuple[Model, list[dict]]:
    """Seeded mini-batch SGD over ``dataset``; returns the model and one log record per epoch."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    spe = math.ceil(n / cfg.batch_size)
    params = list(model.params.values())
    trainable = [p for p in params if p.trainable]
    velocity: dict = {}
    log: list[dict] = []
    step = 0
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.total_epochs):
            model.train()
            order = rng.permutation(n)
            losses, correct, lr = [], 0, 0.0
            for s in range(0, n, cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                x, y = dataset.images[idx], dataset.labels[idx]
                lr = lr_schedule(step, spe, cfg)
                with ad.Graph() as graph:
                    logits = forward(model, x)
                    loss = ad.cross_entropy(logits, y)
                if trainable:
                    ad.backward(loss, graph)
                    if cfg.grad_clip > 0:
                        clip_grad_norm(trainable, cfg.grad_clip)
                    sgd_step(params, velocity, lr, cfg)
                    model.zero_grad()
                losses.append(float(loss.data) * len(idx))
                correct += int(np.sum((fake_probability(logits.data) > 0.5) == (y == 1)))
                step += 1
            record = {
                "epoch": epoch + 1,
                "lr": lr,
                "loss": float(np.sum(losses) / n),
                "train_acc": correct / n,
                "val_acc": None,
            }
            if val is not None and len(val):
                record["val_acc"] = accuracy(predict_scores(model, val.images, cfg.batch_size), val.labels)
            model.eval()
            log.append(record)
            logger.info("epoch %d loss %.4f train %.3f val %s", record["epoch"], record["loss"],
                        record["train_acc"], record["val_acc"])
            if fh is not None:
                fh.write(json.dumps(record) + "\n")
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return model, log
