"""Finite-difference verification of the analytic gradients of the full model."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import Model, build_model, forward
from .vit import ModelConfig

# relative errors are measured against max(|analytic|, |numeric|, ABS_FLOOR).
# A central difference at step h carries round-off of about eps * |loss| / h
# (~1e-11 here); components smaller than the floor, including structurally
# zero ones such as key biases under softmax, must then agree to
# tol * ABS_FLOOR = 1e-10 absolute.
ABS_FLOOR = 1e-4


@dataclass
class GradcheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    per_param: dict = field(default_factory=dict)  # name -> max relative error

    def passed(self, tol: float = 1e-6) -> bool:
        return self.checked > 0 and self.max_rel_error < tol

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _loss(model: Model, images: np.ndarray, labels: np.ndarray, record: bool):
    if record:
        with ad.Graph() as g:
            loss = ad.cross_entropy(forward(model, images), labels)
        return loss, g
    with ad.record_patterns() as patterns:
        loss = ad.cross_entropy(forward(model, images), labels)
    return float(loss.data), patterns


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def randomize_trainable(model: Model, rng: np.random.Generator) -> None:
    """Move every trainable tensor to a generic, well-scaled random point.

    Matrices and kernels get N(0, 1/fan_in); vectors (biases, norm gains and
    shifts, the adapter scale) are jittered around their current value.
    Zero-initialised branches then carry signal, and gradients are large
    enough that a central difference at step 1e-5 is not dominated by
    floating-point round-off.
    """
    for p in model.trainable_params():
        d = p.tensor.data
        if d.ndim >= 2:
            # Linear weights are (in, out); conv kernels are (out, in, kh, kw)
            fan_in = d.shape[0] if d.ndim == 2 else int(np.prod(d.shape[1:]))
            new = rng.normal(0.0, 1.0 / np.sqrt(fan_in), d.shape)
        else:
            new = d + rng.normal(0.0, 0.1, d.shape)
        p.tensor.data = new.astype(d.dtype)


def run_gradcheck(config: ModelConfig, seed: int = 0, batch: int = 2, per_tensor: int = 3,
                  step: float = 1e-5, max_tries: int = 8) -> GradcheckReport:
    """Compare analytic gradients with central differences on sampled coordinates.

    Runs in float64 with batch norm in training mode.  A probe whose +/- step
    flips any ReLU mask or max-pool choice straddles a kink, where the
    central difference is not a valid oracle; such probes are redrawn
    (up to ``max_tries`` per sample) and counted in ``skipped_kinks``.
    """
    cfg = dataclasses.replace(config, dtype="f64")
    model = build_model(cfg, seed).train()
    rng = np.random.default_rng(seed + 1)
    randomize_trainable(model, rng)
    images = rng.uniform(0.0, 1.0, (batch, cfg.channels) + cfg.image)
    labels = np.arange(batch) % cfg.num_classes
    saved_buffers = {n: b.copy() for n, b in model.buffers.items()}

    model.zero_grad()
    loss, g = _loss(model, images, labels, record=True)
    ad.backward(loss, g)
    analytic = {p.name: p.tensor.grad.copy() for p in model.trainable_params()}
    _, base_patterns = _loss(model, images, labels, record=False)

    per_param: dict[str, float] = {}
    checked = skipped = 0
    for p in model.trainable_params():
        w = p.tensor.data
        worst = 0.0
        for _ in range(per_tensor):
            for _ in range(max_tries):
                idx = tuple(int(rng.integers(0, s)) for s in w.shape)
                orig = w[idx]
                w[idx] = orig + step
                f_plus, pat_plus = _loss(model, images, labels, record=False)
                w[idx] = orig - step
                f_minus, pat_minus = _loss(model, images, labels, record=False)
                w[idx] = orig
                if _same_branches(pat_plus, base_patterns) and _same_branches(pat_minus, base_patterns):
                    break
                skipped += 1
            else:
                continue
            numeric = (f_plus - f_minus) / (2 * step)
            a = float(analytic[p.name][idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), ABS_FLOOR)
            worst = max(worst, rel)
            checked += 1
        per_param[p.name] = worst
    for n, b in saved_buffers.items():
        model.buffers[n][...] = b
    model.zero_grad()
    return GradcheckReport(max(per_param.values(), default=float("inf")), checked, skipped, per_param)
