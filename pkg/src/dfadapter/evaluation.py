"""Detection metrics, Grad-CAM style saliency, embedding export and corruption kernels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import fft as sfft
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .model import Model, forward

CORRUPTIONS = ("saturation", "contrast", "block", "noise", "blur", "pixelate", "compress_proxy")
MAX_SEVERITY = 5


class MetricError(ValueError):
    """Metric undefined for the given input (e.g. only one class present)."""


@dataclass
class Metrics:
    acc: float
    auc: float
    eer: float
    roc: list = field(default_factory=list)  # (fpr, tpr) pairs, (0,0) first, (1,1) last
    eer_threshold: float = float("nan")

    def to_dict(self) -> dict:
        return {"acc": self.acc, "auc": self.auc, "eer": self.eer,
                "eer_threshold": self.eer_threshold, "roc": [list(p) for p in self.roc]}


def roc_curve(scores, labels):
    """ROC from a descending sweep over distinct scores.

    Tied scores move as one step, so a tie between a positive and a negative
    contributes a diagonal segment (half credit under the trapezoid rule).
    Returns (fpr, tpr, thresholds); thresholds[0] is +inf.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores and labels must be 1-d of equal length, got {s.shape} and {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC/EER undefined: both classes must be present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[ends]]
    return fpr, tpr, thresholds


def auc_trapezoid(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))


def eer_point(fpr: np.ndarray, tpr: np.ndarray) -> tuple[int, float, float, float]:
    """Locate the FPR == FNR crossing of the ROC polyline.

    Along the sweep FPR - FNR rises from -1 to +1, so exactly one segment
    (i-1, i) crosses zero.  Returns (i, t, fpr_x, fnr_x) with t the
    interpolation weight on that segment (t = 1 when the crossing is a vertex).
    """
    d = fpr - (1.0 - tpr)
    i = int(np.argmax(d >= 0))
    if i == 0 or d[i] == 0:
        return i, 1.0, float(fpr[i]), float(1.0 - tpr[i])
    t = float(-d[i - 1] / (d[i] - d[i - 1]))
    fpr_x = fpr[i - 1] + t * (fpr[i] - fpr[i - 1])
    fnr_x = (1.0 - tpr[i - 1]) + t * (tpr[i - 1] - tpr[i])
    return i, t, float(fpr_x), float(fnr_x)


def equal_error_rate(fpr: np.ndarray, tpr: np.ndarray, thresholds: Optional[np.ndarray] = None):
    """EER by linear interpolation on the crossing segment; returns (eer, threshold).

    The threshold is interpolated the same way (nan when the crossing sits
    on the +inf start point).
    """
    i, t, fpr_x, fnr_x = eer_point(fpr, tpr)
    thr = float("nan")
    if thresholds is not None:
        if t == 1.0:
            thr = float(thresholds[i]) if np.isfinite(thresholds[i]) else thr
        elif np.isfinite(thresholds[i - 1]):
            thr = float(thresholds[i - 1] + t * (thresholds[i] - thresholds[i - 1]))
    # the two agree up to rounding; report their mean
    return 0.5 * (fpr_x + fnr_x), thr


def compute_metrics(scores, labels, threshold: float = 0.5) -> Metrics:
    """ACC at ``threshold`` (score > threshold means fake), trapezoidal AUC, interpolated EER."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    fpr, tpr, thr = roc_curve(s, y)
    acc = float(np.mean((s > threshold).astype(np.int64) == y))
    eer, eer_thr = equal_error_rate(fpr, tpr, thr)
    return Metrics(acc=acc, auc=auc_trapezoid(fpr, tpr), eer=eer,
                   roc=[(float(a), float(b)) for a, b in zip(fpr, tpr)], eer_threshold=eer_thr)


# ---------------------------------------------------------------- saliency


def bilinear_resize(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2-d map with half-pixel centres (edges clamped)."""
    h, w = a.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def saliency_map(model: Model, image: np.ndarray, target_class: int = 1) -> np.ndarray:
    """Grad-CAM on the coarsest LSA-H pyramid activation, upsampled to the image extent.

    Channel weights are the spatially averaged gradients of the fake-class
    logit; the weighted activation sum is rectified and max-normalised.
    An all-zero map is returned as zeros.
    """
    if not model.config.use_lsa:
        raise ValueError("saliency needs the LSA head (model built with use_lsa=False)")
    img = np.asarray(image, dtype=model.config.np_dtype)
    if img.ndim == 3:
        img = img[None]
    if img.shape[0] != 1:
        raise ValueError(f"saliency_map takes a single image, got batch of {img.shape[0]}")
    was_training = model.training
    model.eval()
    x = ad.Tensor(img, requires_grad=True)  # guarantees the pyramid is recorded under any policy
    capture: dict = {}
    try:
        with ad.Graph() as g:
            logits = forward(model, x, capture)
            act = capture["pyramid"][-1]
            act.retain_grad = True
            target = ad.sum(ad.narrow(logits, target_class, target_class + 1))
        ad.backward(target, g)
        grad = act.grad
    finally:
        model.zero_grad()
        model.training = was_training
    a = act.data[0].astype(np.float64)  # (C, h, w)
    weights = grad[0].astype(np.float64).mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, a, axes=1), 0.0)
    cam = bilinear_resize(cam, img.shape[2], img.shape[3])
    cam = np.maximum(cam, 0.0)
    peak = cam.max()
    if not np.isfinite(peak) or peak <= 0:
        return np.zeros(img.shape[2:], dtype=np.float64)
    return cam / peak


def write_pgm(path, heatmap: np.ndarray) -> None:
    """Binary greyscale PGM (P5, maxval 255) of a map in [0, 1]."""
    h = np.asarray(heatmap, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"heatmap must be 2-d, got {h.shape}")
    px = np.round(np.clip(h, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii"))
        f.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    px = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return px.reshape(h, w).astype(np.float64) / maxval


# ---------------------------------------------------------------- embeddings


def pooled_embeddings(model: Model, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Classifier inputs (pooled tokens), one row per image, inference mode."""
    was_training = model.training
    model.eval()
    rows = []
    try:
        for s in range(0, len(images), batch_size):
            cap: dict = {}
            forward(model, images[s:s + batch_size], cap)
            rows.append(cap["pooled"].data.astype(np.float32))
    finally:
        model.training = was_training
    return np.concatenate(rows, axis=0)


def export_embeddings(model: Model, images: np.ndarray, labels: np.ndarray, path) -> np.ndarray:
    """Write a JSON header line, then little-endian f32 rows, then one label byte per row."""
    emb = pooled_embeddings(model, images)
    labels = np.asarray(labels).astype(np.uint8)
    if labels.shape[0] != emb.shape[0]:
        raise ValueError(f"{emb.shape[0]} embeddings but {labels.shape[0]} labels")
    header = json.dumps({"count": int(emb.shape[0]), "dim": int(emb.shape[1]), "dtype": "<f4"})
    with open(path, "wb") as f:
        f.write(header.encode("utf-8") + b"\n")
        f.write(emb.astype("<f4").tobytes())
        f.write(labels.tobytes())
    return emb


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    header = json.loads(data[:nl])
    n, d = header["count"], header["dim"]
    body = nl + 1
    need = body + 4 * n * d + n
    if len(data) < need:
        raise ValueError(f"{path}: truncated embedding file ({len(data)} of {need} bytes)")
    emb = np.frombuffer(data, dtype="<f4", count=n * d, offset=body).reshape(n, d)
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=body + 4 * n * d)
    return emb.copy(), labels.astype(np.int64)


# ---------------------------------------------------------------- corruptions

# per-kind parameters for severities 1..5
_LEVELS = {
    "saturation": (0.8, 0.6, 0.4, 0.2, 0.0),  # fraction of chroma kept
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),  # contrast scale about the image mean
    "block": (1, 2, 3, 4, 6),  # number of occluding squares
    "noise": (0.02, 0.04, 0.06, 0.08, 0.10),  # Gaussian sigma
    "blur": (0.5, 1.0, 1.5, 2.0, 3.0),  # Gaussian blur sigma, pixels
    "pixelate": (0.8, 0.6, 0.5, 0.35, 0.25),  # resample scale
    "compress_proxy": (0.02, 0.04, 0.07, 0.11, 0.16),  # base DCT quantisation step
}


def noise_sigma(severity: int) -> float:
    return 0.0 if severity == 0 else _LEVELS["noise"][severity - 1]


def _area_resize_axis(a: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = a.shape[axis]
    edges = np.linspace(0, n_in, n_out + 1)
    starts = np.floor(edges[:-1]).astype(np.int64)
    stops = np.maximum(np.ceil(edges[1:]).astype(np.int64), starts + 1)
    parts = [np.take(a, np.arange(s, e), axis=axis).mean(axis=axis, keepdims=True)
             for s, e in zip(starts, stops)]
    return np.concatenate(parts, axis=axis)


def _pixelate(x: np.ndarray, scale: float) -> np.ndarray:
    h, w = x.shape[-2:]
    sh, sw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    small = _area_resize_axis(_area_resize_axis(x, sh, -2), sw, -1)
    iy = np.minimum((np.arange(h) * sh) // h, sh - 1)
    ix = np.minimum((np.arange(w) * sw) // w, sw - 1)
    return small[..., iy, :][..., ix]


def _dct_quantise(x: np.ndarray, step: float, block: int = 8) -> np.ndarray:
    h, w = x.shape[-2:]
    ph, pw = (-h) % block, (-w) % block
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    xp = np.pad(x, pad, mode="edge")
    H, W = xp.shape[-2:]
    lead = xp.shape[:-2]
    tiles = xp.reshape(*lead, H // block, block, W // block, block)
    tiles = np.moveaxis(tiles, -3, -2)  # (..., nby, nbx, block, block)
    coef = sfft.dctn(tiles, axes=(-2, -1), norm="ortho")
    u = np.arange(block)
    q = step * (1.0 + 0.5 * (u[:, None] + u[None, :]))  # coarser for high frequencies
    coef = np.round(coef / q) * q
    rec = sfft.idctn(coef, axes=(-2, -1), norm="ortho")
    rec = np.moveaxis(rec, -2, -3).reshape(*lead, H, W)
    return rec[..., :h, :w]


def corrupt(image: np.ndarray, kind: str, severity: int, seed: int = 0) -> np.ndarray:
    """Apply one low-level corruption to a (..., C, H, W) image in [0, 1].

    Severity 0 returns an unmodified copy for every kind.
    """
    if kind not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {kind!r}; expected one of {CORRUPTIONS}")
    if not 0 <= int(severity) <= MAX_SEVERITY:
        raise ValueError(f"severity must be in 0..{MAX_SEVERITY}, got {severity}")
    x = np.asarray(image)
    if x.ndim < 3:
        raise ValueError(f"expected (..., C, H, W), got shape {x.shape}")
    if severity == 0:
        return x.copy()
    level = _LEVELS[kind][severity - 1]
    rng = np.random.default_rng(seed)
    xf = x.astype(np.float64)
    if kind == "saturation":
        grey = xf.mean(axis=-3, keepdims=True)
        out = grey + level * (xf - grey)
    elif kind == "contrast":
        m = xf.mean(axis=(-3, -2, -1), keepdims=True)
        out = m + level * (xf - m)
    elif kind == "block":
        out = xf.copy()
        h, w = x.shape[-2:]
        side = max(1, min(h, w) // 6)
        flat = out.reshape(-1, *x.shape[-3:])
        for img in flat:
            for _ in range(level):
                y0 = rng.integers(0, h - side + 1)
                x0 = rng.integers(0, w - side + 1)
                img[:, y0:y0 + side, x0:x0 + side] = rng.uniform(0, 1, (img.shape[0], 1, 1))
        out = flat.reshape(x.shape)
    elif kind == "noise":
        out = xf + rng.normal(0.0, level, xf.shape)
    elif kind == "blur":
        sig = [0.0] * (x.ndim - 2) + [level, level]
        out = gaussian_filter(xf, sig, mode="reflect")
    elif kind == "pixelate":
        out = _pixelate(xf, level)
    else:
        out = _dct_quantise(xf, level)
    return np.clip(out, 0.0, 1.0).astype(x.dtype, copy=False)


def laplacian_variance(image: np.ndarray) -> float:
    """Variance of the 4-neighbour Laplacian over the spatial axes (a sharpness score)."""
    x = np.asarray(image, dtype=np.float64)
    lap = (x[..., :-2, 1:-1] + x[..., 2:, 1:-1] + x[..., 1:-1, :-2] + x[..., 1:-1, 2:]
           - 4.0 * x[..., 1:-1, 1:-1])
    return float(lap.var())
