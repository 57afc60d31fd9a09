"""Training objectives for the segmentation/localization network.

All losses take and return autodiff Tensors so they can sit at the top of a
recorded graph; targets are plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .autodiff import Tensor, ops
from .errors import ContractViolation, TrainingDivergenceError

PROB_CLAMP = 1e-7
DICE_EPS = 1.0


@dataclass(frozen=True)
class LossWeights:
    theta: float = 100.0
    alpha: float = 1.0
    beta: float = 0.2
    gamma: float = 0.5
    lambda_adv: float = 0.1

    def __post_init__(self):
        for k in ("theta", "alpha", "beta", "gamma", "lambda_adv"):
            if getattr(self, k) < 0:
                raise ContractViolation(f"loss weight {k} must be >= 0")


@dataclass(frozen=True)
class SoftArgmaxConfig:
    """Soft peak surrogate settings.

    ``support`` limits the softmax to voxels whose value is within ``support``
    of the heatmap maximum; ``None`` uses the whole volume. Without the limit
    the many low-valued background voxels drag the peak towards the volume
    centre.
    """

    temperature: float = 0.1
    epsilon: float = 1e-3
    support: Optional[float] = 0.5

    def __post_init__(self):
        if self.temperature <= 0 or self.epsilon <= 0:
            raise ContractViolation("temperature and epsilon must be positive")
        if self.support is not None and self.support <= 0:
            raise ContractViolation("support must be positive or None")


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _onehot(target: np.ndarray, probs_shape: tuple) -> np.ndarray:
    t = np.asarray(target)
    if t.ndim == len(probs_shape):
        t = t[:, 0]
    if t.shape != (probs_shape[0],) + probs_shape[2:]:
        raise ContractViolation(f"target shape {np.shape(target)} does not match probabilities {probs_shape}")
    labels = (t > 0.5).astype(np.int64)
    n_cls = probs_shape[1]
    return np.moveaxis(np.eye(n_cls)[labels], -1, 1)


def class_weights(onehot: np.ndarray) -> np.ndarray:
    """Inverse class frequency normalized so the weights sum to the class count."""
    axes = (0,) + tuple(range(2, onehot.ndim))
    counts = np.maximum(onehot.sum(axis=axes), 1.0)
    inv = 1.0 / counts
    return inv * len(inv) / inv.sum()


def hybrid_components(seg_probs: Tensor, target) -> tuple:
    """``(wcross, dsc)`` loss terms; ``seg_probs`` is ``(N, C, *S)``, target binary ``(N, *S)``."""
    p = seg_probs
    total = p.data.sum(axis=1)
    if not np.allclose(total, 1.0, atol=1e-4):
        raise ContractViolation(f"segmentation probabilities not normalized (channel sums in "
                                f"[{total.min():.6f}, {total.max():.6f}])")
    onehot = _onehot(target, p.shape).astype(p.dtype)
    w = class_weights(onehot).astype(p.dtype).reshape((1, -1) + (1,) * (p.ndim - 2))
    n_vox = total.size
    logp = ops.log(ops.clip(p, PROB_CLAMP, None))
    wcross = ops.neg(ops.sum(logp * Tensor(w * onehot))) * (1.0 / n_vox)
    fg, t = p[:, 1], onehot[:, 1]
    inter = ops.sum(fg * Tensor(t))
    dsc = 1.0 - (2.0 * inter + DICE_EPS) / (ops.sum(fg) + float(t.sum()) + DICE_EPS)
    return wcross, dsc


def hybrid_loss(seg_probs: Tensor, target, weights: LossWeights = LossWeights()) -> Tensor:
    wcross, dsc = hybrid_components(seg_probs, target)
    return wcross + weights.theta * dsc


def heatmap_regression_loss(h1_hat, h2_hat, h1, h2) -> Tensor:
    """Mean squared error over the voxels of both heatmaps."""
    h1_hat, h2_hat = _tensor(h1_hat), _tensor(h2_hat)
    terms = []
    for pred, ref in ((h1_hat, h1), (h2_hat, h2)):
        ref = np.asarray(ref, dtype=pred.dtype)
        if ref.shape != pred.shape:
            raise ContractViolation(f"heatmap shape {pred.shape} != target {ref.shape}")
        d = pred - Tensor(ref)
        terms.append(ops.mean(d * d))
    return (terms[0] + terms[1]) * 0.5


def _coords(spatial: tuple, dtype) -> np.ndarray:
    return np.indices(spatial, dtype=dtype).reshape(len(spatial), -1).T


def soft_peak(h, cfg: SoftArgmaxConfig = SoftArgmaxConfig()) -> Tensor:
    """Softmax-weighted voxel coordinate of each heatmap.

    ``h`` is a 3D heatmap or a batch ``(N, 1, *S)``; returns ``(3,)`` or ``(N, 3)``.
    """
    h = _tensor(h)
    single = h.ndim == 3
    if single:
        h = ops.reshape(h, (1, 1) + h.shape)
    n, spatial = h.shape[0], h.shape[2:]
    flat = ops.reshape(h, (n, -1)) * (1.0 / cfg.temperature)
    if cfg.support is not None:
        # voxels far below the maximum get -inf logits (weight 0, no gradient)
        low = h.data.reshape(n, -1) < h.data.reshape(n, -1).max(axis=1, keepdims=True) - cfg.support
        flat = flat + Tensor(np.where(low, -np.inf, 0.0).astype(h.dtype))
    w = ops.softmax(flat, axis=1)
    peak = ops.matmul(w, Tensor(_coords(spatial, h.dtype)))
    return ops.reshape(peak, (3,)) if single else peak


def hard_peak(h) -> np.ndarray:
    """Argmax voxel of each heatmap in a batch ``(N, 1, *S)`` (or one 3D heatmap)."""
    d = np.asarray(h.data if isinstance(h, Tensor) else h)
    if d.ndim == 3:
        return np.asarray(np.unravel_index(int(np.argmax(d)), d.shape), dtype=np.float64)
    flat = d.reshape(d.shape[0], -1).argmax(axis=1)
    return np.stack(np.unravel_index(flat, d.shape[2:]), axis=1).astype(np.float64)


def center_distance_loss(h1_hat, h2_hat, cfg: SoftArgmaxConfig = SoftArgmaxConfig(),
                         mode: str = "soft") -> Tensor:
    """Reciprocal squared distance between the two peaks, floored at ``epsilon``; batch mean."""
    if mode == "hard":
        d = hard_peak(h1_hat) - hard_peak(h2_hat)
        d2 = np.atleast_1d((d * d).sum(axis=-1))
        return Tensor(np.mean(1.0 / np.maximum(d2, cfg.epsilon)))
    if mode != "soft":
        raise ContractViolation(f"unknown center distance mode {mode!r}")
    h1_hat, h2_hat = _tensor(h1_hat), _tensor(h2_hat)
    if h1_hat.shape != h2_hat.shape:
        raise ContractViolation(f"heatmap shapes differ: {h1_hat.shape} vs {h2_hat.shape}")
    d = soft_peak(h1_hat, cfg) - soft_peak(h2_hat, cfg)
    d2 = ops.sum(d * d, axis=-1)
    return ops.mean(ops.power(ops.clip(d2, cfg.epsilon, None), -1.0))


def _value(x) -> float:
    return float(x.item() if isinstance(x, Tensor) else x)


def branch_loss(components: Mapping, weights: LossWeights = LossWeights()):
    """``alpha * hybrid + beta * (reg + gamma * cd)``; missing components count as zero."""
    for name in ("hybrid", "reg", "cd"):
        v = components.get(name)
        if v is not None and not np.isfinite(_value(v)):
            raise TrainingDivergenceError(name, _value(v))
    hyb, reg, cd = (components.get(k) for k in ("hybrid", "reg", "cd"))
    loc = 0.0
    if reg is not None:
        loc = reg + loc
    if cd is not None:
        loc = weights.gamma * cd + loc
    seg = 0.0 if hyb is None else weights.alpha * hyb
    return seg + weights.beta * loc


def adversarial_losses(d_real, d_fake) -> tuple:
    """``(d_loss, g_loss)`` with outputs clamped to ``[1e-7, 1 - 1e-7]``; batch means."""
    real = ops.clip(_tensor(d_real), PROB_CLAMP, 1 - PROB_CLAMP)
    fake = ops.clip(_tensor(d_fake), PROB_CLAMP, 1 - PROB_CLAMP)
    d_loss = ops.neg(ops.mean(ops.log(real)) + ops.mean(ops.log(1.0 - fake)))
    g_loss = ops.neg(ops.mean(ops.log(fake)))
    return d_loss, g_loss


def branch_components(out, target_mask, h1, h2, use_cd: bool = True,
                      cfg: SoftArgmaxConfig = SoftArgmaxConfig(),
                      weights: LossWeights = LossWeights()) -> dict:
    """Loss terms for one batch of network outputs; branches absent from ``out`` are skipped."""
    comps = {}
    if out.seg_probs is not None:
        comps["wcross"], comps["dsc"] = hybrid_components(out.seg_probs, target_mask)
        comps["hybrid"] = comps["wcross"] + weights.theta * comps["dsc"]
    if out.heatmaps:
        comps["reg"] = heatmap_regression_loss(out.h1, out.h2, h1, h2)
        if use_cd:
            comps["cd"] = center_distance_loss(out.h1, out.h2, cfg)
    return comps
