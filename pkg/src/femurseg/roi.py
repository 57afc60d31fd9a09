"""Femur ROI detection.

A 2D U-net segments every axial (z) slice; the boxes of the retained 2D
components are merged into one 3D box, which is padded and clamped to form
the ROI. The ROI is cropped and rescaled, and a fixed-size working window is
cut around the femur for the branched network.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import nn
from .autodiff import Tensor, ops
from .errors import ContractViolation, FemurNotFoundError
from .volume import Volume

ROI_PAD = 30
RESCALE = 0.65
MIN_COMPONENT = 5
THRESHOLD = 0.5
SLICE_PRIOR = 0.05


# --- boxes -------------------------------------------------------------------

@dataclass(frozen=True)
class Box3:
    """Axis-aligned box with inclusive voxel bounds."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo, hi = tuple(int(v) for v in self.lo), tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3 or any(a > b for a, b in zip(lo, hi)):
            raise ContractViolation(f"invalid box {lo}..{hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def size(self) -> tuple:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.lo) + np.asarray(self.hi)) / 2.0

    def voxels(self) -> int:
        return int(np.prod(self.size))

    def contains(self, other: "Box3") -> bool:
        return all(a <= c and d <= b for a, b, c, d in zip(self.lo, self.hi, other.lo, other.hi))

    def padded(self, pad: int, extents) -> "Box3":
        lo = tuple(max(a - pad, 0) for a in self.lo)
        hi = tuple(min(b + pad, n - 1) for b, n in zip(self.hi, extents))
        return Box3(lo, hi)

    def slices(self) -> tuple:
        return tuple(slice(a, b + 1) for a, b in zip(self.lo, self.hi))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


def box_iou(a: Box3, b: Box3) -> float:
    inter = 1
    for alo, ahi, blo, bhi in zip(a.lo, a.hi, b.lo, b.hi):
        overlap = min(ahi, bhi) - max(alo, blo) + 1
        if overlap <= 0:
            return 0.0
        inter *= overlap
    return inter / (a.voxels() + b.voxels() - inter)


def mask_box(mask: np.ndarray) -> Box3:
    idx = np.argwhere(mask > 0.5)
    if len(idx) == 0:
        raise FemurNotFoundError("femur not found: mask is empty")
    return Box3(tuple(idx.min(axis=0)), tuple(idx.max(axis=0)))


def slice_boxes(slice_mask: np.ndarray, min_component: int = MIN_COMPONENT) -> list:
    """2D boxes ``((x0, y0), (x1, y1))`` of components with at least ``min_component`` pixels."""
    labels, n = ndimage.label(slice_mask > 0.5)
    if n == 0:
        return []
    sizes = np.bincount(labels.ravel())
    out = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is not None and sizes[k] >= min_component:
            out.append(((sl[0].start, sl[1].start), (sl[0].stop - 1, sl[1].stop - 1)))
    return out


def merge_slice_boxes(slice_masks: Sequence[np.ndarray], min_component: int = MIN_COMPONENT) -> Box3:
    """Union of per-slice component boxes into a tight 3D box; slice index is z."""
    lo, hi = [np.inf] * 3, [-np.inf] * 3
    for z, sm in enumerate(slice_masks):
        for (x0, y0), (x1, y1) in slice_boxes(sm, min_component):
            lo = [min(lo[0], x0), min(lo[1], y0), min(lo[2], z)]
            hi = [max(hi[0], x1), max(hi[1], y1), max(hi[2], z)]
    if lo[0] == np.inf:
        raise FemurNotFoundError("femur not found: no slice has a foreground component")
    return Box3(tuple(lo), tuple(hi))


def boxes_to_roi(slice_masks: Sequence[np.ndarray], extents, pad: int = ROI_PAD,
                 min_component: int = MIN_COMPONENT) -> Box3:
    return merge_slice_boxes(slice_masks, min_component).padded(pad, extents)


# --- crop / rescale / window -------------------------------------------------

@dataclass(frozen=True)
class RoiWindow:
    """Affine map from window voxel ``j`` to source voxel ``origin + step * j``.

    Samples outside ``box`` (the cropped region) read as zero.
    """

    origin: tuple
    step: float
    extents: tuple
    box: Box3

    def to_source(self, j) -> np.ndarray:
        return np.asarray(self.origin) + self.step * np.asarray(j, dtype=np.float64)

    def to_window(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - np.asarray(self.origin)) / self.step

    def spacing(self, source_spacing) -> tuple:
        return tuple(s * self.step for s in source_spacing)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "step": self.step, "extents": list(self.extents),
                "box": self.box.to_dict()}


def rescale_window(box: Box3, factor: float) -> RoiWindow:
    """Window covering the whole crop of ``box`` rescaled by ``factor``."""
    ext = tuple(int(round(n * factor)) for n in box.size)
    origin = tuple(a + 0.5 / factor - 0.5 for a in box.lo)
    return RoiWindow(origin, 1.0 / factor, ext, box)


def centered_window(box: Box3, factor: float, center, extents) -> RoiWindow:
    """Fixed-extent window over the rescaled crop, centred on ``center`` (source voxels)."""
    full = rescale_window(box, factor)
    c = full.to_window(center)
    off = tuple(int(round(ci - (n - 1) / 2.0)) for ci, n in zip(c, extents))
    origin = tuple(o + k * full.step for o, k in zip(full.origin, off))
    return RoiWindow(origin, full.step, tuple(extents), box)


def sample(data: np.ndarray, window: RoiWindow, order: int) -> np.ndarray:
    grid = np.indices(window.extents, dtype=np.float64).reshape(3, -1)
    src = np.asarray(window.origin)[:, None] + window.step * grid
    lo = np.asarray(window.box.lo)[:, None]
    hi = np.asarray(window.box.hi)[:, None]
    inside = np.all((src >= lo - 0.5) & (src <= hi + 0.5), axis=0)
    src = np.clip(src, lo, hi)
    vals = ndimage.map_coordinates(data, src, order=order, mode="nearest")
    return np.where(inside, vals, 0.0).reshape(window.extents).astype(np.float32)


def crop_and_rescale(volume: Volume, box: Box3, factor: float = RESCALE) -> Volume:
    if not all(0 <= a and b < n for a, b, n in zip(box.lo, box.hi, volume.extents)):
        raise ContractViolation(f"box {box.lo}..{box.hi} outside extents {volume.extents}")
    window = rescale_window(box, factor)
    if min(window.extents) < 4:
        raise ContractViolation(f"rescaled ROI {window.extents} is degenerate (< 4 voxels)")
    order = 0 if volume.kind == "mask" else 1
    return Volume(sample(volume.data, window, order), window.spacing(volume.spacing), volume.kind)


def paste_back(window_data: np.ndarray, window: RoiWindow, extents) -> np.ndarray:
    """Trilinear resample of window values onto the source grid (zero outside)."""
    lo = np.floor(window.to_source(np.zeros(3))).astype(int)
    hi = np.ceil(window.to_source(np.asarray(window.extents) - 1)).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(extents) - 1)
    out = np.zeros(extents, dtype=np.float32)
    if np.any(hi < lo):
        return out
    sub = np.indices(tuple(hi - lo + 1), dtype=np.float64).reshape(3, -1) + lo[:, None]
    j = window.to_window(sub.T).T
    vals = ndimage.map_coordinates(window_data, j, order=1, mode="constant", cval=0.0)
    out[tuple(slice(a, b + 1) for a, b in zip(lo, hi))] = vals.reshape(tuple(hi - lo + 1))
    return out


# --- 2D U-net ----------------------------------------------------------------

@dataclass(frozen=True)
class UNet2DSpec:
    levels: int = 4
    base_width: int = 16
    in_channels: int = 1

    def widths(self) -> list:
        return [self.base_width * 2 ** i for i in range(self.levels)]

    def to_dict(self) -> dict:
        return {"net": "unet2d", **asdict(self)}


def _unet2d(P: nn.NetworkParams, spec: UNet2DSpec, x: Tensor, train: bool) -> Tensor:
    widths = spec.widths()
    skips = []
    for i, w in enumerate(widths):
        x = nn.double_conv(P, f"enc{i}", x, w, train)
        if i < spec.levels - 1:
            skips.append(x)
            x = ops.max_pool(x, 2)
    for i in reversed(range(spec.levels - 1)):
        x = nn.up_conv(P, f"up{i}", x, widths[i], train)
        x = ops.concat_channels([skips[i], x])
        x = nn.double_conv(P, f"dec{i}", x, widths[i], train)
    prior = nn.constant(nn.prior_logit(SLICE_PRIOR))
    return ops.sigmoid(nn.conv_layer(P, "head", x, 1, kernel=1, bias_init=prior))


def init_unet2d(spec: UNet2DSpec, rng: np.random.Generator) -> nn.NetworkParams:
    P = nn.NetworkParams(nn.spec_hash(spec), rng)
    n = 2 ** (spec.levels - 1)
    _unet2d(P, spec, Tensor(np.zeros((2, spec.in_channels, n, n), np.float32)), train=True)
    nn.reset_bn_stats(P)
    return P.freeze()


def unet2d_forward(P: nn.NetworkParams, spec: UNet2DSpec, slices, train: bool = False) -> Tensor:
    """Foreground probability per pixel for a batch ``(N, 1, X, Y)`` (or one 2D slice).

    Extents not divisible by ``2**(levels-1)`` are reflect-padded and the
    output cropped back.
    """
    data = slices.data if isinstance(slices, Tensor) else np.asarray(slices, dtype=P.dtype)
    if data.ndim == 2:
        data = data[None, None]
    padded, crop = nn.pad_to_multiple(data, 2 ** (spec.levels - 1), mode="reflect")
    out = _unet2d(P, spec, Tensor(padded), train)
    return out if crop is None else out[crop]


def detect_slices(P: nn.NetworkParams, spec: UNet2DSpec, image: np.ndarray,
                  batch: int = 16, threshold: float = THRESHOLD) -> list:
    """Binary foreground mask for every z-slice of ``image``."""
    slices = np.moveaxis(np.asarray(image, dtype=P.dtype), 2, 0)[:, None]
    masks = []
    for start in range(0, len(slices), batch):
        prob = unet2d_forward(P, spec, slices[start:start + batch]).data[:, 0]
        masks.extend(prob > threshold)
    return masks


def detect_roi(P: nn.NetworkParams, spec: UNet2DSpec, image: Volume, pad: int = ROI_PAD,
               min_component: int = MIN_COMPONENT) -> tuple:
    """Returns ``(tight_box, padded_box, slice_masks)`` for one volume."""
    masks = detect_slices(P, spec, image.data)
    tight = merge_slice_boxes(masks, min_component)
    return tight, tight.padded(pad, image.extents), masks

