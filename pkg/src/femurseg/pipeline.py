"""Glue between ROI detection and the branched network.

Training and inference see the same input: the femur box is padded, the crop
is rescaled and a fixed-size window centred on the box is cut out. Training
uses the ground-truth box; inference uses the detected one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import roi as roi_mod
from .autodiff import no_record
from .errors import ContractViolation
from .network import BranchNetSpec, LandmarkPair, forward, hard_argmax
from .phantom import LabeledCase, gaussian_heatmap
from .roi import Box3, RoiWindow
from .volume import Volume

WINDOW = (32, 32, 32)


@dataclass
class WindowSample:
    image: np.ndarray
    mask: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    p1: tuple
    p2: tuple
    window: RoiWindow


def case_window(tight: Box3, extents, window=WINDOW, pad: int = roi_mod.ROI_PAD,
                factor: float = roi_mod.RESCALE) -> RoiWindow:
    return roi_mod.centered_window(tight.padded(pad, extents), factor, tight.center, window)


def window_sample(case: LabeledCase, window=WINDOW, tight: Optional[Box3] = None) -> WindowSample:
    """Network input/targets for one case; heatmaps are regenerated on the window grid."""
    tight = tight or roi_mod.mask_box(case.mask.data)
    win = case_window(tight, case.extents, window)
    image = roi_mod.sample(case.image.data, win, order=1)
    mask = roi_mod.sample(case.mask.data, win, order=0)
    ends = []
    for p in (case.p1, case.p2):
        q = tuple(float(v) for v in np.round(win.to_window(p)))
        if any(v < 0 or v > n - 1 for v, n in zip(q, window)):
            raise ContractViolation(f"endpoint {p} falls outside the working window")
        ends.append(q)
    heat = [gaussian_heatmap(q, case.sigma, window, (1.0, 1.0, 1.0)).data for q in ends]
    return WindowSample(image, mask, heat[0], heat[1], ends[0], ends[1], win)


def stack_samples(samples) -> tuple:
    """Batch arrays ``(image, mask, h1, h2)`` with a channel axis on image and heatmaps."""
    image = np.stack([s.image for s in samples])[:, None]
    mask = np.stack([s.mask for s in samples])
    h1 = np.stack([s.h1 for s in samples])[:, None]
    h2 = np.stack([s.h2 for s in samples])[:, None]
    return image, mask, h1, h2


@dataclass
class Prediction:
    prob: Volume
    mask: Volume
    heatmaps: tuple
    landmarks: Optional[LandmarkPair]
    tight: Box3
    padded: Box3

    @property
    def spacing(self) -> tuple:
        return self.prob.spacing


def predict(net_params, net_spec: BranchNetSpec, image: Volume, tight: Box3,
            window=WINDOW, threshold: float = 0.5) -> Prediction:
    """Run the branched network on the window around ``tight`` and map outputs back."""
    win = case_window(tight, image.extents, window)
    x = roi_mod.sample(image.data, win, order=1)
    with no_record():
        out = forward(net_params, net_spec, x, train=False)
    ext, sp = image.extents, image.spacing
    if out.seg_probs is not None:
        prob = roi_mod.paste_back(out.seg_probs.data[0, 1].astype(np.float64), win, ext)
    else:
        prob = np.zeros(ext, np.float32)
    heat, marks = (), None
    if out.heatmaps:
        hw = [h.data[0, 0] for h in out.heatmaps]
        heat = tuple(Volume(roi_mod.paste_back(h.astype(np.float64), win, ext), sp, "heatmap") for h in hw)
        p1, p2 = (tuple(win.to_source(hard_argmax(h))) for h in hw)
        marks = LandmarkPair(p1, p2, sp)
    return Prediction(Volume(prob, sp, "prob"), Volume((prob > threshold).astype(np.float32), sp, "mask"),
                      heat, marks, tight, tight.padded(roi_mod.ROI_PAD, ext))


def infer(roi_params, roi_spec, net_params, net_spec, image: Volume, window=WINDOW) -> Prediction:
    """Full chain: slice-wise ROI detection, then the branched network on the window."""
    tight, _, _ = roi_mod.detect_roi(roi_params, roi_spec, image)
    return predict(net_params, net_spec, image, tight, window)
