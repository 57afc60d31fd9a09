"""Cross-connected segmentation/localization network and the pair discriminator.

Default generator layout (level ``k`` works at ``1/2**k`` resolution):

* shared encoder ``enc0`` (level 0) and ``enc1`` (level 1);
* segmentation path: bottom block at level 2, decoder back to level 0 with
  skips from ``enc1`` and ``enc0``, 2-class softmax head;
* localization path: two more encoding levels (2 and 3), decoder back to
  level 0 with one skip from ``enc1``, two sigmoid heatmap heads.

Cross connections: at level 1 the two decoders exchange features in both
directions (each merge reads the other branch's pre-merge features); at
level 0 segmentation feeds localization. Each merge is a channel concat
followed by a 1x1x1 conv back to the receiving width whose own-branch block
starts as the identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .autodiff import Tensor, ops
from .errors import ContractViolation
from .volume import Volume

# output-head biases start at these foreground rates instead of 0.5
SEG_PRIOR = 0.02
HEATMAP_PRIOR = 0.01


@dataclass(frozen=True)
class BranchNetSpec:
    in_channels: int = 1
    shared_widths: tuple = (8, 16)
    seg_bottom_width: int = 32
    loc_widths: tuple = (32, 32)
    cross_connections: bool = True
    branches: tuple = ("seg", "loc")
    seg_classes: int = 2
    n_landmarks: int = 2

    def __post_init__(self):
        if len(self.shared_widths) != 2:
            raise ContractViolation("shared encoder must have exactly two levels")
        if len(self.loc_widths) < 2:
            raise ContractViolation("localization path must encode deeper than the segmentation path")
        if not set(self.branches) <= {"seg", "loc"} or not self.branches:
            raise ContractViolation(f"unknown branches {self.branches}")
        if self.cross_connections and set(self.branches) != {"seg", "loc"}:
            raise ContractViolation("cross connections need both branches")

    @property
    def loc_depth(self) -> int:
        """Number of pooling steps on the deepest (localization) path."""
        return len(self.shared_widths) - 1 + len(self.loc_widths)

    @property
    def seg_depth(self) -> int:
        return len(self.shared_widths)

    @property
    def multiple(self) -> int:
        depth = self.loc_depth if "loc" in self.branches else self.seg_depth
        return 2 ** depth

    @property
    def cross_links(self) -> list:
        """(source branch, target branch, level) for each cross connection."""
        if not self.cross_connections:
            return []
        return [("seg", "loc", 1), ("loc", "seg", 1), ("seg", "loc", 0)]

    def to_dict(self) -> dict:
        return {"net": "branched", **asdict(self)}

    def sub_spec(self, branch: str) -> "BranchNetSpec":
        """Single-branch baseline (Unet-S / Unet-L) sharing this spec's layer names."""
        return BranchNetSpec(self.in_channels, self.shared_widths, self.seg_bottom_width,
                             self.loc_widths, False, (branch,), self.seg_classes, self.n_landmarks)


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 3
    widths: tuple = (16, 32, 64, 64, 64, 64)
    strides: tuple = (2, 2, 1, 1, 1, 1)
    kernel: int = 4
    padding: int = 1
    slope: float = 0.2

    def to_dict(self) -> dict:
        return {"net": "discriminator", **asdict(self)}


@dataclass
class GeneratorOutput:
    seg_probs: Optional[Tensor]
    heatmaps: list = field(default_factory=list)

    @property
    def h1(self) -> Optional[Tensor]:
        return self.heatmaps[0] if self.heatmaps else None

    @property
    def h2(self) -> Optional[Tensor]:
        return self.heatmaps[1] if len(self.heatmaps) > 1 else None

    def foreground(self) -> Tensor:
        return self.seg_probs[:, 1:2]


def _merge_init(own: int):
    def init(rng, shape):
        cout, cin = shape[:2]
        w = rng.standard_normal(shape) * np.sqrt(2.0 / cin)
        w[:, :own] = 0.0
        w[np.arange(cout), np.arange(cout)] = 1.0
        return w
    return init


def merge(P: nn.NetworkParams, name: str, own: Tensor, foreign: Tensor) -> Tensor:
    """Cross connection: concat then 1x1x1 conv back to ``own``'s width."""
    x = ops.concat_channels([own, foreign])
    c = own.shape[1]
    spec = ops.ConvSpec(x.shape[1], c, (1, 1, 1))
    w = P.param(f"{name}.w", spec.weight_shape, _merge_init(c))
    b = P.param(f"{name}.b", (c,))
    return ops.conv(x, spec, w, b)


def _generator(P: nn.NetworkParams, spec: BranchNetSpec, x: Tensor, train: bool) -> GeneratorOutput:
    w0, w1 = spec.shared_widths
    e0 = nn.double_conv(P, "enc0", x, w0, train)
    e1 = nn.double_conv(P, "enc1", ops.max_pool(e0, 2), w1, train)
    seg, loc = "seg" in spec.branches, "loc" in spec.branches
    cross = spec.cross_connections
    out = GeneratorOutput(None)

    if loc:
        h = ops.max_pool(e1, 2)
        for i, w in enumerate(spec.loc_widths):
            if i:
                h = ops.max_pool(h, 2)
            h = nn.double_conv(P, f"loc.enc{i + 2}", h, w, train)
        for i in reversed(range(len(spec.loc_widths) - 1)):
            h = nn.up_conv(P, f"loc.up{i + 2}", h, spec.loc_widths[i], train)
            h = nn.conv_bn_relu(P, f"loc.dec{i + 2}", h, spec.loc_widths[i], train)
        ld2 = h
    if seg:
        s = nn.double_conv(P, "seg.enc2", ops.max_pool(e1, 2), spec.seg_bottom_width, train)
        s = nn.up_conv(P, "seg.up1", s, w1, train)
        s1 = nn.double_conv(P, "seg.dec1", ops.concat_channels([e1, s]), w1, train)
    if loc:
        h = nn.up_conv(P, "loc.up1", ld2, w1, train)
        l1 = nn.double_conv(P, "loc.dec1", ops.concat_channels([e1, h]), w1, train)
    if cross:
        s1, l1 = merge(P, "cross.loc2seg1", s1, l1), merge(P, "cross.seg2loc1", l1, s1)
    if seg:
        s = nn.up_conv(P, "seg.up0", s1, w0, train)
        s0 = nn.double_conv(P, "seg.dec0", ops.concat_channels([e0, s]), w0, train)
        prior = nn.constant([0.0] + [nn.prior_logit(SEG_PRIOR)] * (spec.seg_classes - 1))
        logits = nn.conv_layer(P, "seg.head", s0, spec.seg_classes, kernel=1, bias_init=prior)
        out.seg_probs = ops.channel_softmax(logits)
    if loc:
        h = nn.up_conv(P, "loc.up0", l1, w0, train)
        l0 = nn.double_conv(P, "loc.dec0", h, w0, train)
        if cross:
            l0 = merge(P, "cross.seg2loc0", l0, s0)
        prior = nn.constant(nn.prior_logit(HEATMAP_PRIOR))
        heat = ops.sigmoid(nn.conv_layer(P, "loc.head", l0, spec.n_landmarks, kernel=1, bias_init=prior))
        out.heatmaps = [heat[:, k:k + 1] for k in range(spec.n_landmarks)]
    return out


def _as_batch(roi, dtype) -> np.ndarray:
    if isinstance(roi, Volume):
        roi = roi.data
    if isinstance(roi, Tensor):
        roi = roi.data
    arr = np.asarray(roi, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None, None]
    return arr


def forward(P: nn.NetworkParams, spec: BranchNetSpec, roi, train: bool = False) -> GeneratorOutput:
    """Segmentation probabilities and landmark heatmaps for a batch of ROIs.

    ``roi`` is a Volume, a 3D array, or a ``(N, C, X, Y, Z)`` array/Tensor.
    Extents not divisible by ``spec.multiple`` are zero-padded internally and
    outputs cropped back.
    """
    if isinstance(roi, Tensor) and roi.requires_grad:
        x, crop = roi, None
    else:
        data, crop = nn.pad_to_multiple(_as_batch(roi, P.dtype), spec.multiple)
        x = Tensor(data)
    if x.shape[1] != spec.in_channels:
        raise ContractViolation(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    out = _generator(P, spec, x, train)
    if crop is not None:
        out.seg_probs = out.seg_probs[crop] if out.seg_probs is not None else None
        out.heatmaps = [h[crop] for h in out.heatmaps]
    return out


def init_generator(spec: BranchNetSpec, rng: np.random.Generator, dtype=np.float32) -> nn.NetworkParams:
    P = nn.NetworkParams(nn.spec_hash(spec), rng, dtype)
    n = spec.multiple * 2
    _generator(P, spec, Tensor(np.zeros((2, spec.in_channels, n, n, n), dtype)), train=True)
    nn.reset_bn_stats(P)
    return P.freeze()


def _discriminator(P: nn.NetworkParams, spec: DiscriminatorSpec, x: Tensor, train: bool) -> Tensor:
    for i, (w, s) in enumerate(zip(spec.widths, spec.strides)):
        x = nn.conv_layer(P, f"d{i}.conv", x, w, spec.kernel, s, spec.padding)
        x = ops.leaky_relu(nn.batch_norm_layer(P, f"d{i}.bn", x, train), spec.slope)
    z = ops.global_avg_pool(x)
    w = P.param("fc.w", (z.shape[1], 1), "he", fan_in=z.shape[1])
    b = P.param("fc.b", (1,))
    return ops.sigmoid(ops.dense(z, w, b))


def discriminator_forward(P: nn.NetworkParams, spec: DiscriminatorSpec, triple, train: bool = False) -> Tensor:
    """Probability that each ``(seg foreground, H1, H2)`` triple is a real pair; shape ``(N, 1)``."""
    x = triple if isinstance(triple, Tensor) else Tensor(np.asarray(triple, dtype=P.dtype))
    if x.ndim != 5 or x.shape[1] != spec.in_channels:
        raise ContractViolation(f"discriminator expects (N, {spec.in_channels}, X, Y, Z), got {x.shape}")
    return _discriminator(P, spec, x, train)


def init_discriminator(spec: DiscriminatorSpec, rng: np.random.Generator, dtype=np.float32) -> nn.NetworkParams:
    P = nn.NetworkParams(nn.spec_hash(spec), rng, dtype)
    _discriminator(P, spec, Tensor(np.zeros((2, spec.in_channels, 24, 24, 24), dtype)), train=True)
    nn.reset_bn_stats(P)
    return P.freeze()


def pair_triple(seg_foreground, h1, h2) -> Tensor:
    parts = [t if isinstance(t, Tensor) else Tensor(np.asarray(t)) for t in (seg_foreground, h1, h2)]
    return ops.concat_channels(parts)


# --- landmarks -----------------------------------------------------------------

@dataclass
class LandmarkPair:
    """Two endpoints in voxel coordinates (may be fractional) with mm spacing."""

    p1: tuple
    p2: tuple
    spacing: tuple = (1.0, 1.0, 1.0)

    @property
    def p1_mm(self) -> np.ndarray:
        return np.asarray(self.p1, dtype=np.float64) * np.asarray(self.spacing)

    @property
    def p2_mm(self) -> np.ndarray:
        return np.asarray(self.p2, dtype=np.float64) * np.asarray(self.spacing)

    @property
    def length_mm(self) -> float:
        return float(np.linalg.norm(self.p1_mm - self.p2_mm))

    def to_dict(self) -> dict:
        return {"p1": [float(v) for v in self.p1], "p2": [float(v) for v in self.p2],
                "p1_mm": self.p1_mm.tolist(), "p2_mm": self.p2_mm.tolist(),
                "length_mm": self.length_mm, "spacing_mm": list(self.spacing)}


def hard_argmax(h: np.ndarray) -> tuple:
    """Voxel index of the maximum; ties go to the first index in C order."""
    h = np.asarray(h)
    return tuple(int(v) for v in np.unravel_index(int(np.argmax(h)), h.shape))


def extract_landmarks(h1, h2) -> LandmarkPair:
    vols = [h if isinstance(h, Volume) else Volume(np.asarray(h), kind="heatmap") for h in (h1, h2)]
    if vols[0].extents != vols[1].extents or vols[0].spacing != vols[1].spacing:
        raise ContractViolation("heatmaps must share extents and spacing")
    return LandmarkPair(hard_argmax(vols[0].data), hard_argmax(vols[1].data), vols[0].spacing)


# --- checkpoints -----------------------------------------------------------------

def save_checkpoint(params: nn.NetworkParams, path, extra: Optional[dict] = None) -> None:
    nn.save_checkpoint(params, path, extra)


def load_checkpoint(path, spec) -> nn.NetworkParams:
    """Load parameters for ``spec``; a checkpoint from another spec is rejected."""
    return nn.load_checkpoint(path, nn.spec_hash(spec))
