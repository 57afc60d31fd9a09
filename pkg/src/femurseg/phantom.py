"""Synthetic femur phantoms: labelled volumes, landmark heatmaps, augmentation.

A phantom is a possibly-bent capsule (tube of constant radius around a
quadratic spine, closed by hemispherical caps) at a random 3D orientation.
The image carries multiplicative speckle and, optionally, an acoustic shadow
cast below the bone along +y.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import AugmentationRejected, ContractViolation, GenerationError, ManifestError
from .seeding import stream
from .volume import DEFAULT_SPACING, Volume, read_volume, write_volume

HEATMAP_SIGMA = 3.0
SPINE_SAMPLES = 48


@dataclass(frozen=True)
class PhantomParams:
    extents: tuple = (64, 64, 64)
    spacing: tuple = DEFAULT_SPACING
    length_range: tuple = (20.0, 30.0)
    radius_range: tuple = (3.0, 4.5)
    bend: float = 2.0
    fg_mean: float = 0.8
    bg_mean: float = 0.25
    speckle: float = 0.3
    shadow_prob: float = 0.5
    shadow_attenuation: float = 0.35
    margin: float = 4.0
    heatmap_sigma: float = HEATMAP_SIGMA
    seed: int = 0

    def validate(self) -> None:
        lo_l, hi_l = self.length_range
        lo_r, hi_r = self.radius_range
        if not (0 < lo_l <= hi_l and 0 < lo_r <= hi_r):
            raise GenerationError(f"invalid length/radius ranges {self.length_range}, {self.radius_range}")
        if self.margin < 2:
            raise GenerationError(f"margin must be >= 2 voxels, got {self.margin}")
        need = hi_l + 2 * hi_r + self.bend + 2 * self.margin
        if need > min(self.extents) - 1:
            raise GenerationError(
                f"capsule of length {hi_l} and radius {hi_r} does not fit in {self.extents} "
                f"with margin {self.margin}")


@dataclass
class LabeledCase:
    image: Volume
    mask: Volume
    p1: tuple
    p2: tuple
    heatmaps: tuple
    sigma: float = HEATMAP_SIGMA
    meta: dict = field(default_factory=dict)

    @property
    def endpoints(self) -> tuple:
        return self.p1, self.p2

    @property
    def extents(self) -> tuple:
        return self.image.extents

    @property
    def spacing(self) -> tuple:
        return self.image.spacing

    def length_voxels(self) -> float:
        return float(np.linalg.norm(np.subtract(self.p1, self.p2)))


def gaussian_heatmap(endpoint, sigma: float, extents, spacing=DEFAULT_SPACING) -> Volume:
    """Unnormalized Gaussian with peak 1 at ``endpoint`` (voxel units)."""
    p = np.asarray(endpoint, dtype=np.float64)
    if sigma <= 0:
        raise ContractViolation(f"sigma must be positive, got {sigma}")
    if p.shape != (3,) or np.any(p < 0) or np.any(p > np.asarray(extents) - 1):
        raise ContractViolation(f"endpoint {tuple(endpoint)} outside extents {tuple(extents)}")
    axes = [np.exp(-(np.arange(n) - c) ** 2 / (2 * sigma ** 2)) for n, c in zip(extents, p)]
    data = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return Volume(data.astype(np.float32), spacing, "heatmap")


def order_endpoints(a, b) -> tuple:
    """Canonical labelling: p1 is the lexicographically smaller voxel."""
    a, b = tuple(int(v) for v in a), tuple(int(v) for v in b)
    return (a, b) if a <= b else (b, a)


def _make_case(image, mask, a, b, sigma, spacing, meta=None) -> LabeledCase:
    p1, p2 = order_endpoints(a, b)
    ext = image.shape
    heat = tuple(gaussian_heatmap(p, sigma, ext, spacing) for p in (p1, p2))
    return LabeledCase(Volume(image.astype(np.float32), spacing, "image"),
                       Volume(mask.astype(np.float32), spacing, "mask"),
                       p1, p2, heat, sigma, dict(meta or {}))


def _random_unit(rng, orth_to=None) -> np.ndarray:
    v = rng.standard_normal(3)
    if orth_to is not None:
        v -= v.dot(orth_to) * orth_to
    return v / np.linalg.norm(v)


def _distance_to_polyline(points: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Min Euclidean distance from each row of ``grid`` to the polyline ``points``."""
    best = np.full(len(grid), np.inf)
    for a, b in zip(points[:-1], points[1:]):
        ab = b - a
        t = np.clip((grid - a) @ ab / ab.dot(ab), 0.0, 1.0)
        d = grid - (a + t[:, None] * ab)
        np.minimum(best, np.einsum("ij,ij->i", d, d), out=best)
    return np.sqrt(best)


def _apex_voxel(end, outward, radius, mask) -> tuple:
    for k in range(int(4 * radius) + 1):
        v = np.rint(end + outward * (radius - 0.25 * k)).astype(int)
        if np.all(v >= 0) and np.all(v < mask.shape) and mask[tuple(v)]:
            return tuple(int(c) for c in v)
    raise GenerationError("capsule apex has no foreground voxel")


def generate_phantom(params: PhantomParams) -> LabeledCase:
    params.validate()
    rng = np.random.default_rng(params.seed)
    ext = np.asarray(params.extents)
    length = rng.uniform(*params.length_range)
    radius = rng.uniform(*params.radius_range)
    axis = _random_unit(rng)
    normal = _random_unit(rng, axis)
    sag = rng.uniform(0.0, params.bend)

    t = np.linspace(0.0, 1.0, SPINE_SAMPLES)
    rel = (t[:, None] - 0.5) * length * axis + (4 * sag * t * (1 - t))[:, None] * normal
    lo = params.margin + radius - rel.min(axis=0)
    hi = ext - 1 - params.margin - radius - rel.max(axis=0)
    if np.any(lo > hi):
        raise GenerationError(f"capsule does not fit in {tuple(ext)}")
    spine = rel + rng.uniform(lo, hi)

    # distances only inside the capsule's bounding box
    bb_lo = np.maximum(np.floor(spine.min(axis=0) - radius - 2), 0).astype(int)
    bb_hi = np.minimum(np.ceil(spine.max(axis=0) + radius + 2), ext - 1).astype(int)
    sub = np.stack(np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(bb_lo, bb_hi)],
                               indexing="ij"), axis=-1)
    dist = np.full(tuple(ext), np.inf)
    box = tuple(slice(a, b + 1) for a, b in zip(bb_lo, bb_hi))
    dist[box] = _distance_to_polyline(spine, sub.reshape(-1, 3).astype(float)).reshape(sub.shape[:3])

    mask = dist <= radius
    cover = np.clip(radius - dist + 0.5, 0.0, 1.0)
    image = params.bg_mean + (params.fg_mean - params.bg_mean) * cover

    if params.speckle > 0:
        k = 1.0 / params.speckle ** 2
        image = image * rng.gamma(k, 1.0 / k, size=image.shape)
    shadowed = False
    if rng.random() < params.shadow_prob:
        q = spine[rng.integers(SPINE_SAMPLES // 5, 4 * SPINE_SAMPLES // 5)]
        width = rng.uniform(2.0, 4.0)
        x, y, z = np.ogrid[:ext[0], :ext[1], :ext[2]]
        depth = y - q[1]
        lateral = np.sqrt((x - q[0]) ** 2 + (z - q[2]) ** 2)
        cone = (depth > 0) & (lateral <= width + depth * np.tan(np.radians(10.0)))
        image = np.where(cone, image * params.shadow_attenuation, image)
        shadowed = True

    outward0 = -(length * axis + 4 * sag * normal)
    outward1 = length * axis - 4 * sag * normal
    p_a = _apex_voxel(spine[0], outward0 / np.linalg.norm(outward0), radius, mask)
    p_b = _apex_voxel(spine[-1], outward1 / np.linalg.norm(outward1), radius, mask)
    meta = {"length": float(length), "radius": float(radius), "sagitta": float(sag),
            "shadow": shadowed, "seed": int(params.seed)}
    return _make_case(image, mask, p_a, p_b, params.heatmap_sigma, params.spacing, meta)


# --- augmentation ------------------------------------------------------------

def _rotation(axis: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    i, j = [a for a in range(3) if a != axis]
    m = np.eye(3)
    m[i, i], m[i, j], m[j, i], m[j, j] = c, -s, s, c
    return m


def _snap(m: np.ndarray) -> np.ndarray:
    r = np.rint(m)
    return np.where(np.abs(m - r) < 1e-12, r, m)


def _affine(case: LabeledCase, matrix: np.ndarray) -> LabeledCase:
    """Resample every volume under ``x_out = matrix @ (x_in - c) + c``."""
    ext = np.asarray(case.extents)
    center = (ext - 1) / 2.0
    matrix = _snap(matrix)
    inv = _snap(np.linalg.inv(matrix))
    grid = np.indices(tuple(ext), dtype=np.float64).reshape(3, -1)
    src = inv @ (grid - center[:, None]) + center[:, None]
    image = ndimage.map_coordinates(case.image.data, src, order=1, mode="nearest").reshape(tuple(ext))
    mask = ndimage.map_coordinates(case.mask.data, src, order=0, mode="constant", cval=0.0)
    mask = mask.reshape(tuple(ext)) > 0.5
    moved = []
    for p in case.endpoints:
        q = np.rint(matrix @ (np.asarray(p) - center) + center)
        if np.any(q < 0) or np.any(q > ext - 1):
            raise AugmentationRejected(f"endpoint {p} leaves the volume under the transform")
        moved.append(_inside(mask, q.astype(int)))
    return _make_case(image, mask, moved[0], moved[1], case.sigma, case.spacing, case.meta)


def _inside(mask: np.ndarray, q: np.ndarray) -> tuple:
    if mask[tuple(q)]:
        return tuple(int(v) for v in q)
    # nearest-neighbour mask resampling can shave the cap tip; step to the closest foreground voxel
    best, best_d = None, np.inf
    for off in np.ndindex(5, 5, 5):
        v = q + np.asarray(off) - 2
        if np.all(v >= 0) and np.all(v < mask.shape) and mask[tuple(v)]:
            d = np.sum((v - q) ** 2)
            if d < best_d:
                best, best_d = v, d
    if best is None:
        raise AugmentationRejected(f"no foreground near transformed endpoint {tuple(q)}")
    return tuple(int(v) for v in best)


def flip(case: LabeledCase, axis: int) -> LabeledCase:
    n = case.extents[axis]
    image = np.flip(case.image.data, axis).copy()
    mask = np.flip(case.mask.data, axis).copy()
    pts = []
    for p in case.endpoints:
        q = list(p)
        q[axis] = n - 1 - q[axis]
        pts.append(q)
    return _make_case(image, mask, pts[0], pts[1], case.sigma, case.spacing, case.meta)


def rotate(case: LabeledCase, axis: int, angle: float) -> LabeledCase:
    """Rotate by ``angle`` radians about the volume centre, around ``axis``."""
    return _affine(case, _rotation(axis, angle))


def scale(case: LabeledCase, factor: float) -> LabeledCase:
    if not 0.8 <= factor <= 1.2:
        raise ContractViolation(f"scale factor must lie in [0.8, 1.2], got {factor}")
    return _affine(case, np.eye(3) * factor)


@dataclass(frozen=True)
class AugmentRanges:
    scale: tuple = (0.8, 1.2)
    max_angle_deg: float = 45.0


def augment(case: LabeledCase, op: str, rng: np.random.Generator,
            ranges: AugmentRanges = AugmentRanges()) -> LabeledCase:
    """Apply one random transform of kind ``scale``, ``rotate`` or ``flip``."""
    if op == "scale":
        return scale(case, rng.uniform(*ranges.scale))
    if op == "rotate":
        angle = np.radians(rng.uniform(-ranges.max_angle_deg, ranges.max_angle_deg))
        return rotate(case, int(rng.integers(3)), angle)
    if op == "flip":
        return flip(case, int(rng.integers(3)))
    raise ContractViolation(f"unknown augmentation {op!r}")


def augment_cases(cases: Sequence[LabeledCase], copies: int, rng: np.random.Generator,
                  max_tries: int = 8) -> list:
    """Originals followed by ``copies`` augmented variants of each case.

    Each variant applies one flip, one rotation and one scaling; a draw that
    pushes a landmark out of the volume is redrawn.
    """
    out = list(cases)
    for _ in range(copies):
        for case in cases:
            for _ in range(max_tries):
                try:
                    c = augment(case, "flip", rng)
                    c = augment(c, "rotate", rng)
                    c = augment(c, "scale", rng)
                    break
                except AugmentationRejected:
                    continue
            else:
                raise AugmentationRejected(f"no valid augmentation after {max_tries} draws")
            out.append(c)
    return out


# --- dataset on disk ---------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def case_seed(root_seed: int, index: int) -> int:
    return int(stream(root_seed, "data", index).integers(2 ** 31))


def generate_dataset(params: PhantomParams, train_count: int, test_count: int, out_dir,
                     seed: Optional[int] = None) -> Path:
    """Write phantom volumes plus a manifest; returns the manifest path."""
    seed = params.seed if seed is None else seed
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(train_count + test_count):
        case = generate_phantom(replace(params, seed=case_seed(seed, i)))
        name = f"case{i:03d}"
        files = {"image": f"{name}_image.fnv", "mask": f"{name}_mask.fnv",
                 "heatmaps": [f"{name}_h1.fnv", f"{name}_h2.fnv"]}
        write_volume(case.image, out_dir / files["image"])
        write_volume(case.mask, out_dir / files["mask"])
        for vol, fname in zip(case.heatmaps, files["heatmaps"]):
            write_volume(vol, out_dir / fname)
        entries.append({"id": name, "split": "train" if i < train_count else "test", **files,
                        "p1": list(case.p1), "p2": list(case.p2),
                        "spacing_mm": list(case.spacing), "sigma": case.sigma})
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(entries, indent=1))
    (out_dir / "phantom_params.json").write_text(json.dumps({"seed": seed, **asdict(params)}, indent=1))
    return path


def load_manifest(path) -> list:
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    required = {"id", "split", "image", "mask", "heatmaps", "p1", "p2"}
    if not isinstance(entries, list) or not entries:
        raise ManifestError(f"{path}: manifest must be a non-empty JSON list")
    for e in entries:
        if not isinstance(e, dict) or not required <= e.keys():
            raise ManifestError(f"{path}: malformed entry {e!r}")
    return entries


def load_case(entry: dict, root) -> LabeledCase:
    root = Path(root)
    image = read_volume(root / entry["image"])
    mask = read_volume(root / entry["mask"])
    heat = tuple(read_volume(root / h) for h in entry["heatmaps"])
    return LabeledCase(image, mask, tuple(entry["p1"]), tuple(entry["p2"]), heat,
                       entry.get("sigma", HEATMAP_SIGMA), {"id": entry["id"]})


def load_split(manifest_path, split: str) -> list:
    manifest_path = Path(manifest_path)
    entries = load_manifest(manifest_path)
    return [load_case(e, manifest_path.parent) for e in entries if e["split"] == split]
