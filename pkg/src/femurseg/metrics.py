"""Evaluation metrics and the metrics report.

Boundary voxels are foreground voxels with at least one background
6-neighbour; the outside of the volume does not count as background.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractViolation
from .network import LandmarkPair

SCHEMA_VERSION = 1
CASE_FIELDS = ("id", "dsc", "jacc", "adb_mm", "hdb_mm", "verr_ml", "p1_mm", "p2_mm", "lerr_mm",
               "roi_iou", "vol_pred_ml", "vol_gt_ml", "len_pred_mm", "len_gt_mm")
METRIC_FIELDS = ("dsc", "jacc", "adb_mm", "hdb_mm", "verr_ml", "p1_mm", "p2_mm", "lerr_mm", "roi_iou")
_SIX = ndimage.generate_binary_structure(3, 1)


def _pair(a, b) -> tuple:
    a, b = np.asarray(a) > 0.5, np.asarray(b) > 0.5
    if a.shape != b.shape:
        raise ContractViolation(f"mask extents differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    return 1.0 if total == 0 else 2.0 * int((a & b).sum()) / total


def jaccard(a, b) -> float:
    a, b = _pair(a, b)
    union = int((a | b).sum())
    return 1.0 if union == 0 else int((a & b).sum()) / union


def boundary(mask) -> np.ndarray:
    """Boolean surface set of ``mask``."""
    m = np.asarray(mask) > 0.5
    structure = _SIX if m.ndim == 3 else ndimage.generate_binary_structure(m.ndim, 1)
    return m & ~ndimage.binary_erosion(m, structure, border_value=1)


def _nearest(from_set: np.ndarray, to_set: np.ndarray, spacing) -> np.ndarray:
    dt = ndimage.distance_transform_edt(~to_set, sampling=spacing)
    return dt[from_set]


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0)) -> tuple:
    """``(adb_mm, hdb_mm)``: mean and max of nearest-boundary distances, pooled over both directions."""
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise ContractViolation("surface distance undefined: a mask is empty")
    ba, bb = boundary(a), boundary(b)
    if not ba.any() or not bb.any():
        raise ContractViolation("surface distance undefined: a mask has no boundary")
    spacing = tuple(float(s) for s in spacing)
    d = np.concatenate([_nearest(ba, bb, spacing), _nearest(bb, ba, spacing)])
    return float(d.mean()), float(d.max())


def volume_ml(mask, spacing) -> float:
    return int((np.asarray(mask) > 0.5).sum()) * float(np.prod(spacing)) / 1000.0


def verr(pred, gt, spacing) -> float:
    return abs(volume_ml(pred, spacing) - volume_ml(gt, spacing))


def landmark_metrics(pred: LandmarkPair, gt: LandmarkPair) -> tuple:
    """``(p1_mm, p2_mm, lerr_mm)`` under the endpoint pairing with least total displacement.

    ``p1_mm``/``p2_mm`` refer to the ground-truth endpoint labels.
    """
    if not np.allclose(pred.spacing, gt.spacing):
        raise ContractViolation(f"landmark spacings differ: {pred.spacing} vs {gt.spacing}")
    g1, g2 = gt.p1_mm, gt.p2_mm
    q1, q2 = pred.p1_mm, pred.p2_mm
    straight = (np.linalg.norm(q1 - g1), np.linalg.norm(q2 - g2))
    swapped = (np.linalg.norm(q2 - g1), np.linalg.norm(q1 - g2))
    d1, d2 = swapped if sum(swapped) < sum(straight) else straight
    return float(d1), float(d2), abs(pred.length_mm - gt.length_mm)


@dataclass
class BlandAltman:
    mean_diff: float
    sd_diff: float
    lower: float
    upper: float
    fraction_within: float
    means: list = field(default_factory=list)
    diffs: list = field(default_factory=list)

    def summary(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in ("means", "diffs")}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mean", "diff"])
            w.writerows([repr(m), repr(d)] for m, d in zip(self.means, self.diffs))


def bland_altman(pairs: Sequence[tuple]) -> BlandAltman:
    """Agreement of ``(algorithm, expert)`` pairs; limits are mean difference +- 1.96 sd."""
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 2:
        raise ContractViolation("bland_altman needs at least two (algorithm, expert) pairs")
    d = arr[:, 0] - arr[:, 1]
    mean, sd = float(d.mean()), float(d.std(ddof=1))
    lo, hi = mean - 1.96 * sd, mean + 1.96 * sd
    within = float(np.mean((d >= lo) & (d <= hi)))
    return BlandAltman(mean, sd, lo, hi, within, arr.mean(axis=1).tolist(), d.tolist())


def case_metrics(case_id: str, pred_mask, gt_mask, spacing, pred_marks: Optional[LandmarkPair],
                 gt_marks: LandmarkPair, roi_iou: Optional[float] = None) -> dict:
    rec = {"id": case_id, "dsc": dice(pred_mask, gt_mask), "jacc": jaccard(pred_mask, gt_mask)}
    if (np.asarray(pred_mask) > 0.5).any():
        rec["adb_mm"], rec["hdb_mm"] = surface_distances(pred_mask, gt_mask, spacing)
    else:
        rec["adb_mm"] = rec["hdb_mm"] = float("nan")
    rec["vol_pred_ml"], rec["vol_gt_ml"] = volume_ml(pred_mask, spacing), volume_ml(gt_mask, spacing)
    rec["verr_ml"] = abs(rec["vol_pred_ml"] - rec["vol_gt_ml"])
    rec["len_gt_mm"] = gt_marks.length_mm
    if pred_marks is not None:
        rec["p1_mm"], rec["p2_mm"], rec["lerr_mm"] = landmark_metrics(pred_marks, gt_marks)
        rec["len_pred_mm"] = pred_marks.length_mm
    else:
        rec["p1_mm"] = rec["p2_mm"] = rec["lerr_mm"] = rec["len_pred_mm"] = float("nan")
    rec["roi_iou"] = float("nan") if roi_iou is None else float(roi_iou)
    return rec


def aggregate(records: list) -> dict:
    """Mean and sample sd (n - 1) per metric, ignoring undefined (NaN) entries."""
    out = {}
    for k in METRIC_FIELDS:
        v = np.array([r[k] for r in records], dtype=np.float64)
        v = v[np.isfinite(v)]
        if len(v) == 0:
            continue
        out[k] = {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if len(v) > 1 else 0.0, "n": int(len(v))}
    return out


@dataclass
class MetricsReport:
    records: list
    extra: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict:
        return aggregate(self.records)

    def _agreement(self, alg: str, ref: str) -> Optional[BlandAltman]:
        pairs = [(r[alg], r[ref]) for r in self.records if np.isfinite(r[alg]) and np.isfinite(r[ref])]
        return bland_altman(pairs) if len(pairs) >= 2 else None

    def volume_agreement(self) -> Optional[BlandAltman]:
        return self._agreement("vol_pred_ml", "vol_gt_ml")

    def length_agreement(self) -> Optional[BlandAltman]:
        return self._agreement("len_pred_mm", "len_gt_mm")

    def to_dict(self) -> dict:
        ba = {}
        for name, stats in (("volume_ml", self.volume_agreement()), ("length_mm", self.length_agreement())):
            if stats is not None:
                ba[name] = stats.summary()
        return {"schema_version": SCHEMA_VERSION, "cases": self.records, "aggregates": self.aggregates,
                "bland_altman": ba, **self.extra}

    def write(self, out_dir) -> dict:
        """Writes ``report.json``, ``cases.csv`` and Bland-Altman point CSVs; returns the paths."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"json": out_dir / "report.json", "cases": out_dir / "cases.csv"}
        paths["json"].write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        write_cases_csv(self.records, paths["cases"])
        for name, stats in (("volume", self.volume_agreement()), ("length", self.length_agreement())):
            if stats is not None:
                paths[f"ba_{name}"] = out_dir / f"bland_altman_{name}.csv"
                stats.write_csv(paths[f"ba_{name}"])
        return paths


def write_cases_csv(records: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("schema_version",) + CASE_FIELDS)
        for r in records:
            w.writerow([SCHEMA_VERSION] + [r["id"]] + [repr(float(r[k])) for k in CASE_FIELDS[1:]])


def read_cases_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        if int(r["schema_version"]) != SCHEMA_VERSION:
            raise ContractViolation(f"{path}: unsupported schema version {r['schema_version']}")
        out.append({"id": r["id"], **{k: float(r[k]) for k in CASE_FIELDS[1:]}})
    return out
