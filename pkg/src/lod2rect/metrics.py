"""Pixel IoU in 2D and with a vertical tolerance in 3D."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geodata import Grid, require_aligned


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    FN: int
    TP_3D: int

    def __post_init__(self):
        if min(self.TP, self.FP, self.FN, self.TP_3D) < 0:
            raise ValueError("counts must be non-negative")
        if self.TP_3D > self.TP:
            raise ValueError("TP_3D cannot exceed TP")

    @property
    def iou2(self) -> float:
        den = self.TP + self.FP + self.FN
        return 1.0 if den == 0 else self.TP / den

    @property
    def iou3(self) -> float:
        den = self.TP_3D + self.FP + self.FN
        if den == 0:
            # empty against empty scores 1; true positives that all miss the tolerance score 0
            return 1.0 if self.TP == 0 else 0.0
        return self.TP_3D / den


def _ref_valid(ref_mask: Grid, ref_height: Grid | None = None) -> np.ndarray:
    ok = ref_mask.valid()
    if ref_height is not None:
        ok = ok & ref_height.valid() & np.isfinite(ref_height.as_float())
    return ok


def confusion(pred_mask: Grid, ref_mask: Grid, pred_height: Grid | None = None,
              ref_height: Grid | None = None, tol_m: float = 2.0, region=None) -> ConfusionCounts:
    """Counts over reference-valid pixels (and ``region`` if given)."""
    grids = [g for g in (pred_mask, ref_mask, pred_height, ref_height) if g is not None]
    require_aligned(*grids)
    p = np.asarray(pred_mask.values) > 0
    r = np.asarray(ref_mask.values) > 0
    valid = _ref_valid(ref_mask, ref_height)
    if region is not None:
        valid &= region
    tp = p & r & valid
    fp = p & ~r & valid
    fn = ~p & r & valid
    tp3 = 0
    if pred_height is not None and ref_height is not None:
        dh = np.abs(pred_height.as_float() - ref_height.as_float())
        tp3 = int((tp & (dh <= tol_m)).sum())
    return ConfusionCounts(int(tp.sum()), int(fp.sum()), int(fn.sum()), tp3)


def iou2(pred: Grid, ref: Grid) -> float:
    return confusion(pred, ref).iou2


def iou3(pred_mask: Grid, pred_height: Grid, ref_mask: Grid, ref_height: Grid, tol_m: float = 2.0) -> float:
    if not tol_m >= 0:
        raise ValueError("tolerance must be non-negative")
    return confusion(pred_mask, ref_mask, pred_height, ref_height, tol_m).iou3


@dataclass
class BuildingScore:
    id: int
    iou2: float
    iou3: float
    rmse_m: float


@dataclass
class EvalReport:
    counts: ConfusionCounts
    iou2: float
    iou3: float
    rmse_m: float
    buildings: list = field(default_factory=list)
    tol_m: float = 2.0

    def to_dict(self) -> dict:
        return {
            "iou2": self.iou2,
            "iou3": self.iou3,
            "rmse_m": self.rmse_m,
            "tol_m": self.tol_m,
            "counts": asdict(self.counts),
            "buildings": [asdict(b) for b in self.buildings],
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=1, allow_nan=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "iou2", "iou3", "rmse_m"])
            for b in self.buildings:
                w.writerow([b.id, repr(b.iou2), repr(b.iou3), repr(b.rmse_m)])


def _rmse(pred_height: Grid, ref_height: Grid, tp: np.ndarray) -> float:
    if not tp.any():
        return math.nan
    d = pred_height.as_float()[tp] - ref_height.as_float()[tp]
    return float(np.sqrt(np.mean(d * d)))


def evaluate(scene, ref_mask: Grid, ref_height: Grid, tol_m: float = 2.0, ref_instances: Grid | None = None) -> EvalReport:
    """Scene and per-building IOU2/IOU3 plus height RMSE over true positives.

    Each building is scored against the reference instance it overlaps most;
    without an instance map the connected components of the reference mask serve.
    """
    from .scene import SceneModel, rasterize_scene
    from .segmentation import connected_components

    require_aligned(ref_mask, ref_height)
    t = ref_mask.transform
    pm, ph = rasterize_scene(scene, t, ref_mask.shape)
    counts = confusion(pm, ref_mask, ph, ref_height, tol_m)
    valid = _ref_valid(ref_mask, ref_height)
    ref_b = np.asarray(ref_mask.values) > 0
    tp_all = (pm.values > 0) & ref_b & valid
    report = EvalReport(counts, counts.iou2, counts.iou3, _rmse(ph, ref_height, tp_all), [], tol_m)
    if ref_instances is not None:
        ref_lab = np.asarray(ref_instances.values)
    else:
        ref_lab = connected_components(Grid((ref_b & ref_mask.valid()).astype(np.uint8), t, kind="mask")).labels
    for b in sorted(scene.buildings, key=lambda b: b.id):
        bm, bh = rasterize_scene(SceneModel(t, [b]), t, ref_mask.shape)
        own = bm.values > 0
        ids, cnt = np.unique(ref_lab[own & (ref_lab > 0)], return_counts=True)
        ref_own = ref_lab == ids[np.argmax(cnt)] if ids.size else np.zeros_like(own)
        rg = Grid(ref_own.astype(np.uint8), t, kind="mask")
        c = confusion(bm, rg, bh, ref_height, tol_m, region=own | ref_own)
        report.buildings.append(BuildingScore(b.id, c.iou2, c.iou3, _rmse(bh, ref_height, own & ref_own & valid)))
    return report
