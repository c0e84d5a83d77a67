"""Instance maps from segmentation rasters: components, mask fusion, watershed."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .geodata import Config, Grid, require_aligned

_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class InstanceMap:
    grid: Grid
    count: int

    @property
    def labels(self) -> np.ndarray:
        return self.grid.values

    def ids(self) -> range:
        return range(1, self.count + 1)

    def mask_of(self, inst_id: int) -> np.ndarray:
        if not 1 <= inst_id <= self.count:
            raise KeyError(f"unknown instance id {inst_id}")
        return self.grid.values == inst_id

    def areas(self) -> np.ndarray:
        """Pixel count per id; index 0 is background."""
        return np.bincount(self.grid.values.ravel(), minlength=self.count + 1)


@dataclass(frozen=True)
class SegmentStats:
    instance_id: int
    area_class: int
    area_bbox: int
    w: float


def relabel_first_seen(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Renumber positive labels densely 1..n in row-major order of first appearance."""
    flat = labels.ravel()
    pos = flat > 0
    uniq, first = np.unique(flat[pos], return_index=True)
    if uniq.size == 0:
        return np.zeros_like(labels, dtype=np.int32), 0
    order = np.argsort(np.flatnonzero(pos)[first], kind="stable")
    lut = np.zeros(int(uniq.max()) + 1, dtype=np.int32)
    lut[uniq[order]] = np.arange(1, uniq.size + 1, dtype=np.int32)
    out = np.where(labels > 0, lut[np.clip(labels, 0, None)], 0).astype(np.int32)
    return out, int(uniq.size)


def _instance_map(labels: np.ndarray, like: Grid) -> InstanceMap:
    lab, n = relabel_first_seen(labels)
    return InstanceMap(Grid(lab, like.transform, nodata=None, kind="instances"), n)


def connected_components(mask: Grid) -> InstanceMap:
    """4-connected components of a binary mask, numbered in raster order."""
    lab, _ = ndimage.label(np.asarray(mask.values) > 0, structure=_CROSS)
    return _instance_map(lab, mask)


def bbox_of(region: np.ndarray) -> tuple[int, int, int, int]:
    """(row0, col0, row1, col1) with exclusive upper bounds."""
    rr = np.flatnonzero(region.any(axis=1))
    cc = np.flatnonzero(region.any(axis=0))
    if rr.size == 0:
        raise ValueError("empty region has no bounding box")
    return int(rr[0]), int(cc[0]), int(rr[-1]) + 1, int(cc[-1]) + 1


def fusion_weight(mask: np.ndarray, bbox: tuple[int, int, int, int], instance_id: int = 0) -> SegmentStats:
    """Decision weight w = area_class / area_bbox**2 (areas in pixels).

    ``mask`` marks the detection's pixels; ``bbox`` is (row0, col0, row1, col1),
    upper bounds exclusive.
    """
    r0, c0, r1, c1 = bbox
    area_bbox = (r1 - r0) * (c1 - c0)
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"zero-area bounding box {bbox}")
    area_class = int(np.count_nonzero(np.asarray(mask)[r0:r1, c0:c1]))
    return SegmentStats(instance_id, area_class, area_bbox, area_class / area_bbox**2)


def fuse_segmentations(primary: Grid, detections: InstanceMap | None, cfg: Config) -> Grid:
    """Replace the primary mask inside confident detection boxes by the detection mask."""
    out = (np.asarray(primary.values) > 0).astype(np.uint8)
    if detections is None or detections.count == 0:
        return Grid(out, primary.transform, kind="mask")
    require_aligned(primary, detections.grid)
    det = detections.labels
    det_mask = (det > 0).astype(np.uint8)
    objs = ndimage.find_objects(det)
    for i, sl in enumerate(objs, start=1):
        if sl is None:
            continue
        bbox = (sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)
        st = fusion_weight(det == i, bbox, i)
        if st.w > cfg.t_w:
            out[sl] = det_mask[sl]
    return Grid(out, primary.transform, kind="mask")


def watershed_instances(three_class: Grid) -> InstanceMap:
    """Split buildings along separation lines (0 background, 1 building, 2 line)."""
    v = np.asarray(three_class.values)
    if v.size and (v.min() < 0 or v.max() > 2):
        raise ValueError("three-class map must hold labels 0, 1 and 2 only")
    building = v == 1
    line = v == 2
    seeds = building & ~ndimage.binary_dilation(line, structure=_CROSS)
    markers, _ = ndimage.label(seeds, structure=_CROSS)
    flooded = kernels.watershed_flood(markers, building | line)
    # building pieces without any seed (thin slivers) become their own instances
    rest = building & (flooded == 0)
    if rest.any():
        extra, n_extra = ndimage.label(rest, structure=_CROSS)
        flooded = np.where(rest, extra + flooded.max(), flooded)
    return _instance_map(flooded, three_class)


def drop_small(inst: InstanceMap, min_area: int) -> InstanceMap:
    areas = inst.areas()
    keep = areas >= min_area
    keep[0] = False
    lab = np.where(keep[inst.labels], inst.labels, 0)
    return _instance_map(lab, inst.grid)
