"""End-to-end reconstruction: instances, polygons, circles, rectangles, labels, roofs, scene."""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .circular import detect_circle
from .decompose import decompose_pyramid, merge_rects, rects_mask
from .geodata import Config, Grid, require_aligned, write_raster
from .labeling import RoadNetwork, build_graph, osm_align, refine_orientations
from .polygonize import BuildingPolygon, detect_lines, polygonize_instance
from .rooffit import fit_model, irregular_fallback, merge_instance_models, type_consistency
from .scene import SceneModel, export_catalog, export_obj
from .segmentation import (
    InstanceMap,
    _instance_map,
    connected_components,
    drop_small,
    fuse_segmentations,
    watershed_instances,
)

STAGES = ("fuse", "watershed", "gc_orientation", "osm", "gc_type", "merge", "circular", "irregular")
# stages that need an optional input start disabled
DEFAULT_STAGES = {s: s not in ("osm", "watershed") for s in STAGES}


class ConfigError(ValueError):
    """Inconsistent inputs or stage toggles."""


class StageError(RuntimeError):
    def __init__(self, stage: str, building, msg: str):
        self.stage = stage
        self.building = building
        where = f" (building {building})" if building is not None else ""
        super().__init__(f"stage {stage}{where}: {msg}")


@dataclass
class PipelineSpec:
    dsm: Grid
    ortho: Grid | None = None
    mask: Grid | None = None  # binary building mask
    three_class: Grid | None = None  # 0 background, 1 building, 2 separation line
    detections: Grid | None = None  # secondary instance map used by fusion
    roads: RoadNetwork | None = None
    stages: dict = field(default_factory=lambda: dict(DEFAULT_STAGES))
    config: Config = field(default_factory=Config)
    out_dir: str | None = None
    intermediate: bool = True
    workers: int = 1
    input_hashes: dict = field(default_factory=dict)

    def on(self, stage: str) -> bool:
        return bool(self.stages.get(stage, False))

    def validate(self):
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown stages: {sorted(unknown)}")
        if self.mask is None and self.three_class is None:
            raise ConfigError("need a building mask or a three-class map")
        if self.on("osm") and self.roads is None:
            raise ConfigError("stage osm requires a road network")
        if self.on("watershed") and self.three_class is None:
            raise ConfigError("stage watershed requires a three-class map")
        grids = [g for g in (self.dsm, self.ortho, self.mask, self.three_class, self.detections) if g is not None]
        try:
            require_aligned(*grids)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass
class InstanceResult:
    inst_id: int
    circle: object = None
    polygon: BuildingPolygon | None = None
    rects: list = field(default_factory=list)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def segment(spec: PipelineSpec) -> tuple[Grid, InstanceMap]:
    cfg = spec.config
    t = spec.dsm.transform
    if spec.three_class is not None and spec.on("watershed"):
        inst = watershed_instances(spec.three_class)
        mask = Grid((inst.labels > 0).astype(np.uint8), t, kind="mask")
    else:
        base = spec.mask
        if base is None:
            base = Grid((np.asarray(spec.three_class.values) == 1).astype(np.uint8), t, kind="mask")
        if spec.on("fuse") and spec.detections is not None:
            det = _instance_map(np.asarray(spec.detections.values), spec.detections)
            mask = fuse_segmentations(base, det, cfg)
        else:
            mask = Grid((np.asarray(base.values) > 0).astype(np.uint8), t, kind="mask")
        inst = connected_components(mask)
    return mask, drop_small(inst, cfg.min_instance_area_px)


# per-process state for the worker pool
_CTX: dict = {}


def _init_worker(ctx):
    _CTX.clear()
    _CTX.update(ctx)


def _instance_job(inst_id: int) -> InstanceResult:
    spec_stages, cfg = _CTX["stages"], _CTX["cfg"]
    dsm, ortho, inst, lines = _CTX["dsm"], _CTX["ortho"], _CTX["inst"], _CTX["lines"]
    res = InstanceResult(inst_id)
    region = inst.mask_of(inst_id)
    stage = "circular"
    try:
        if spec_stages.get("circular"):
            found = detect_circle(region, dsm, cfg)
            if found is not None:
                res.circle, foot = found
                region = region & ~foot
                if region.sum() < cfg.min_instance_area_px:
                    return res
        stage = "polygonize"
        # every remaining piece is polygonized and decomposed on its own
        sub = connected_components(Grid(region.astype(np.uint8), dsm.transform, kind="mask"))
        if sub.count == 0:
            return res
        areas = sub.areas()
        pieces = [k for k in sub.ids() if areas[k] >= cfg.min_instance_area_px]
        rects = []
        polys = []
        for k in pieces:
            one = _instance_map(np.where(sub.labels == k, inst_id, 0), dsm)
            poly = polygonize_instance(one, 1, cfg, lines)
            poly = BuildingPolygon(poly.vertices, poly.main_orientations, inst_id)
            polys.append(poly)
            stage = "decompose"
            rects.extend(decompose_pyramid(poly, dsm, ortho, cfg, sub.labels == k))
            stage = "polygonize"
        stage = "decompose"
        if rects:
            rects = merge_rects(rects, dsm, ortho, cfg)
        res.polygon = polys[0] if polys else None
        res.rects = rects
        return res
    except Exception as exc:  # noqa: BLE001 - surfaced with stage and building id
        raise StageError(stage, inst_id, str(exc)) from exc


def _support(inst_id) -> np.ndarray:
    """Instance pixels not claimed by a circular roof."""
    dsm = _CTX["dsm"]
    region = _CTX["inst"].mask_of(inst_id)
    circle = _CTX["circles"].get(inst_id)
    if circle is not None:
        rr, cc = np.nonzero(region)
        region[rr, cc] = ~circle.contains(*dsm.transform.pixel_center(cc, rr))
    return region


def _fit_job(args):
    inst_id, rect = args
    try:
        return fit_model(rect, _CTX["dsm"], cfg=_CTX["cfg"], support=_support(inst_id))
    except Exception as exc:  # noqa: BLE001
        raise StageError("rooffit", inst_id, str(exc)) from exc


def _finish_job(args):
    inst_id, models = args
    cfg, dsm, ortho = _CTX["cfg"], _CTX["dsm"], _CTX["ortho"]
    stages = _CTX["stages"]
    stage = "merge"
    try:
        if stages.get("merge") and len(models) > 1:
            models = merge_instance_models(models, dsm, ortho, cfg)
        stage = "irregular"
        if stages.get("irregular") and models:
            rects = [p.rect(inst_id) for m in models for p in m.components]
            mesh = irregular_fallback(_support(inst_id), rects, dsm, cfg)
            if mesh is not None and mesh.n_faces:
                return inst_id, [], mesh
        return inst_id, models, None
    except Exception as exc:  # noqa: BLE001
        raise StageError(stage, inst_id, str(exc)) from exc


def _map(fn, items, workers: int, ctx: dict):
    items = list(items)
    if workers <= 1 or len(items) < 2:
        _init_worker(ctx)
        try:
            return [fn(x) for x in items]
        finally:
            _CTX.clear()
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ctx,)) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def reconstruct(spec: PipelineSpec) -> SceneModel:
    spec.validate()
    cfg = spec.config
    dsm = spec.dsm
    t = dsm.transform
    out = spec.out_dir
    if out:
        os.makedirs(out, exist_ok=True)

    def save(grid, name):
        if out and spec.intermediate:
            write_raster(grid, os.path.join(out, name))

    try:
        mask, inst = segment(spec)
    except Exception as exc:  # noqa: BLE001
        raise StageError("segmentation", None, str(exc)) from exc
    save(mask, "building_mask.pgm")
    save(inst.grid, "instances.asc")

    lines = detect_lines(spec.ortho, cfg.lsd_angle_tol_deg, cfg.lsd_min_length_px) if spec.ortho is not None else []
    ctx = {"stages": dict(spec.stages), "cfg": cfg, "dsm": dsm, "ortho": spec.ortho, "inst": inst, "lines": lines}
    results = _map(_instance_job, inst.ids(), spec.workers, ctx)

    # global orientation refinement over every rectangle of the scene
    owners, rects = [], []
    for r in results:
        for rect in r.rects:
            owners.append(r.inst_id)
            rects.append(rect)
    try:
        if spec.on("gc_orientation") and rects:
            rects = refine_orientations(rects, cfg)
        if spec.on("osm") and rects:
            rects = osm_align(rects, spec.roads, cfg)
    except Exception as exc:  # noqa: BLE001
        raise StageError("labeling", None, str(exc)) from exc
    save(Grid(rects_mask(rects, t, dsm.shape).astype(np.uint8), t, kind="mask"), "rectangles_mask.pgm")
    if out and spec.intermediate:
        _write_json(os.path.join(out, "rectangles.json"), [_rect_record(o, r) for o, r in zip(owners, rects)])
        _write_json(
            os.path.join(out, "polygons.json"),
            [{"instance": r.inst_id, "vertices": r.polygon.vertices.tolist()} for r in results if r.polygon is not None],
        )

    ctx["circles"] = {r.inst_id: r.circle for r in results if r.circle is not None}
    models = _map(_fit_job, list(zip(owners, rects)), spec.workers, ctx)
    if spec.on("gc_type") and models:
        try:
            models = type_consistency(models, build_graph(rects, cfg), dsm, cfg)
        except Exception as exc:  # noqa: BLE001
            raise StageError("gc_type", None, str(exc)) from exc

    per_inst: dict = {}
    for o, m in zip(owners, models):
        per_inst.setdefault(o, []).append(m)
    finished = _map(_finish_job, sorted(per_inst.items()), spec.workers, ctx)
    finished = {i: (ms, mesh) for i, ms, mesh in finished}

    scene = SceneModel(t, provenance=_provenance(spec))
    for r in results:
        if r.circle is not None:
            scene.add("circular", r.circle)
        ms, mesh = finished.get(r.inst_id, ([], None))
        if mesh is not None:
            scene.add("irregular", mesh)
        for m in ms:
            scene.add("rectangular", m)
    if out:
        export_catalog(scene, os.path.join(out, "catalog.json"))
        export_obj(scene, os.path.join(out, "scene.obj"), cfg.circle_segments)
    return scene


def _rect_record(owner, r) -> dict:
    return {
        "instance": int(owner),
        "center": [float(r.center[0]), float(r.center[1])],
        "length": float(r.length),
        "width": float(r.width),
        "orientation": float(r.orientation),
    }


def _write_json(path, obj):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def _provenance(spec: PipelineSpec) -> dict:
    return {
        "version": __version__,
        "config": spec.config.to_dict(),
        "stages": {s: spec.on(s) for s in STAGES},
        "inputs": dict(sorted(spec.input_hashes.items())),
    }
