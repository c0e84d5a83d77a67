"""Synthetic scenes: render DSM, orthophoto, masks and a truth catalog from a JSON description."""
from __future__ import annotations

import json
import math
import os

import numpy as np

from .circular import CircleModel
from .geodata import GeoTransform, Grid, write_raster
from .rooffit import RoofModel, RoofType, initial_hips, type_hips
from .scene import SceneModel, export_catalog, rasterize_scene

DEFAULT_TERRAIN = {"z0": 2.0, "slope_x": 0.0, "slope_y": 0.0}


class SceneOverlapError(ValueError):
    pass


def _terrain(desc, x, y):
    t = {**DEFAULT_TERRAIN, **desc.get("terrain", {})}
    x0, y0 = desc.get("origin", (0.0, 0.0))
    return t["z0"] + t["slope_x"] * (np.asarray(x) - x0) + t["slope_y"] * (np.asarray(y) - y0)


def scene_transform(desc) -> GeoTransform:
    gsd = float(desc.get("gsd", 0.5))
    x0, y0 = desc.get("origin", (0.0, 0.0))
    # origin is the lower-left corner in the description; rasters are north-up
    return GeoTransform(float(x0), float(y0) + desc["height"] * gsd, gsd, -gsd, desc.get("crs_tag", ""))


def truth_scene(desc) -> SceneModel:
    t = scene_transform(desc)
    s = SceneModel(t, provenance={"generator": "synth", "seed": int(desc.get("seed", 0))})
    for i, b in enumerate(desc["buildings"], 1):
        bid = int(b.get("id", i))
        kind = b.get("kind", "rectangular")
        if kind == "rectangular":
            x, y = b["x0"], b["y0"]
            tz = float(b.get("terrain_z", _terrain(desc, x, y)))
            rt = RoofType(b["type"])
            hl, hw = initial_hips(rt, b["length"], b["width"])
            hl = b.get("hipl", hl)
            hw = b.get("hipw", hw)
            zr = b["z_eave"] if rt is RoofType.FLAT else b["z_ridge"]
            hl, hw = type_hips(rt, b["length"], b["width"], hl, hw)
            m = RoofModel(rt, x, y, b["orientation"], b["length"], b["width"], zr, b["z_eave"], hl, hw, tz)
        elif kind == "circular":
            c = b["center"]
            tz = float(b.get("terrain_z", _terrain(desc, c[0], c[1])))
            m = CircleModel(tuple(c), b["radius"], b.get("inner_radius"), tuple(b.get("arc", (0.0, 2 * math.pi))),
                            b["type"], dict(b["roof_params"]), tz)
        else:
            raise ValueError(f"building {bid}: unknown kind {kind!r}")
        s.add(kind, m, bid)
    return s


def _footprint_poly(bld):
    from shapely.geometry import Point

    m = bld.model
    if bld.kind == "rectangular":
        return m.footprint_polygon()
    return Point(m.center).buffer(m.radius, 64)


def check_overlaps(s: SceneModel, min_gap: float = 0.0) -> None:
    polys = [(b.id, _footprint_poly(b)) for b in s.buildings]
    for i in range(len(polys)):
        for j in range(i + 1, len(polys)):
            (a, pa), (b, pb) = polys[i], polys[j]
            if pa.distance(pb) <= min_gap and (min_gap > 0 or pa.intersection(pb).area > 0):
                raise SceneOverlapError(f"buildings {a} and {b} overlap")


def render(desc) -> dict:
    """Rasters and truth for a description; returns a dict of Grids plus the truth scene."""
    s = truth_scene(desc)
    check_overlaps(s)
    t = s.transform
    shape = (int(desc["height"]), int(desc["width"]))
    rng = np.random.default_rng(int(desc.get("seed", 0)))
    mask, height = rasterize_scene(s, t, shape)
    inst = np.zeros(shape, dtype=np.int32)
    for b in s.buildings:
        bm, _ = rasterize_scene(SceneModel(t, [b]), t, shape)
        inst[bm.values > 0] = b.id
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]]
    x, y = t.pixel_center(cc, rr)
    ground = _terrain(desc, x, y)
    b_on = mask.values > 0
    clean = np.where(b_on, height.values, ground)
    sigma = float(desc.get("noise_sigma", 0.0))
    dsm = clean + rng.normal(0.0, sigma, shape) if sigma > 0 else clean.copy()
    bg = np.asarray(desc.get("background_color", (110, 110, 100)), float)
    ortho = np.empty(shape + (3,), float)
    ortho[:] = bg
    palette = rng.integers(40, 230, size=(len(s.buildings), 3))
    colors = {}
    for k, (b, spec) in enumerate(zip(s.buildings, desc["buildings"])):
        col = np.asarray(spec.get("color", palette[k]), float)
        colors[b.id] = col
        ortho[inst == b.id] = col
    tex = float(desc.get("texture_sigma", 0.0))
    if tex > 0:
        ortho = ortho + rng.normal(0.0, tex, ortho.shape)
    ortho = np.clip(np.rint(ortho), 0, 255).astype(np.uint8)
    return {
        "scene": s,
        "dsm": Grid(dsm, t, nodata=-9999.0, kind="dsm"),
        "ortho": Grid(ortho, t, kind="ortho"),
        "mask": Grid(b_on.astype(np.uint8), t, kind="mask"),
        "instances": Grid(inst, t, nodata=None, kind="instances"),
        "ref_height": Grid(clean, t, nodata=-9999.0, kind="dsm"),
    }


OUTPUT_FILES = {
    "dsm": "dsm.asc",
    "ortho": "ortho.ppm",
    "mask": "mask.pgm",
    "instances": "instances.asc",
    "ref_height": "ref_height.asc",
}


def synth(desc, out_dir) -> dict:
    """Write rasters and ``truth.json`` into ``out_dir``; returns the written paths."""
    if isinstance(desc, (str, os.PathLike)):
        with open(desc, encoding="ascii") as fh:
            desc = json.load(fh)
    os.makedirs(out_dir, exist_ok=True)
    r = render(desc)
    paths = {}
    for key, name in OUTPUT_FILES.items():
        p = os.path.join(out_dir, name)
        write_raster(r[key], p)
        paths[key] = p
    paths["truth"] = os.path.join(out_dir, "truth.json")
    export_catalog(r["scene"], paths["truth"])
    return paths


# ---------------------------------------------------------------------------
# Random scene descriptions
# ---------------------------------------------------------------------------


def _random_rect(rng, rtype: RoofType, x, y, orientation=None) -> dict:
    length = float(np.round(rng.uniform(12.0, 24.0), 1))
    width = float(np.round(rng.uniform(8.0, min(14.0, length)), 1))
    ze = float(np.round(rng.uniform(5.0, 12.0), 2))
    if orientation is None:
        orientation = rng.uniform(0.0, 180.0)
    b = {
        "kind": "rectangular",
        "type": rtype.value,
        "x0": x,
        "y0": y,
        "orientation": float(np.round(orientation, 1)),
        "length": length,
        "width": width,
        "z_eave": ze,
        "z_ridge": ze if rtype is RoofType.FLAT else float(np.round(ze + rng.uniform(1.0, 3.5), 2)),
    }
    hl0, hw0 = initial_hips(rtype, length, width)
    # hip insets stay inside the searchable band around their starting values
    if rtype in (RoofType.HIP, RoofType.MANSARD):
        b["hipl"] = float(np.round(hl0 + rng.uniform(-0.8, 0.8) * length / 8, 2))
    if rtype is RoofType.MANSARD:
        b["hipw"] = float(np.round(hw0 + rng.uniform(-0.8, 0.8) * width / 8, 2))
    return b


def random_description(n_per_type: int = 10, size: int = 1024, gsd: float = 0.5, seed: int = 0,
                       noise_sigma: float = 0.0, types=None, block_size: int = 2) -> dict:
    """Street blocks on a jittered lattice, ``n_per_type`` buildings of each rectangular type.

    The buildings of one block stand side by side and share roof type and
    orientation, as neighbours in a street block usually do.  Blocks are far
    enough apart that rectangles of different blocks are not neighbours in the
    labeling graph (50 m centre radius).
    """
    rng = np.random.default_rng(seed)
    types = [RoofType(t) for t in (types or [t.value for t in RoofType])]
    blocks = []
    for t in types:
        left = n_per_type
        while left > 0:
            k = min(block_size, left)
            blocks.append((t, k))
            left -= k
    order = rng.permutation(len(blocks))
    extent = size * gsd
    ncol = int(math.ceil(math.sqrt(len(blocks))))
    nrow = int(math.ceil(len(blocks) / ncol))
    pitch = min(extent / ncol, extent / nrow)
    buildings = []
    for k, idx in enumerate(order):
        rtype, count = blocks[idx]
        i, j = divmod(k, ncol)
        cx = (j + 0.5) * pitch + rng.uniform(-0.05, 0.05) * pitch
        cy = (i + 0.5) * pitch + rng.uniform(-0.05, 0.05) * pitch
        theta = rng.uniform(0.0, 180.0)
        members = [_random_rect(rng, rtype, 0.0, 0.0, theta) for _ in range(count)]
        # side by side across the long axis with a 4 to 8 m passage
        gaps = rng.uniform(4.0, 8.0, max(count - 1, 0))
        offs = [0.0]
        for a, b, g in zip(members, members[1:], gaps):
            offs.append(offs[-1] + a["width"] / 2 + g + b["width"] / 2)
        mid = (offs[0] + offs[-1]) / 2
        nx, ny = -math.sin(math.radians(theta)), math.cos(math.radians(theta))
        for b, o in zip(members, offs):
            b["x0"] = float(np.round(cx + (o - mid) * nx, 2))
            b["y0"] = float(np.round(cy + (o - mid) * ny, 2))
            b["id"] = len(buildings) + 1
            buildings.append(b)
    return {
        "width": size,
        "height": size,
        "gsd": gsd,
        "origin": [0.0, 0.0],
        "seed": seed,
        "noise_sigma": noise_sigma,
        "terrain": dict(DEFAULT_TERRAIN),
        "buildings": buildings,
    }
