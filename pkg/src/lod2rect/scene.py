"""Scene assembly: tagged building models, meshes, rasterization, OBJ and JSON catalogs."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .circular import CircleModel, circle_height
from .geodata import GeoTransform, Grid
from .rooffit import Mesh, Part, RoofModel, RoofType, _clean_faces, mesh_height, roof_height, type_hips

SCHEMA = "lod2-catalog/1"
KINDS = ("rectangular", "circular", "irregular")
BACKGROUND = -9999.0


@dataclass(frozen=True, eq=False)
class Building:
    id: int
    kind: str
    model: object  # RoofModel | CircleModel | Mesh

    def __post_init__(self):
        want = {"rectangular": RoofModel, "circular": CircleModel, "irregular": Mesh}
        if self.kind not in want:
            raise ValueError(f"unknown building kind {self.kind!r}")
        if not isinstance(self.model, want[self.kind]):
            raise TypeError(f"{self.kind} building needs a {want[self.kind].__name__}")


@dataclass(eq=False)
class SceneModel:
    transform: GeoTransform
    buildings: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def add(self, kind: str, model, id: int | None = None) -> Building:
        if id is None:
            id = max((b.id for b in self.buildings), default=0) + 1
        if any(b.id == id for b in self.buildings):
            raise ValueError(f"duplicate building id {id}")
        b = Building(int(id), kind, model)
        self.buildings.append(b)
        return b

    def __len__(self):
        return len(self.buildings)


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------


class _MeshBuilder:
    def __init__(self):
        self.v: list = []
        self.f: list = []

    def vert(self, x, y, z) -> int:
        self.v.append((float(x), float(y), float(z)))
        return len(self.v) - 1

    def tri(self, a, b, c):
        self.f.append((a, b, c))

    def quad(self, a, b, c, d):
        # counter-clockwise a-b-c-d split along a-c
        self.f.append((a, b, c))
        self.f.append((a, c, d))

    def mesh(self) -> Mesh:
        v = np.asarray(self.v, dtype=float).reshape(-1, 3)
        f = _clean_faces(v, np.asarray(self.f, dtype=np.int64).reshape(-1, 3))
        return Mesh(v, f)


def _part_mesh(b: _MeshBuilder, p: Part, rtype: RoofType, ze, zr, hipl, hipw, terrain, floor: bool):
    L2, W2 = p.length / 2, p.width / 2
    a = math.radians(p.orientation)
    ca, sa = math.cos(a), math.sin(a)

    def v(u, w, z):
        return b.vert(p.cx + u * ca - w * sa, p.cy + u * sa + w * ca, z)

    corners = [(-L2, -W2), (L2, -W2), (L2, W2), (-L2, W2)]  # CCW in the local frame
    bot = [v(u, w, terrain) for u, w in corners]
    top = [v(u, w, ze) for u, w in corners]
    for i in range(4):
        j = (i + 1) % 4
        b.quad(bot[i], bot[j], top[j], top[i])
    if floor:
        b.quad(bot[0], bot[3], bot[2], bot[1])
    hl, hw = type_hips(rtype, p.length, p.width, hipl, hipw)
    if rtype is RoofType.FLAT or zr <= ze:
        b.quad(*top)
        return
    if rtype is RoofType.GABLE:
        r0, r1 = v(-L2, 0, zr), v(L2, 0, zr)
        b.quad(top[0], top[1], r1, r0)
        b.quad(top[2], top[3], r0, r1)
        b.tri(top[1], top[2], r1)
        b.tri(top[3], top[0], r0)
        return
    if rtype is RoofType.PYRAMID or (hl >= L2 and hw >= W2):
        apex = v(0, 0, zr)
        for i in range(4):
            b.tri(top[i], top[(i + 1) % 4], apex)
        return
    # hip and mansard share one construction: an inner plateau rectangle at Z_ridge
    iu, iw = L2 - hl, W2 - hw
    inner = [v(u, w, zr) for u, w in [(-iu, -iw), (iu, -iw), (iu, iw), (-iu, iw)]]
    for i in range(4):
        j = (i + 1) % 4
        b.quad(top[i], top[j], inner[j], inner[i])
    b.quad(*inner)


def rectangular_to_mesh(m: RoofModel, floor: bool | None = None) -> Mesh:
    """Closed-wall prism with the roof of ``m``.

    Walls run from terrain_z to Z_eave.  ``floor=None`` closes the bottom for
    flat roofs only (a plain cuboid); pass True/False to force it.
    """
    if floor is None:
        floor = m.rtype is RoofType.FLAT
    b = _MeshBuilder()
    for p in m.components:
        _part_mesh(b, p, m.rtype, m.z_eave, m.z_ridge, m.hipl, m.hipw, m.terrain_z, floor)
    return b.mesh()


def _circle_levels(c: CircleModel, n_rings: int = 4):
    r0 = c.inner_radius or 0.0
    k = n_rings if c.roof_type == "Sphere" else 1
    return [r0 + (c.radius - r0) * i / k for i in range(k + 1)]


def _circle_roof_z(c: CircleModel, rho: float) -> float:
    p = c.roof_params
    if c.roof_type == "Flat":
        return float(p["z_roof"])
    if c.roof_type == "Cone":
        return float(p["z_apex"] - (p["z_apex"] - p["z_eave"]) * rho / c.radius)
    zc = c.terrain_z + p["z_center_offset"]
    R = p["sphere_radius"]
    return float(zc + math.sqrt(max(R * R - rho * rho, 0.0)))


def circular_to_mesh(c: CircleModel, n_segments: int = 64) -> Mesh:
    """Roof surface over ``n_segments`` arc steps, outer/inner walls and sector side walls."""
    if n_segments < 8:
        raise ValueError("n_segments must be >= 8")
    s, e = c.arc
    full = c.full
    n = n_segments
    az = [s + (e - s) * i / n for i in range(n if full else n + 1)]
    levels = _circle_levels(c)
    zs = [_circle_roof_z(c, r) for r in levels]
    cx, cy = c.center
    b = _MeshBuilder()

    def ring(r, z):
        if r == 0:
            return [b.vert(cx, cy, z)] * len(az)
        return [b.vert(cx + r * math.cos(t), cy + r * math.sin(t), z) for t in az]

    roof = [ring(r, z) for r, z in zip(levels, zs)]
    for k in range(len(levels) - 1):
        a, o = roof[k], roof[k + 1]
        for i in range(n):
            j = (i + 1) % len(az)
            if levels[k] == 0:
                b.tri(a[i], o[i], o[j])
            else:
                b.quad(a[i], o[i], o[j], a[j])
    outer_bot = ring(c.radius, c.terrain_z)
    for i in range(n):
        j = (i + 1) % len(az)
        b.quad(outer_bot[i], outer_bot[j], roof[-1][j], roof[-1][i])
    if c.inner_radius:
        inner_bot = ring(c.inner_radius, c.terrain_z)
        for i in range(n):
            j = (i + 1) % len(az)
            b.quad(inner_bot[j], inner_bot[i], roof[0][i], roof[0][j])
    if not full:
        for end, flip in ((0, True), (len(az) - 1, False)):
            t = az[end]
            for k in range(len(levels) - 1):
                r0, r1 = levels[k], levels[k + 1]
                p0b = b.vert(cx + r0 * math.cos(t), cy + r0 * math.sin(t), c.terrain_z)
                p1b = b.vert(cx + r1 * math.cos(t), cy + r1 * math.sin(t), c.terrain_z)
                q = (p0b, p1b, roof[k + 1][end], roof[k][end])
                b.quad(*(q[::-1] if flip else q))
    return b.mesh()


def building_mesh(bld: Building, n_segments: int = 64) -> Mesh:
    if bld.kind == "rectangular":
        return rectangular_to_mesh(bld.model)
    if bld.kind == "circular":
        return circular_to_mesh(bld.model, n_segments)
    return bld.model


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------


def _bounds(bld: Building):
    if bld.kind == "rectangular":
        return bld.model.footprint_polygon().bounds
    if bld.kind == "circular":
        (x, y), r = bld.model.center, bld.model.radius
        return x - r, y - r, x + r, y + r
    v = bld.model.vertices
    if not len(v):
        return None
    return v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max()


def building_height(bld: Building, x, y):
    if bld.kind == "rectangular":
        return roof_height(bld.model, x, y)
    if bld.kind == "circular":
        return circle_height(bld.model, x, y)
    shp = np.shape(x)
    return mesh_height(bld.model, x, y).reshape(shp)


def rasterize_scene(s: SceneModel, like: GeoTransform, shape) -> tuple[Grid, Grid]:
    """Building mask and roof height by pixel-centre tests; overlaps keep the higher roof."""
    rows, cols = shape
    height = np.full((rows, cols), -np.inf)
    for bld in s.buildings:
        bb = _bounds(bld)
        if bb is None:
            continue
        c0, r1 = like.world_to_pixel(bb[0], bb[1])
        c1, r0 = like.world_to_pixel(bb[2], bb[3])
        cmin, cmax = sorted((float(c0), float(c1)))
        rmin, rmax = sorted((float(r0), float(r1)))
        cmin, rmin = max(int(math.floor(cmin)) - 1, 0), max(int(math.floor(rmin)) - 1, 0)
        cmax, rmax = min(int(math.ceil(cmax)) + 1, cols), min(int(math.ceil(rmax)) + 1, rows)
        if cmin >= cmax or rmin >= rmax:
            continue
        rr, cc = np.mgrid[rmin:rmax, cmin:cmax]
        x, y = like.pixel_center(cc, rr)
        h = np.asarray(building_height(bld, x, y), dtype=float)
        win = height[rmin:rmax, cmin:cmax]
        np.copyto(win, np.fmax(win, np.where(np.isfinite(h), h, -np.inf)))
    mask = np.isfinite(height)
    out = np.where(mask, height, BACKGROUND)
    return (
        Grid(mask.astype(np.uint8), like, kind="mask"),
        Grid(out, like, nodata=BACKGROUND, kind="dsm"),
    )


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------


def export_obj(s: SceneModel, path, n_segments: int = 64) -> None:
    lines = ["# lod2rect scene"]
    base = 1
    for bld in sorted(s.buildings, key=lambda b: b.id):
        m = building_mesh(bld, n_segments)
        lines.append(f"g building_{bld.id}")
        lines.extend("v %.4f %.4f %.4f" % tuple(p) for p in m.vertices)
        lines.extend("f %d %d %d" % tuple(f + base) for f in m.faces)
        base += len(m.vertices)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path) -> dict:
    """Groups of an OBJ file: {name: (vertices (n,3), faces (m,3) 0-based local)}."""
    verts, groups, order = [], {}, []
    cur = None
    with open(path, encoding="ascii") as fh:
        for no, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if tok[0] == "g":
                cur = tok[1] if len(tok) > 1 else ""
                groups[cur] = []
                order.append(cur)
            elif tok[0] == "v":
                verts.append(tuple(float(t) for t in tok[1:4]))
            elif tok[0] == "f":
                if cur is None:
                    cur = ""
                    groups[cur] = []
                    order.append(cur)
                groups[cur].append(tuple(int(t.split("/")[0]) - 1 for t in tok[1:4]))
            else:
                raise ValueError(f"line {no}: unsupported OBJ record {tok[0]!r}")
    v = np.asarray(verts, dtype=float).reshape(-1, 3)
    out = {}
    for name in order:
        f = np.asarray(groups[name], dtype=np.int64).reshape(-1, 3)
        used = np.unique(f) if f.size else np.zeros(0, dtype=np.int64)
        remap = {int(u): i for i, u in enumerate(used)}
        out[name] = (v[used], np.vectorize(remap.get, otypes=[np.int64])(f) if f.size else f)
    return out


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------


def _part_dict(p: Part) -> dict:
    return {"cx": p.cx, "cy": p.cy, "length": p.length, "width": p.width, "orientation": p.orientation}


def building_record(bld: Building) -> dict:
    m = bld.model
    if bld.kind == "rectangular":
        rec = {
            "id": bld.id,
            "kind": bld.kind,
            "type": m.rtype.value,
            "P": {"x0": m.x0, "y0": m.y0, "orientation": m.orientation},
            "C": {"length": m.length, "width": m.width},
            "S": {"z_ridge": m.z_ridge, "z_eave": m.z_eave, "hipl": m.hipl, "hipw": m.hipw},
            "terrain_z": m.terrain_z,
            "fit_rmse": m.fit_rmse,
        }
        if m.parts:
            rec["parts"] = [_part_dict(p) for p in m.parts]
        if m.footprint is not None:
            rec["footprint"] = [list(map(float, q)) for q in m.footprint]
        return rec
    if bld.kind == "circular":
        circ = {"center": list(m.center), "radius": m.radius, "arc": list(m.arc)}
        if m.inner_radius is not None:
            circ["inner_radius"] = m.inner_radius
        return {
            "id": bld.id,
            "kind": bld.kind,
            "type": m.roof_type,
            "circle": circ,
            "roof_params": {k: float(v) for k, v in m.roof_params.items()},
            "terrain_z": m.terrain_z,
            "fit_rmse": m.fit_residual,
        }
    return {
        "id": bld.id,
        "kind": bld.kind,
        "type": "Irregular",
        "mesh": {"vertices": m.vertices.tolist(), "faces": m.faces.tolist()},
    }


def building_from_record(rec: dict) -> Building:
    kind = rec["kind"]
    if kind == "rectangular":
        P, C, S = rec["P"], rec["C"], rec["S"]
        parts = tuple(Part(**p) for p in rec.get("parts", ()))
        fp = rec.get("footprint")
        m = RoofModel(
            RoofType(rec["type"]), P["x0"], P["y0"], P["orientation"], C["length"], C["width"],
            S["z_ridge"], S["z_eave"], S["hipl"], S["hipw"], rec["terrain_z"], rec["fit_rmse"],
            parts, tuple(tuple(q) for q in fp) if fp is not None else None,
        )
    elif kind == "circular":
        c = rec["circle"]
        m = CircleModel(
            tuple(c["center"]), c["radius"], c.get("inner_radius"), tuple(c["arc"]),
            rec["type"], dict(rec["roof_params"]), rec["terrain_z"], rec["fit_rmse"],
        )
    elif kind == "irregular":
        m = Mesh(np.asarray(rec["mesh"]["vertices"], float), np.asarray(rec["mesh"]["faces"], np.int64))
    else:
        raise ValueError(f"unknown building kind {kind!r}")
    return Building(int(rec["id"]), kind, m)


def _transform_dict(t: GeoTransform) -> dict:
    return {
        "origin_x": t.origin_x,
        "origin_y": t.origin_y,
        "pixel_size_x": t.pixel_size_x,
        "pixel_size_y": t.pixel_size_y,
        "crs_tag": t.crs_tag,
    }


def catalog_dict(s: SceneModel) -> dict:
    return {
        "schema": SCHEMA,
        "transform": _transform_dict(s.transform),
        "provenance": s.provenance,
        "buildings": [building_record(b) for b in sorted(s.buildings, key=lambda b: b.id)],
    }


def export_catalog(s: SceneModel, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(catalog_dict(s), fh, indent=1)
        fh.write("\n")


def scene_from_catalog(doc: dict) -> SceneModel:
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"unsupported catalog schema {doc.get('schema')!r}")
    s = SceneModel(GeoTransform(**doc["transform"]), provenance=doc.get("provenance", {}))
    for rec in doc["buildings"]:
        b = building_from_record(rec)
        s.add(b.kind, b.model, b.id)
    return s


def load_catalog(path) -> SceneModel:
    with open(path, encoding="ascii") as fh:
        return scene_from_catalog(json.load(fh))


def scenes_equal(a: SceneModel, b: SceneModel) -> bool:
    return catalog_dict(a) == catalog_dict(b)
