"""Rectangular roof primitives: analytic heights, exhaustive fitting, type
consistency, model merging and the irregular mesh fallback.

All five roof types share one height function.  In the rectangle frame
(u along the length L, v along the width W)::

    t = max(ramp(|v|, W/2, hipw), ramp(|u|, L/2, hipl))
    h = Z_ridge - (Z_ridge - Z_eave) * t

where ``ramp(a, half, hip) = clip((a - (half - hip)) / hip, 0, 1)`` and a zero
hip parameter switches its ramp off.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from shapely import affinity as shp_affinity
from shapely.geometry import Polygon, box
from shapely.ops import unary_union

from . import kernels
from .decompose import Rect, color_distance, rect_features, rect_pixels, rects_mask
from .geodata import Config, Grid
from .labeling import GCProblem, RectGraph, solve_multilabel
from .polygonize import angle_diff

_TIE_TOL = 1e-9


class RoofType(str, enum.Enum):
    FLAT = "Flat"
    GABLE = "Gable"
    HIP = "Hip"
    PYRAMID = "Pyramid"
    MANSARD = "Mansard"

    def __str__(self):
        return self.value


TYPES = (RoofType.FLAT, RoofType.GABLE, RoofType.HIP, RoofType.PYRAMID, RoofType.MANSARD)
FREE_PARAMS = {
    RoofType.FLAT: 1,
    RoofType.GABLE: 2,
    RoofType.HIP: 3,
    RoofType.PYRAMID: 2,
    RoofType.MANSARD: 4,
}
# canonical order for equal RMSE after free-parameter count and Z_eave
_TYPE_RANK = {RoofType.FLAT: 0, RoofType.GABLE: 1, RoofType.PYRAMID: 2, RoofType.HIP: 3, RoofType.MANSARD: 4}

ZE_HALF_RANGE = 3.0
Z_STEP = 0.2
DZ_MIN, DZ_MAX = 0.5, 4.0
HIP_STEP = 0.4


@dataclass(frozen=True)
class Part:
    """Oriented rectangle geometry of one roof component."""

    cx: float
    cy: float
    length: float
    width: float
    orientation: float

    @classmethod
    def of(cls, r) -> "Part":
        return cls(float(r.center[0]), float(r.center[1]), float(r.length), float(r.width), float(r.orientation))

    def rect(self, parent: int = 0) -> Rect:
        return Rect((self.cx, self.cy), self.length, self.width, self.orientation, parent_instance=parent)

    def local(self, x, y):
        a = math.radians(self.orientation)
        c, s = math.cos(a), math.sin(a)
        c = 0.0 if abs(c) < 1e-12 else c
        s = 0.0 if abs(s) < 1e-12 else s
        dx = np.asarray(x, float) - self.cx
        dy = np.asarray(y, float) - self.cy
        return dx * c + dy * s, -dx * s + dy * c


@dataclass(frozen=True)
class RoofModel:
    rtype: RoofType
    x0: float
    y0: float
    orientation: float
    length: float
    width: float
    z_ridge: float
    z_eave: float
    hipl: float
    hipw: float
    terrain_z: float = 0.0
    fit_rmse: float = 0.0
    parts: tuple = ()  # extra Part components of a merged model (empty for plain rectangles)
    footprint: tuple | None = None  # world vertices of a merged footprint

    def __post_init__(self):
        object.__setattr__(self, "rtype", RoofType(self.rtype))
        tol = 1e-9
        if not self.length >= self.width > 0:
            raise ValueError("model needs length >= width > 0")
        if self.z_ridge < self.z_eave - tol:
            raise ValueError("Z_ridge must be >= Z_eave")
        if not (-tol <= self.hipl <= self.length / 2 + tol and -tol <= self.hipw <= self.width / 2 + tol):
            raise ValueError("hip parameters out of range")

    @property
    def part(self) -> Part:
        return Part(self.x0, self.y0, self.length, self.width, self.orientation)

    @property
    def components(self) -> tuple:
        return self.parts if self.parts else (self.part,)

    @property
    def free_params(self) -> int:
        return FREE_PARAMS[self.rtype]

    def footprint_polygon(self) -> Polygon:
        if self.footprint is not None:
            return Polygon(self.footprint)
        return self.part.rect().polygon

    def contains(self, x, y) -> np.ndarray:
        import shapely

        if self.footprint is None:
            u, v = self.part.local(x, y)
            return (np.abs(u) <= self.length / 2 + 1e-9) & (np.abs(v) <= self.width / 2 + 1e-9)
        return shapely.covers_xy(self.footprint_polygon(), np.asarray(x, float), np.asarray(y, float))


def type_hips(rtype: RoofType, length: float, width: float, hipl: float, hipw: float) -> tuple[float, float]:
    """Effective (hipl, hipw) of a component for a roof type."""
    rtype = RoofType(rtype)
    if rtype is RoofType.FLAT:
        return 0.0, 0.0
    if rtype is RoofType.GABLE:
        return 0.0, width / 2
    if rtype is RoofType.HIP:
        return min(hipl, length / 2), width / 2
    if rtype is RoofType.PYRAMID:
        return length / 2, width / 2
    return min(hipl, length / 2), min(hipw, width / 2)


def ramp_t(u, v, length, width, hipl, hipw):
    u = np.abs(np.asarray(u, float))
    v = np.abs(np.asarray(v, float))
    tv = np.clip((v - (width / 2 - hipw)) / hipw, 0.0, 1.0) if hipw > 0 else np.zeros(np.broadcast(u, v).shape)
    tu = np.clip((u - (length / 2 - hipl)) / hipl, 0.0, 1.0) if hipl > 0 else np.zeros(np.broadcast(u, v).shape)
    return np.maximum(tv, tu)


def _shape_t(parts, rtype, hipl, hipw, x, y):
    """Ramp parameter t for world points over one or more components (min over containing parts)."""
    best = any_in = fallback = None
    for p in parts:
        u, v = p.local(x, y)
        inside = (np.abs(u) <= p.length / 2 + 1e-9) & (np.abs(v) <= p.width / 2 + 1e-9)
        uc = np.clip(u, -p.length / 2, p.length / 2)
        vc = np.clip(v, -p.width / 2, p.width / 2)
        hl, hw = type_hips(rtype, p.length, p.width, hipl, hipw)
        t = ramp_t(uc, vc, p.length, p.width, hl, hw)
        t_in = np.where(inside, t, np.inf)
        best = t_in if best is None else np.minimum(best, t_in)
        any_in = inside if any_in is None else (any_in | inside)
        fallback = t if fallback is None else np.minimum(fallback, t)
    return np.where(any_in, best, fallback)


def roof_height(m: RoofModel, x, y):
    """Roof height at world points; NaN outside the footprint."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    t = _shape_t(m.components, m.rtype, m.hipl, m.hipw, x, y)
    h = m.z_ridge - (m.z_ridge - m.z_eave) * t
    out = np.where(m.contains(x, y), h, np.nan)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpec:
    ze: np.ndarray
    dz: np.ndarray
    hipl: np.ndarray
    hipw: np.ndarray


def _hip_values(h0: float, extent: float, cap: float) -> np.ndarray:
    m = int(math.floor(extent / 8 / HIP_STEP + 1e-9))
    vals = h0 + HIP_STEP * np.arange(-m, m + 1)
    vals = np.clip(vals, 0.0, cap)
    return np.unique(vals)


def search_spec(rtype: RoofType, ze0: float, length: float, width: float) -> SearchSpec:
    """Parameter grid of a type around its initial values."""
    rtype = RoofType(rtype)
    k = int(round(ZE_HALF_RANGE / Z_STEP))
    ze = ze0 + Z_STEP * np.arange(-k, k + 1)
    if rtype is RoofType.FLAT:
        dz = np.zeros(1)
    else:
        n = int(math.floor((DZ_MAX - DZ_MIN) / Z_STEP + 1e-9))
        dz = DZ_MIN + Z_STEP * np.arange(n + 1)
    hipl0, hipw0 = initial_hips(rtype, length, width)
    if rtype in (RoofType.HIP, RoofType.MANSARD):
        hipl = _hip_values(hipl0, length, length / 2)
    else:
        hipl = np.array([hipl0])
    if rtype is RoofType.MANSARD:
        hipw = _hip_values(hipw0, width, width / 2)
    else:
        hipw = np.array([hipw0])
    return SearchSpec(ze, dz, hipl, hipw)


def initial_hips(rtype: RoofType, length: float, width: float) -> tuple[float, float]:
    rtype = RoofType(rtype)
    return {
        RoofType.FLAT: (0.0, 0.0),
        RoofType.GABLE: (0.0, width / 2),
        RoofType.HIP: (length / 4, width / 2),
        RoofType.PYRAMID: (length / 2, width / 2),
        RoofType.MANSARD: (length / 4, width / 4),
    }[rtype]


@dataclass
class FitData:
    """DSM samples over a footprint and its terrain estimate."""

    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    mean_height: float
    terrain_z: float


def _footprint_pixels(parts, dsm: Grid, grow_px: float = 0.0):
    gsd = dsm.transform.gsd
    rows, cols = [], []
    for p in parts:
        r = Rect((p.cx, p.cy), p.length + 2 * grow_px * gsd, p.width + 2 * grow_px * gsd, p.orientation)
        rr, cc = rect_pixels(r, dsm.transform, dsm.shape)
        rows.append(rr)
        cols.append(cc)
    if not rows:
        return np.zeros(0, int), np.zeros(0, int)
    flat = np.unique(np.concatenate(rows) * dsm.width + np.concatenate(cols))
    return flat // dsm.width, flat % dsm.width


def fit_data(parts, dsm: Grid, cfg: Config | None = None, support: np.ndarray | None = None) -> FitData:
    """Footprint pixels (restricted to ``support`` when given) and the terrain height around them."""
    cfg = cfg or Config()
    rr, cc = _footprint_pixels(parts, dsm)
    h = dsm.as_float()
    d = h[rr, cc]
    ok = np.isfinite(d)
    if support is not None:
        ok &= np.asarray(support, bool)[rr, cc]
    if ok.sum() < 10:
        raise ValueError(f"footprint covers only {int(ok.sum())} valid DSM pixels (need 10)")
    rr, cc, d = rr[ok], cc[ok], d[ok]
    x, y = dsm.transform.pixel_center(cc, rr)
    inner = cfg.refine_px
    outer = inner + cfg.terrain_ring_px
    r_out, c_out = _footprint_pixels(parts, dsm, outer)
    r_in, c_in = _footprint_pixels(parts, dsm, inner)
    inner_set = set((r_in * dsm.width + c_in).tolist())
    ring = np.array([i for i in (r_out * dsm.width + c_out).tolist() if i not in inner_set], dtype=int)
    ring_h = h.ravel()[ring] if ring.size else np.zeros(0)
    ring_h = ring_h[np.isfinite(ring_h)]
    terrain = float(ring_h.min()) if ring_h.size else float(d.min())
    return FitData(np.asarray(x), np.asarray(y), d, float(d.mean()), terrain)


def init_params(rect, dsm: Grid, rtype, cfg: Config | None = None, data: FitData | None = None) -> RoofModel:
    """Initial model of a type per the standard starting table."""
    rtype = RoofType(rtype)
    part = rect if isinstance(rect, Part) else Part.of(rect)
    data = data or fit_data((part,), dsm, cfg)
    hbar = data.mean_height
    ze0 = hbar - 0.5
    zr0 = ze0 if rtype is RoofType.FLAT else hbar
    hl, hw = initial_hips(rtype, part.length, part.width)
    return RoofModel(rtype, part.cx, part.cy, part.orientation, part.length, part.width, zr0, ze0, hl, hw, data.terrain_z)


def _search(parts, ref: Part, data: FitData, types, ze0: float):
    """Exhaustive grid search; returns (type, ze, dz, hipl, hipw, rmse) of the optimum."""
    n = data.d.size
    results = []
    for rtype in types:
        spec = search_spec(rtype, ze0, ref.length, ref.width)
        for hl in spec.hipl:
            for hw in spec.hipw:
                t = _shape_t(parts, rtype, hl, hw, data.x, data.y)
                sse = kernels.grid_sse(1.0 - t, data.d, spec.ze, spec.dz)
                rmse = np.sqrt(np.maximum(sse, 0.0) / n)
                results.append((rtype, spec, float(hl), float(hw), rmse))
    best = min(float(r[4].min()) for r in results)
    cands = []
    for rtype, spec, hl, hw, rmse in results:
        ks, js = np.nonzero(rmse <= best + _TIE_TOL)
        for k, j in zip(ks.tolist(), js.tolist()):
            ze = float(spec.ze[k])
            dz = float(spec.dz[j])
            key = (FREE_PARAMS[rtype], ze, _TYPE_RANK[rtype], ze + dz, hl, hw)
            cands.append((key, rtype, ze, dz, hl, hw, float(rmse[k, j])))
    cands.sort(key=lambda c: c[0])
    _, rtype, ze, dz, hl, hw, rmse = cands[0]
    return rtype, ze, dz, hl, hw, rmse


def _model_from(parts, ref: Part, rtype, ze, dz, hl, hw, rmse, terrain, footprint=None) -> RoofModel:
    ehl, ehw = type_hips(rtype, ref.length, ref.width, hl, hw)
    return RoofModel(
        rtype, ref.cx, ref.cy, ref.orientation, ref.length, ref.width, ze + dz, ze, ehl, ehw, terrain, rmse,
        tuple(parts) if len(parts) > 1 else (), footprint,
    )


def fit_model(rect, dsm: Grid, types=TYPES, cfg: Config | None = None, support: np.ndarray | None = None) -> RoofModel:
    """Best roof primitive by exhaustive grid search over all (or the given) types.

    ``support`` is an optional building mask; footprint pixels outside it are ignored.
    """
    part = rect if isinstance(rect, Part) else Part.of(rect)
    data = fit_data((part,), dsm, cfg, support)
    ze0 = data.mean_height - 0.5
    rtype, ze, dz, hl, hw, rmse = _search((part,), part, data, [RoofType(t) for t in types], ze0)
    return _model_from((part,), part, rtype, ze, dz, hl, hw, rmse, data.terrain_z)


def refit(model: RoofModel, dsm: Grid, types, cfg: Config | None = None) -> RoofModel:
    """Re-run the search over ``model``'s footprint restricted to ``types``."""
    parts = model.components
    data = fit_data(parts, dsm, cfg)
    ref = max(parts, key=lambda p: p.length * p.width)
    init = fit_data((ref,), dsm, cfg).mean_height if len(parts) > 1 else data.mean_height
    rtype, ze, dz, hl, hw, rmse = _search(parts, ref, data, [RoofType(t) for t in types], init - 0.5)
    m = _model_from(parts, ref, rtype, ze, dz, hl, hw, rmse, data.terrain_z, model.footprint)
    if len(parts) > 1:
        m = replace(m, x0=model.x0, y0=model.y0, orientation=model.orientation, length=model.length,
                    width=model.width, hipl=min(m.hipl, model.length / 2), hipw=min(m.hipw, model.width / 2))
    return m


def model_rmse(m: RoofModel, dsm: Grid) -> float:
    data = fit_data(m.components, dsm)
    h = roof_height(m, data.x, data.y)
    return float(np.sqrt(np.nanmean((h - data.d) ** 2)))


# ---------------------------------------------------------------------------
# Type consistency
# ---------------------------------------------------------------------------

TYPE_MISMATCH_COST = 1.0 - math.exp(-1.0)


def build_type_problem(models, graph: RectGraph, cfg: Config) -> GCProblem:
    data = np.full((len(models), len(TYPES)), TYPE_MISMATCH_COST)
    for i, m in enumerate(models):
        data[i, TYPES.index(m.rtype)] = 0.0
    if not models:
        data = np.zeros((0, len(TYPES)))
    return GCProblem(data, np.array([t.value for t in TYPES]), cfg.gc_lambda, list(graph.edges))


def type_consistency(models, graph: RectGraph, dsm: Grid, cfg: Config) -> list[RoofModel]:
    """Smooth roof types over the neighbourhood graph; changed nodes are refit to their new type."""
    models = list(models)
    if not models:
        return models
    labels = solve_multilabel(build_type_problem(models, graph, cfg))
    out = []
    for m, lab in zip(models, labels):
        new = TYPES[int(lab)]
        out.append(m if new is m.rtype else refit(m, dsm, [new], cfg))
    return out


# ---------------------------------------------------------------------------
# Model merging
# ---------------------------------------------------------------------------

NOT_MERGE = None
_F, _G, _H, _P, _M = TYPES
MERGE_MATRIX = {
    _F: {_F: _F, _G: _G, _H: _H, _P: _F, _M: _M},
    _G: {_F: _G, _G: _G, _H: _H, _P: _G, _M: _M},
    _H: {_F: _H, _G: _H, _H: _H, _P: _H, _M: _M},
    _P: {_F: _F, _G: _G, _H: _H, _P: NOT_MERGE, _M: _M},
    _M: {_F: _M, _G: _M, _H: _M, _P: _M, _M: _M},
}


def merge_type(a, b):
    """Result type of merging two roof types, or None when they must not merge."""
    return MERGE_MATRIX[RoofType(a)][RoofType(b)]


def _contact(a: Part, b: Part, max_gap: float, max_angle: float):
    """b's box in a's frame if the two touch within ``max_gap``; else None."""
    if float(angle_diff(a.orientation, b.orientation, 90.0)) > max_angle:
        return None
    cs = b.rect().corners()
    u, v = a.local(cs[:, 0], cs[:, 1])
    bu0, bu1, bv0, bv1 = u.min(), u.max(), v.min(), v.max()
    hl, hw = a.length / 2, a.width / 2
    gu = max(bu0 - hl, -hl - bu1)
    gv = max(bv0 - hw, -hw - bv1)
    if gu > 0 and gv > 0:
        return None
    gap = max(gu, gv)
    if gap > max_gap + 1e-9:
        return None
    # contact must have positive length along the facing edges
    if gap >= -1e-9 and min(gu, gv) >= -1e-9:
        return None
    return [bu0, bu1, bv0, bv1], (0 if gu >= gv else 1), gap


def merged_footprint(a: RoofModel, b: RoofModel, cfg: Config | None = None, gsd: float = 1.0) -> Polygon:
    """Polygon enclosed by the extended side lines of two adjacent footprints.

    Works in ``a``'s frame: ``b``'s sides that lie within the edge tolerance of
    ``a``'s side lines are snapped onto them and the gap between the facing sides is
    closed, after which the enclosed region is the union of the two boxes.
    """
    cfg = cfg or Config()
    pa = max(a.components, key=lambda p: p.length * p.width)
    pb = max(b.components, key=lambda p: p.length * p.width)
    res = _contact(pa, pb, 2 * cfg.dilation_px * gsd, cfg.merge_max_angle_deg)
    if res is None:
        raise ValueError("footprints are not adjacent or orientations differ by more than the limit")
    bb, axis, gap = res
    hl, hw = pa.length / 2, pa.width / 2
    tol = cfg.edge_len_tol_px * gsd
    a_lines = [[-hl, hl], [-hw, hw]]
    for k in range(4):
        ax = k // 2
        for line in a_lines[ax]:
            if abs(bb[k] - line) < tol:
                bb[k] = line
    # close the gap between the facing sides
    if gap > 0:
        lo, hi = (0, 1) if axis == 0 else (2, 3)
        half = hl if axis == 0 else hw
        if bb[lo] >= half:
            bb[lo] = half
        else:
            bb[hi] = -half
    poly_local = unary_union([box(-hl, -hw, hl, hw), box(bb[0], bb[2], bb[1], bb[3])])
    poly_local = poly_local.simplify(0)
    if poly_local.geom_type != "Polygon":
        raise ValueError("merged footprint is not a single polygon")
    ang = pa.orientation
    world = shp_affinity.rotate(poly_local, ang, origin=(0, 0))
    world = shp_affinity.translate(world, pa.cx, pa.cy)
    coords = np.array(world.exterior.coords)[:-1]
    out = Polygon(coords)
    return out


def _parts_from_polygon(pa: Part, poly: Polygon, others) -> tuple:
    """Components of a merged footprint: one part if it is a rectangle, else the snapped boxes."""
    if len(poly.exterior.coords) - 1 == 4:
        c = np.array(poly.exterior.coords)[:-1]
        u, v = pa.local(c[:, 0], c[:, 1])
        u0, u1, v0, v1 = u.min(), u.max(), v.min(), v.max()
        a = math.radians(pa.orientation)
        cx = pa.cx + (u0 + u1) / 2 * math.cos(a) - (v0 + v1) / 2 * math.sin(a)
        cy = pa.cy + (u0 + u1) / 2 * math.sin(a) + (v0 + v1) / 2 * math.cos(a)
        du, dv = u1 - u0, v1 - v0
        if du >= dv:
            return (Part(cx, cy, du, dv, pa.orientation),)
        return (Part(cx, cy, dv, du, (pa.orientation + 90.0) % 180.0),)
    return tuple(others)


def merge_models(a: RoofModel, b: RoofModel, dsm: Grid, ortho: Grid | None = None, cfg: Config | None = None):
    """Merge two adjacent models into one with a combined footprint.

    Returns the merged model, or None when the merge matrix, the footprint
    construction or the colour/height criteria refuse the merge.
    """
    cfg = cfg or Config()
    new_type = merge_type(a.rtype, b.rtype)
    if new_type is None:
        return None
    gsd = dsm.transform.gsd
    try:
        fp = merged_footprint(a, b, cfg, gsd)
    except ValueError:
        return None
    ra = rect_features(max(a.components, key=lambda p: p.length * p.width).rect(), dsm, ortho)
    rb = rect_features(max(b.components, key=lambda p: p.length * p.width).rect(), dsm, ortho)
    if ortho is not None and not color_distance(ra, rb) < cfg.t_d:
        return None
    if not abs(ra.mean_height - rb.mean_height) < cfg.t_h1_m:
        return None
    if _edge_step(ra, rb, dsm, cfg) >= cfg.t_h2_m:
        return None
    big, small = (a, b) if a.length * a.width >= b.length * b.width else (b, a)
    pbig = max(big.components, key=lambda p: p.length * p.width)
    parts = _parts_from_polygon(pbig, fp, list(big.components) + list(small.components))
    single = len(parts) == 1
    data = fit_data(parts, dsm, cfg)
    init = fit_data((pbig,), dsm, cfg).mean_height
    ref = parts[0] if single else pbig
    rtype, ze, dz, hl, hw, rmse = _search(parts, ref, data, [new_type], init - 0.5)
    footprint = None if single else tuple(map(tuple, np.array(fp.exterior.coords)[:-1]))
    return _model_from(parts, ref, rtype, ze, dz, hl, hw, rmse, data.terrain_z, footprint)


def _edge_step(ra: Rect, rb: Rect, dsm: Grid, cfg: Config) -> float:
    """Height step across the contact of two rectangles (loose adjacency)."""
    from .decompose import Facing, edge_height_step

    gsd = dsm.transform.gsd
    res = _contact(Part.of(ra), Part.of(rb), 2 * cfg.dilation_px * gsd, cfg.merge_max_angle_deg)
    if res is None:
        return math.inf
    (bu0, bu1, bv0, bv1), axis, _ = res
    hl, hw = ra.length / 2, ra.width / 2
    dil = cfg.dilation_px * gsd
    if axis == 0:
        span = (max(-hw, bv0), min(hw, bv1))
        band = (bu0 - dil, hl + dil) if bu0 >= 0 else (-hl - dil, bu1 + dil)
        sign = 1 if bu0 >= 0 else -1
    else:
        span = (max(-hl, bu0), min(hl, bu1))
        band = (bv0 - dil, hw + dil) if bv0 >= 0 else (-hw - dil, bv1 + dil)
        sign = 1 if bv0 >= 0 else -1
    if span[1] <= span[0]:
        return math.inf
    return edge_height_step(ra, Facing(axis, sign, 0.0, span, band, ()), dsm)


def merge_instance_models(models, dsm: Grid, ortho: Grid | None, cfg: Config) -> list[RoofModel]:
    """Greedy pairwise merging within one building, largest combined area first."""
    models = list(models)
    while True:
        best = None
        order = sorted(
            ((i, j) for i in range(len(models)) for j in range(i + 1, len(models))),
            key=lambda ij: (-(models[ij[0]].length * models[ij[0]].width + models[ij[1]].length * models[ij[1]].width), ij),
        )
        for i, j in order:
            m = merge_models(models[i], models[j], dsm, ortho, cfg)
            if m is not None:
                best = (i, j, m)
                break
        if best is None:
            return models
        i, j, m = best
        models[i] = m
        del models[j]


# ---------------------------------------------------------------------------
# Meshes and the irregular fallback
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if f.size:
            a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
            area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
            if np.any(area2 <= 1e-12):
                raise ValueError("degenerate face")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


def _clean_faces(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    if not len(f):
        return f
    f = f[(f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])]
    if len(f):
        a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        f = f[np.linalg.norm(np.cross(b - a, c - a), axis=1) > 1e-12]
    if len(f):
        key = np.sort(f, axis=1)
        _, idx = np.unique(key, axis=0, return_index=True)
        f = f[np.sort(idx)]
    return f


def triangulate_dsm(mask: np.ndarray, dsm: Grid) -> Mesh:
    """Two triangles per 2x2 block of building pixel centres."""
    m = np.asarray(mask, dtype=bool)
    h = dsm.as_float()
    rows, cols = m.shape
    idx = -np.ones((rows, cols), dtype=np.int64)
    ok = m & np.isfinite(h)
    rr, cc = np.nonzero(ok)
    idx[rr, cc] = np.arange(rr.size)
    x, y = dsm.transform.pixel_center(cc, rr)
    verts = np.column_stack([x, y, h[rr, cc]])
    cell = ok[:-1, :-1] & ok[:-1, 1:] & ok[1:, :-1] & ok[1:, 1:]
    r0, c0 = np.nonzero(cell)
    a = idx[r0, c0]
    b = idx[r0, c0 + 1]
    c = idx[r0 + 1, c0]
    d = idx[r0 + 1, c0 + 1]
    faces = np.concatenate([np.column_stack([a, c, b]), np.column_stack([b, c, d])])
    return Mesh(verts, _clean_faces(verts, faces))


def decimate(mesh: Mesh, cell: float) -> Mesh:
    """Vertex clustering on an xy grid of size ``cell``; clusters collapse to their mean."""
    v = mesh.vertices
    if not len(v):
        return mesh
    key = np.floor((v[:, :2] - v[:, :2].min(axis=0)) / cell).astype(np.int64)
    _, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    n = inv.max() + 1
    cnt = np.bincount(inv, minlength=n).astype(float)
    nv = np.column_stack([np.bincount(inv, weights=v[:, k], minlength=n) / cnt for k in range(3)])
    nf = _clean_faces(nv, inv[mesh.faces])
    used = np.unique(nf) if len(nf) else np.zeros(0, dtype=np.int64)
    remap = -np.ones(n, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return Mesh(nv[used], remap[nf] if len(nf) else nf)


def irregular_fallback(instance_mask: np.ndarray, rects, dsm: Grid, cfg: Config) -> Mesh | None:
    """DSM mesh for buildings that rectangles explain poorly; None when the gates do not fire."""
    m = np.asarray(instance_mask, dtype=bool)
    area = int(m.sum())
    covered = rects_mask(rects, dsm.transform, dsm.shape)
    inter = int((covered & m).sum())
    union = int((covered | m).sum())
    iou = inter / union if union else 1.0
    if not (iou < cfg.irregular_iou and area > cfg.irregular_area_px):
        return None
    mesh = triangulate_dsm(m, dsm)
    k = 1
    while mesh.n_faces > cfg.max_faces:
        k += 1
        mesh = decimate(triangulate_dsm(m, dsm), k * dsm.transform.gsd)
    return mesh


def mesh_height(mesh: Mesh, x, y) -> np.ndarray:
    """Height of the mesh surface at world points (max over covering triangles; NaN elsewhere)."""
    x = np.asarray(x, float).ravel()
    y = np.asarray(y, float).ravel()
    out = np.full(x.shape, np.nan)
    v = mesh.vertices
    for f in mesh.faces:
        a, b, c = v[f]
        det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
        if abs(det) < 1e-15:
            continue
        lx0, lx1 = min(a[0], b[0], c[0]) - 1e-9, max(a[0], b[0], c[0]) + 1e-9
        ly0, ly1 = min(a[1], b[1], c[1]) - 1e-9, max(a[1], b[1], c[1]) + 1e-9
        sel = np.flatnonzero((x >= lx0) & (x <= lx1) & (y >= ly0) & (y <= ly1))
        if not sel.size:
            continue
        l1 = ((b[1] - c[1]) * (x[sel] - c[0]) + (c[0] - b[0]) * (y[sel] - c[1])) / det
        l2 = ((c[1] - a[1]) * (x[sel] - c[0]) + (a[0] - c[0]) * (y[sel] - c[1])) / det
        l3 = 1 - l1 - l2
        inside = (l1 >= -1e-9) & (l2 >= -1e-9) & (l3 >= -1e-9)
        z = l1 * a[2] + l2 * b[2] + l3 * c[2]
        s = sel[inside]
        out[s] = np.fmax(out[s], z[inside])
    return out
