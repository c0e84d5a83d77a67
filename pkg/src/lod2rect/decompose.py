"""Rectangle decomposition of building polygons and merging of over-split pieces.

Each polygon is resampled on a lattice aligned with its main orientation.  At
the coarsest pyramid level the mask is split along DSM/colour separators and
maximal inner rectangles are peeled off; rectangles are then projected back to
full resolution and their edges refined.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import shapely
from scipy import ndimage
from shapely.geometry import Polygon

from . import kernels
from .geodata import Config, Grid, sample_grid
from .polygonize import BuildingPolygon, angle_diff, dominant_orientation

_EPS = 1e-9


def _cos_sin(theta_deg: float) -> tuple[float, float]:
    a = math.radians(theta_deg)
    c, s = math.cos(a), math.sin(a)
    return (0.0 if abs(c) < 1e-12 else c), (0.0 if abs(s) < 1e-12 else s)


@dataclass(frozen=True, eq=False)
class Rect:
    center: tuple
    length: float
    width: float
    orientation: float
    mean_color: tuple = (0.0, 0.0, 0.0)
    color_std: tuple = (0.0, 0.0, 0.0)
    mean_height: float = 0.0
    parent_instance: int = 0
    pixel_count: int = 0

    def __post_init__(self):
        if not (self.length >= self.width > 0):
            raise ValueError(f"rect needs length >= width > 0, got {self.length}, {self.width}")
        o = float(self.orientation) % 180.0
        object.__setattr__(self, "orientation", 0.0 if o >= 180.0 else o)
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "mean_color", tuple(float(c) for c in self.mean_color))
        object.__setattr__(self, "color_std", tuple(float(c) for c in self.color_std))

    @property
    def area(self) -> float:
        return self.length * self.width

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        c, s = _cos_sin(self.orientation)
        return np.array([c, s]), np.array([-s, c])

    def to_local(self, x, y):
        """(u, v) coordinates: u along the length axis, v along the width axis."""
        u_ax, v_ax = self.axes
        dx = np.asarray(x, float) - self.center[0]
        dy = np.asarray(y, float) - self.center[1]
        return dx * u_ax[0] + dy * u_ax[1], dx * v_ax[0] + dy * v_ax[1]

    def to_world(self, u, v):
        u_ax, v_ax = self.axes
        u = np.asarray(u, float)
        v = np.asarray(v, float)
        return self.center[0] + u * u_ax[0] + v * v_ax[0], self.center[1] + u * u_ax[1] + v * v_ax[1]

    def corners(self) -> np.ndarray:
        """Counter-clockwise world corners."""
        hl, hw = self.length / 2, self.width / 2
        x, y = self.to_world([-hl, hl, hl, -hl], [-hw, -hw, hw, hw])
        return np.column_stack([x, y])

    @property
    def polygon(self) -> Polygon:
        return Polygon(self.corners())

    def contains(self, x, y, tol: float = _EPS):
        u, v = self.to_local(x, y)
        return (np.abs(u) < self.length / 2 - tol) & (np.abs(v) < self.width / 2 - tol)


def rect_pixels(rect: Rect, transform, shape) -> tuple[np.ndarray, np.ndarray]:
    """Rows and columns of raster pixels whose centres lie strictly inside ``rect``."""
    cs = rect.corners()
    cols, rows = transform.world_to_pixel(cs[:, 0], cs[:, 1])
    c0 = max(int(math.floor(cols.min())) - 1, 0)
    c1 = min(int(math.ceil(cols.max())) + 1, shape[1])
    r0 = max(int(math.floor(rows.min())) - 1, 0)
    r1 = min(int(math.ceil(rows.max())) + 1, shape[0])
    if c1 <= c0 or r1 <= r0:
        return np.zeros(0, int), np.zeros(0, int)
    rr, cc = np.mgrid[r0:r1, c0:c1]
    x, y = transform.pixel_center(cc, rr)
    inside = rect.contains(x, y)
    return rr[inside], cc[inside]


def rect_features(rect: Rect, dsm: Grid, ortho: Grid | None) -> Rect:
    """Recompute colour and height features of ``rect`` from raster pixels."""
    rr, cc = rect_pixels(rect, dsm.transform, dsm.shape)
    h = dsm.as_float()[rr, cc]
    h = h[np.isfinite(h)]
    mean_h = float(h.mean()) if h.size else float("nan")
    mc = sd = (0.0, 0.0, 0.0)
    if ortho is not None and rr.size:
        px = np.asarray(ortho.values, dtype=float)[rr, cc]
        mc = tuple(px.mean(axis=0))
        sd = tuple(px.std(axis=0))
    return replace(rect, mean_color=mc, color_std=sd, mean_height=mean_h, pixel_count=int(rr.size))


# ---------------------------------------------------------------------------
# Oriented lattice
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalFrame:
    """Pixel lattice rotated by ``theta`` degrees.

    Local pixel (col, row) has its outer corner at world
    ``ref + (a0 + col*gsd) * e + (b0 - row*gsd) * n`` where ``e`` points along
    ``theta`` and ``n`` is ``e`` turned by +90 degrees.
    """

    ref: tuple
    theta: float
    gsd: float
    a0: float
    b0: float
    cols: int
    rows: int

    @property
    def axes(self):
        c, s = _cos_sin(self.theta)
        return np.array([c, s]), np.array([-s, c])

    def ab(self, x, y):
        e, n = self.axes
        dx = np.asarray(x, float) - self.ref[0]
        dy = np.asarray(y, float) - self.ref[1]
        return dx * e[0] + dy * e[1], dx * n[0] + dy * n[1]

    def world(self, col, row):
        """World coordinates of fractional lattice indices."""
        e, n = self.axes
        a = self.a0 + np.asarray(col, float) * self.gsd
        b = self.b0 - np.asarray(row, float) * self.gsd
        return self.ref[0] + a * e[0] + b * n[0], self.ref[1] + a * e[1] + b * n[1]

    def centers(self):
        rr, cc = np.mgrid[0 : self.rows, 0 : self.cols]
        return self.world(cc + 0.5, rr + 0.5)


def make_frame(poly_xy: np.ndarray, theta: float, dsm: Grid, pad_px: int = 8, block: int = 4) -> LocalFrame:
    t = dsm.transform
    ref = (t.origin_x, t.origin_y)
    gsd = t.gsd
    tmp = LocalFrame(ref, theta, gsd, 0.0, 0.0, 0, 0)
    a, b = tmp.ab(poly_xy[:, 0], poly_xy[:, 1])
    ia0 = math.floor(a.min() / gsd + _EPS) - pad_px
    ia0 = block * math.floor(ia0 / block)
    ib0 = math.ceil(b.max() / gsd - _EPS) + pad_px
    ib0 = block * math.ceil(ib0 / block)
    ia1 = math.ceil(a.max() / gsd - _EPS) + pad_px
    ib1 = math.floor(b.min() / gsd + _EPS) - pad_px
    cols = block * math.ceil((ia1 - ia0) / block)
    rows = block * math.ceil((ib0 - ib1) / block)
    return LocalFrame(ref, theta, gsd, ia0 * gsd, ib0 * gsd, int(cols), int(rows))


@dataclass
class LocalRasters:
    frame: LocalFrame
    mask: np.ndarray
    dsm: np.ndarray
    ortho: np.ndarray


def sample_local(frame: LocalFrame, poly: BuildingPolygon, dsm: Grid, ortho: Grid | None) -> LocalRasters:
    x, y = frame.centers()
    mask = shapely.contains_xy(poly.shape, x, y)
    h = sample_grid(dsm, x, y, "bilinear")
    if ortho is not None:
        rgb = sample_grid(ortho, x, y, "bilinear")
    else:
        rgb = np.zeros(x.shape + (3,))
    return LocalRasters(frame, mask, h, rgb)


def block_reduce(a: np.ndarray, f: int, func=np.nanmean) -> np.ndarray:
    r, c = a.shape[:2]
    shp = (r // f, f, c // f, f) + a.shape[2:]
    with np.errstate(all="ignore"):
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return func(a[: r // f * f, : c // f * f].reshape(shp), axis=(1, 3))


# ---------------------------------------------------------------------------
# Separators
# ---------------------------------------------------------------------------


@dataclass
class Separators:
    """Cut cracks: ``vcut[r, c]`` between columns c and c+1, ``hcut[r, c]`` between rows r and r+1."""

    vcut: np.ndarray
    hcut: np.ndarray

    def __len__(self):
        return int(self.vcut.sum() + self.hcut.sum())

    def columns(self) -> list[int]:
        """Crack positions (c + 1) of vertical separators."""
        return sorted({int(c) + 1 for c in np.nonzero(self.vcut)[1]})

    def rows(self) -> list[int]:
        return sorted({int(r) + 1 for r in np.nonzero(self.hcut)[0]})


def _nms_1d(g: np.ndarray, half: int) -> np.ndarray:
    """Keep values that are maximal within +-half along axis 1 (first of equal maxima wins)."""
    keep = np.isfinite(g)
    gg = np.where(np.isfinite(g), g, -np.inf)
    n = g.shape[1]
    for k in range(1, half + 1):
        left = np.full_like(gg, -np.inf)
        left[:, k:] = gg[:, : n - k]
        right = np.full_like(gg, -np.inf)
        right[:, : n - k] = gg[:, k:]
        keep &= (gg > left) & (gg >= right)
    return keep


def _runs(line: np.ndarray):
    padded = np.concatenate(([False], line, [False]))
    e = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(e[::2], e[1::2]))


def candidate_separators(dsm, ortho, mask, cfg: Config | None = None, buffer_px: int | None = None) -> Separators:
    """Height steps that also show a colour change, on a lattice aligned with the building."""
    cfg = cfg or Config()
    buf = cfg.color_buffer_px if buffer_px is None else buffer_px
    h = np.asarray(getattr(dsm, "values", dsm), dtype=float)
    rgb = np.asarray(getattr(ortho, "values", ortho), dtype=float)
    m = np.asarray(getattr(mask, "values", mask)) > 0
    if rgb.ndim == 2:
        rgb = rgb[..., None]
    half = cfg.nms_window_px // 2

    def one_direction(h, rgb, m):
        rows, cols = m.shape
        with np.errstate(invalid="ignore"):
            g = np.abs(h[:, 1:] - h[:, :-1])
        inside = m[:, 1:] & m[:, :-1]
        g = np.where(inside, g, np.nan)
        cand = _nms_1d(g, half) & (g > cfg.dsm_grad_m)
        out = np.zeros_like(cand)
        for c in range(cand.shape[1]):
            for r0, r1 in _runs(cand[:, c]):
                lo = slice(max(c + 1 - buf, 0), c + 1)
                hi = slice(c + 1, min(c + 1 + buf, cols))
                left = rgb[r0:r1, lo][m[r0:r1, lo]]
                right = rgb[r0:r1, hi][m[r0:r1, hi]]
                if len(left) == 0 or len(right) == 0:
                    continue
                diff = float(np.linalg.norm(left.mean(axis=0) - right.mean(axis=0)))
                if diff > cfg.t_d:
                    out[r0:r1, c] = True
        return out

    vcut = one_direction(h, rgb, m)
    hcut = one_direction(h.T, rgb.transpose(1, 0, 2), m.T).T
    return Separators(vcut, hcut)


def split_by_separators(mask: np.ndarray, seps: Separators) -> tuple[np.ndarray, int]:
    """4-connected components of ``mask`` that do not step across a separator crack."""
    m = np.asarray(mask, dtype=bool)
    lab = np.zeros(m.shape, dtype=np.int32)
    rows, cols = m.shape
    n = 0
    for r in range(rows):
        for c in range(cols):
            if not m[r, c] or lab[r, c]:
                continue
            n += 1
            lab[r, c] = n
            stack = [(r, c)]
            while stack:
                pr, pc = stack.pop()
                nbrs = []
                if pr > 0 and not seps.hcut[pr - 1, pc]:
                    nbrs.append((pr - 1, pc))
                if pr + 1 < rows and not seps.hcut[pr, pc]:
                    nbrs.append((pr + 1, pc))
                if pc > 0 and not seps.vcut[pr, pc - 1]:
                    nbrs.append((pr, pc - 1))
                if pc + 1 < cols and not seps.vcut[pr, pc]:
                    nbrs.append((pr, pc + 1))
                for q in nbrs:
                    if m[q] and not lab[q]:
                        lab[q] = n
                        stack.append(q)
    return lab, n


# ---------------------------------------------------------------------------
# Peeling and refinement
# ---------------------------------------------------------------------------


def max_inner_rect(mask) -> tuple[int, int, int, int]:
    """Largest axis-aligned all-true rectangle as (row, col, height, width)."""
    m = np.asarray(getattr(mask, "values", mask)) > 0
    if not m.any():
        raise ValueError("empty mask")
    return kernels.max_inner_rect(m)


def peel_rectangles(mask: np.ndarray, min_area: int, min_side: int = 1) -> list[tuple[int, int, int, int]]:
    """Repeatedly remove the maximal inner rectangle while the residual is large enough."""
    res = np.array(mask, dtype=bool)
    out = []
    while res.sum() >= min_area:
        r, c, h, w = kernels.max_inner_rect(res)
        if min(h, w) < min_side:
            break
        out.append((r, c, h, w))
        res[r : r + h, c : c + w] = False
    return out


def _refine_box(box, mask, dsm, coarse_outside, cfg: Config):
    """Move each edge of a full-resolution box by at most ``cfg.refine_px``.

    ``coarse_outside`` maps side name -> True when the box borders non-building
    area on that side (an external edge).
    """
    r0, c0, r1, c1 = box
    k = cfg.refine_px
    rows, cols = mask.shape

    def frac_row(r, ca, cb):
        return mask[r, ca:cb].mean() if 0 <= r < rows and cb > ca else 0.0

    def frac_col(c, ra, rb):
        return mask[ra:rb, c].mean() if 0 <= c < cols and rb > ra else 0.0

    def step_row(r, ca, cb):  # height step across crack above row r
        if r <= 0 or r >= rows:
            return -1.0
        with np.errstate(invalid="ignore"):
            v = np.nanmean(np.abs(dsm[r, ca:cb] - dsm[r - 1, ca:cb])) if cb > ca else np.nan
        return -1.0 if not np.isfinite(v) else float(v)

    def step_col(c, ra, rb):
        if c <= 0 or c >= cols:
            return -1.0
        with np.errstate(invalid="ignore"):
            v = np.nanmean(np.abs(dsm[ra:rb, c] - dsm[ra:rb, c - 1])) if rb > ra else np.nan
        return -1.0 if not np.isfinite(v) else float(v)

    def external(pos, opposite, inward, frac):
        """Grow outward over lines with majority coverage, otherwise shrink inward."""
        start = pos
        for _ in range(k):
            outside = pos - 1 if inward > 0 else pos
            if frac(outside) > 0.5:
                pos -= inward
            else:
                break
        if pos != start:
            return pos
        for _ in range(k):
            inside = pos if inward > 0 else pos - 1
            if frac(inside) <= 0.5 and abs(opposite - pos) > 1:
                pos += inward
            else:
                break
        return pos

    def internal(pos, step):
        best, val = pos, -1.0
        for p in range(pos - k, pos + k + 1):
            s = step(p)
            if s > val + 1e-12:
                best, val = p, s
        return best if val > cfg.dsm_grad_m else pos

    # top edge: rows r0.., inward +1
    if coarse_outside["top"]:
        r0 = external(r0, r1, +1, lambda r: frac_row(r, c0, c1))
    else:
        r0 = internal(r0, lambda p: step_row(p, c0, c1))
    if coarse_outside["bottom"]:
        r1 = external(r1, r0, -1, lambda r: frac_row(r, c0, c1))
    else:
        r1 = internal(r1, lambda p: step_row(p, c0, c1))
    if coarse_outside["left"]:
        c0 = external(c0, c1, +1, lambda c: frac_col(c, r0, r1))
    else:
        c0 = internal(c0, lambda p: step_col(p, r0, r1))
    if coarse_outside["right"]:
        c1 = external(c1, c0, -1, lambda c: frac_col(c, r0, r1))
    else:
        c1 = internal(c1, lambda p: step_col(p, r0, r1))
    return r0, c0, r1, c1


def _resolve_overlaps(boxes):
    """Clip later boxes so no two overlap; the cut that keeps the most area wins."""
    out = []
    for box in boxes:
        r0, c0, r1, c1 = box
        for (a0, b0, a1, b1) in out:
            if r0 < a1 and a0 < r1 and c0 < b1 and b0 < c1:
                opts = [
                    (a1, c0, r1, c1),  # move top below the other box
                    (r0, c0, a0, c1),  # move bottom above it
                    (r0, b1, r1, c1),  # move left edge right of it
                    (r0, c0, r1, b0),  # move right edge left of it
                ]
                areas = [max(o[2] - o[0], 0) * max(o[3] - o[1], 0) for o in opts]
                r0, c0, r1, c1 = opts[int(np.argmax(areas))]
        if r1 > r0 and c1 > c0:
            out.append((r0, c0, r1, c1))
    return out


def box_to_rect(frame: LocalFrame, box, parent: int = 0) -> Rect:
    r0, c0, r1, c1 = box
    cx, cy = frame.world((c0 + c1) / 2, (r0 + r1) / 2)
    along = (c1 - c0) * frame.gsd
    across = (r1 - r0) * frame.gsd
    if along >= across:
        return Rect((float(cx), float(cy)), along, across, frame.theta, parent_instance=parent)
    return Rect((float(cx), float(cy)), across, along, frame.theta + 90.0, parent_instance=parent)


def snap_external_edges(rect: Rect, region: np.ndarray, transform, band_px: float = 2.0) -> Rect:
    """Move outer sides of ``rect`` to sub-pixel positions using the building mask.

    Within a band of +-``band_px`` around a side, the share of building pixel
    centres locates the edge: an edge at the band centre gives one half.  Sides
    whose outer half band is (nearly) all building are internal and stay put;
    on partly shared sides only the stretches facing ground are used.
    """
    g = transform.gsd
    b = band_px * g
    corners = rect.corners()
    c0, r0 = transform.world_to_pixel(corners[:, 0].min() - 2 * b, corners[:, 1].max() + 2 * b)
    c1, r1 = transform.world_to_pixel(corners[:, 0].max() + 2 * b, corners[:, 1].min() - 2 * b)
    rows, cols = region.shape
    ra, rb = max(int(math.floor(min(r0, r1))), 0), min(int(math.ceil(max(r0, r1))) + 1, rows)
    ca, cb = max(int(math.floor(min(c0, c1))), 0), min(int(math.ceil(max(c0, c1))) + 1, cols)
    if ra >= rb or ca >= cb:
        return rect
    rr, cc = np.mgrid[ra:rb, ca:cb]
    x, y = transform.pixel_center(cc, rr)
    u, v = rect.to_local(x, y)
    inb = region[ra:rb, ca:cb]
    ext = [-rect.length / 2, rect.length / 2, -rect.width / 2, rect.width / 2]
    new = list(ext)
    for k, (q, other, o_half) in enumerate(
        [(-u, v, rect.width / 2), (u, v, rect.width / 2), (-v, u, rect.length / 2), (v, u, rect.length / 2)]
    ):
        half = abs(ext[k])
        span = np.abs(other) <= o_half - g
        strip = span & (q >= half - b) & (q <= half + b)
        n_all = int(strip.sum())
        if n_all == 0:
            continue
        # drop stretches of the side that face a neighbour (outer half all building)
        bucket = np.floor(other / g).astype(np.int64)
        for key in np.unique(bucket[strip]):
            line = strip & (bucket == key)
            out_line = line & (q > half)
            if out_line.any() and inb[out_line].mean() >= 0.9:
                strip &= bucket != key
        n_all = int(strip.sum())
        outer = strip & (q > half)
        inner = strip & (q < half)
        if not outer.any() or not inner.any():
            continue
        if inb[outer].mean() >= 0.9 or inb[inner].mean() <= 0.5:
            continue
        pos = half - b + 2 * b * inb[strip].sum() / n_all
        if abs(pos - half) <= 0.75 * b:
            new[k] = math.copysign(pos, ext[k])
    u0, u1, v0, v1 = new
    if u1 - u0 <= 0 or v1 - v0 <= 0:
        return rect
    cx, cy = rect.to_world((u0 + u1) / 2, (v0 + v1) / 2)
    L, W, th = u1 - u0, v1 - v0, rect.orientation
    if W > L:
        L, W, th = W, L, th + 90.0
    return replace(rect, center=(float(cx), float(cy)), length=float(L), width=float(W), orientation=th)


def polygon_orientation(poly: BuildingPolygon, gsd: float) -> float:
    if poly.main_orientations:
        return float(poly.main_orientations[0])
    return dominant_orientation(poly, gsd)


def coarse_mask(cover: np.ndarray) -> np.ndarray:
    """Majority cells, plus corner cells that an edge crossing at 0.5..0.7 coverage would drop.

    A corner cell of a rectangle covers the product of its two edge fractions, so it
    can miss the majority while both neighbouring edge cells pass.
    """
    m = cover >= 0.5
    out = m.copy()
    p = np.pad(m, 1)
    rows, cols = m.shape
    for dr in (-1, 1):
        for dc in (-1, 1):
            # the row neighbour, the column neighbour and the diagonal all lie inward
            nr = p[1 + dr : 1 + dr + rows, 1 : 1 + cols]
            nc = p[1 : 1 + rows, 1 + dc : 1 + dc + cols]
            nd = p[1 + dr : 1 + dr + rows, 1 + dc : 1 + dc + cols]
            out |= (cover >= 0.25) & nr & nc & nd
    return out


def decompose_pyramid(poly: BuildingPolygon, dsm: Grid, ortho: Grid | None, cfg: Config,
                      region: np.ndarray | None = None) -> list[Rect]:
    """Split a polygon into non-overlapping rectangles aligned with its main orientation.

    With the building's pixel ``region`` the outer sides are placed to sub-pixel accuracy.
    """
    gsd = dsm.transform.gsd
    theta = polygon_orientation(poly, gsd)
    f = 2 ** (cfg.pyramid_levels - 1)
    frame = make_frame(poly.vertices, theta, dsm, pad_px=2 * f, block=f)
    loc = sample_local(frame, poly, dsm, ortho)
    cmask = coarse_mask(block_reduce(loc.mask.astype(float), f, np.mean))
    if not cmask.any():
        return []
    # block means over building pixels only, so outlines do not read as height steps
    inside = loc.mask
    if region is not None:
        # interpolated samples next to the outline blend in ground: keep pixels whose
        # source neighbourhood is entirely building
        core = ndimage.binary_erosion(region, np.ones((3, 3), bool))
        x, y = frame.centers()
        core_loc = sample_grid(Grid(core.astype(np.float64), dsm.transform), x, y, "nearest") > 0.5
        inside = inside & core_loc
    ch = block_reduce(np.where(inside, loc.dsm, np.nan), f)
    crgb = block_reduce(np.where(inside[..., None], loc.ortho, np.nan), f)
    seps = candidate_separators(ch, crgb, cmask, cfg)
    lab, n = split_by_separators(cmask, seps)
    coarse = []
    for i in range(1, n + 1):
        coarse.extend(peel_rectangles(lab == i, cfg.peel_min_area_px, cfg.peel_min_side_px))
    crow, ccol = cmask.shape
    boxes = []
    for r, c, h, w in coarse:
        def outside(sl):
            cells = cmask[sl]
            return cells.size == 0 or cells.mean() < 0.5

        sides = {
            "top": outside((slice(max(r - 1, 0), r), slice(c, c + w))),
            "bottom": outside((slice(r + h, min(r + h + 1, crow)), slice(c, c + w))),
            "left": outside((slice(r, r + h), slice(max(c - 1, 0), c))),
            "right": outside((slice(r, r + h), slice(c + w, min(c + w + 1, ccol)))),
        }
        full = (r * f, c * f, (r + h) * f, (c + w) * f)
        boxes.append(_refine_box(full, loc.mask, loc.dsm, sides, cfg))
    boxes = _resolve_overlaps(boxes)
    rects = [box_to_rect(frame, b, poly.source_instance) for b in boxes]
    if region is not None:
        rects = [snap_external_edges(r, region, dsm.transform) for r in rects]
    return [rect_features(r, dsm, ortho) for r in rects]


# ---------------------------------------------------------------------------
# Merging over-split rectangles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Facing:
    """How rectangle ``b`` faces ``a`` in ``a``'s (u, v) frame."""

    axis: int  # 0: b lies along u, 1: along v
    sign: int  # +1 when b is on the positive side
    gap: float
    span: tuple  # shared extent along the other axis
    band: tuple  # across-axis interval where both dilations overlap
    union: tuple  # (u0, u1, v0, v1) bounding box of both


def facing(a: Rect, b: Rect, cfg: Config, gsd: float) -> Facing | None:
    """Adjacency of two rectangles, or None.

    Adjacent means: orientations agree within ``merge_max_angle_deg`` (mod 90), the
    ``dilation_px`` dilations overlap, the facing edges differ in length and in
    both end points by less than ``edge_len_tol_px`` so that their union is a
    rectangle.
    """
    if float(angle_diff(a.orientation, b.orientation, 90.0)) > cfg.merge_max_angle_deg:
        return None
    cs = b.corners()
    u, v = a.to_local(cs[:, 0], cs[:, 1])
    bu0, bu1, bv0, bv1 = u.min(), u.max(), v.min(), v.max()
    hl, hw = a.length / 2, a.width / 2
    gu = max(bu0 - hl, -hl - bu1)
    gv = max(bv0 - hw, -hw - bv1)
    axis = 0 if gu >= gv else 1
    gap = gu if axis == 0 else gv
    dil = cfg.dilation_px * gsd
    tol = cfg.edge_len_tol_px * gsd
    if gap > 2 * dil + _EPS:
        return None
    if axis == 0:
        alo, ahi, blo, bhi = -hw, hw, bv0, bv1
        sign = 1 if bu0 - hl >= -hl - bu1 else -1
        if sign > 0:
            band = (bu0 - dil, hl + dil)
        else:
            band = (-hl - dil, bu1 + dil)
    else:
        alo, ahi, blo, bhi = -hl, hl, bu0, bu1
        sign = 1 if bv0 - hw >= -hw - bv1 else -1
        if sign > 0:
            band = (bv0 - dil, hw + dil)
        else:
            band = (-hw - dil, bv1 + dil)
    if abs((ahi - alo) - (bhi - blo)) >= tol or abs(alo - blo) >= tol or abs(ahi - bhi) >= tol:
        return None
    span = (max(alo, blo), min(ahi, bhi))
    if span[1] <= span[0]:
        return None
    union = (min(-hl, bu0), max(hl, bu1), min(-hw, bv0), max(hw, bv1))
    return Facing(axis, sign, float(gap), span, band, union)


def edge_height_step(a: Rect, f: Facing, dsm: Grid) -> float:
    """Largest DSM difference between neighbouring samples across the common edge."""
    gsd = dsm.transform.gsd
    lo, hi = f.span
    n_along = max(int(round((hi - lo) / gsd)), 1)
    t = lo + (np.arange(n_along) + 0.5) * (hi - lo) / n_along
    b0, b1 = f.band
    n_across = max(int(math.floor((b1 - b0) / gsd + _EPS)), 2)
    s = b0 + (np.arange(n_across) + 0.5) * gsd
    S, T = np.meshgrid(s, t)
    if f.axis == 0:
        x, y = a.to_world(S, T)
    else:
        x, y = a.to_world(T, S)
    h = sample_grid(dsm, x, y, "bilinear")
    d = np.abs(np.diff(h, axis=1))
    d = d[np.isfinite(d)]
    return float(d.max()) if d.size else float("inf")


def color_distance(a: Rect, b: Rect) -> float:
    return float(np.linalg.norm(np.subtract(a.mean_color, b.mean_color)))


def should_merge(a: Rect, b: Rect, dsm: Grid, cfg: Config) -> bool:
    """Merge test on colour, mean height and the height step along the shared edge."""
    f = facing(a, b, cfg, dsm.transform.gsd)
    if f is None:
        raise ValueError("rectangles are not adjacent")
    if not color_distance(a, b) < cfg.t_d:
        return False
    if not abs(a.mean_height - b.mean_height) < cfg.t_h1_m:
        return False
    return edge_height_step(a, f, dsm) < cfg.t_h2_m


def union_rect(a: Rect, f: Facing) -> Rect:
    u0, u1, v0, v1 = f.union
    cx, cy = a.to_world((u0 + u1) / 2, (v0 + v1) / 2)
    du, dv = u1 - u0, v1 - v0
    if du >= dv:
        return Rect((float(cx), float(cy)), du, dv, a.orientation, parent_instance=a.parent_instance)
    return Rect((float(cx), float(cy)), dv, du, a.orientation + 90.0, parent_instance=a.parent_instance)


def merge_rects(rects, dsm: Grid, ortho: Grid | None, cfg: Config) -> list[Rect]:
    """Greedily merge mergeable neighbours, largest combined area first."""
    rects = list(rects)
    gsd = dsm.transform.gsd
    while True:
        best = None
        for i in range(len(rects)):
            for j in range(i + 1, len(rects)):
                a, b = rects[i], rects[j]
                if a.area < b.area:
                    a, b = b, a
                f = facing(a, b, cfg, gsd)
                if f is None or not should_merge(a, b, dsm, cfg):
                    continue
                key = (-(a.area + b.area), i, j)
                if best is None or key < best[0]:
                    best = (key, i, j, union_rect(a, f))
        if best is None:
            return rects
        _, i, j, merged = best
        rects[i] = rect_features(merged, dsm, ortho)
        del rects[j]


def rects_mask(rects, transform, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for r in rects:
        rr, cc = rect_pixels(r, transform, shape)
        out[rr, cc] = True
    return out
