"""Building polygons from instance masks.

Boundary trace, Douglas-Peucker simplification, snapping to main orientations
and re-alignment to straight lines detected in the orthophoto.  Angles are
degrees counter-clockwise from world east, folded to [0, 180).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from shapely.geometry import Polygon

from .geodata import Config, Grid
from .segmentation import InstanceMap


def fold180(a):
    return np.mod(a, 180.0)


def angle_diff(a, b, period: float = 180.0):
    """Smallest absolute difference between angles under the given period."""
    d = np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), period)
    return np.minimum(d, period - d)


def edge_angles(vertices: np.ndarray) -> np.ndarray:
    e = np.roll(vertices, -1, axis=0) - vertices
    return fold180(np.degrees(np.arctan2(e[:, 1], e[:, 0])))


def signed_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True, eq=False)
class BuildingPolygon:
    vertices: np.ndarray
    main_orientations: tuple = ()
    source_instance: int = 0

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ValueError("polygon needs at least 3 (x, y) vertices")
        if np.any(np.all(v == np.roll(v, -1, axis=0), axis=1)):
            raise ValueError("consecutive duplicate vertices")
        v.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "main_orientations", tuple(float(a) for a in self.main_orientations))

    @property
    def shape(self) -> Polygon:
        return Polygon(self.vertices)

    @property
    def area(self) -> float:
        return abs(signed_area(self.vertices))

    def is_simple(self) -> bool:
        p = self.shape
        return p.is_valid and p.area > 0

    def edges(self):
        v = self.vertices
        return list(zip(v, np.roll(v, -1, axis=0)))


@dataclass(frozen=True)
class LineSegment:
    p0: tuple
    p1: tuple

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("line segment must have positive length")

    @property
    def length(self) -> float:
        return math.hypot(self.p1[0] - self.p0[0], self.p1[1] - self.p0[1])

    @property
    def orientation(self) -> float:
        a = math.degrees(math.atan2(self.p1[1] - self.p0[1], self.p1[0] - self.p0[0])) % 180.0
        return 0.0 if a >= 180.0 else a

    @property
    def midpoint(self) -> np.ndarray:
        return (np.asarray(self.p0, float) + np.asarray(self.p1, float)) / 2


# ---------------------------------------------------------------------------
# Boundary tracing
# ---------------------------------------------------------------------------

# crack directions in (col, row) pixel-corner coordinates, clockwise on screen
_DIRS = {(1, 0): 0, (0, 1): 1, (-1, 0): 2, (0, -1): 3}
_STEP = [(1, 0), (0, 1), (-1, 0), (0, -1)]


def trace_mask(region: np.ndarray) -> np.ndarray:
    """Outer boundary of a 4-connected pixel region as pixel-corner (col, row) points.

    Holes are filled first.  The loop runs clockwise on screen, i.e.
    counter-clockwise in a north-up world frame, and collinear points are removed.
    """
    m = ndimage.binary_fill_holes(np.asarray(region, dtype=bool))
    if not m.any():
        raise ValueError("empty region")
    p = np.pad(m, 1)
    out_edges: dict[tuple[int, int], list[int]] = {}

    def add(x, y, d):
        out_edges.setdefault((x, y), []).append(d)

    inner = p[1:-1, 1:-1]
    rr, cc = np.nonzero(inner)
    for r, c in zip(rr.tolist(), cc.tolist()):
        if not p[r, c + 1]:  # top neighbour outside
            add(c, r, 0)
        if not p[r + 1, c + 2]:  # right
            add(c + 1, r, 1)
        if not p[r + 2, c + 1]:  # bottom
            add(c + 1, r + 1, 2)
        if not p[r + 1, c]:  # left
            add(c, r + 1, 3)
    r0, c0 = int(rr[0]), int(cc[0])
    start = (c0, r0)
    pos, d = start, 0
    pts = [start]
    used = set()
    while True:
        used.add((pos, d))
        dx, dy = _STEP[d]
        pos = (pos[0] + dx, pos[1] + dy)
        if pos == start and (start, 0) in used:
            break
        opts = out_edges[pos]
        if len(opts) == 1:
            nd = opts[0]
        else:
            # pinch vertex: prefer the right turn (clockwise)
            prefs = [(d + 1) % 4, d, (d + 3) % 4]
            nd = next(o for o in prefs if o in opts and (pos, o) not in used)
        if nd != d:
            pts.append(pos)
        d = nd
        if len(used) > 4 * m.size + 8:
            raise RuntimeError("boundary trace did not close")
    loop = np.array(pts, dtype=float)
    # the start corner may be collinear when the walk closes along a straight run
    return _drop_collinear(loop)


def _drop_collinear(loop: np.ndarray, tol: float = 0.0) -> np.ndarray:
    changed = True
    while changed and len(loop) > 3:
        changed = False
        prev = np.roll(loop, 1, axis=0)
        nxt = np.roll(loop, -1, axis=0)
        cross = (loop[:, 0] - prev[:, 0]) * (nxt[:, 1] - loop[:, 1]) - (loop[:, 1] - prev[:, 1]) * (
            nxt[:, 0] - loop[:, 0]
        )
        keep = np.abs(cross) > tol
        if not keep.all():
            loop = loop[keep]
            changed = True
    return loop


def trace_boundary(inst: InstanceMap, inst_id: int) -> np.ndarray:
    """Counter-clockwise world-coordinate loop around instance ``inst_id``."""
    region = inst.mask_of(inst_id)
    loop = trace_mask(region)
    x, y = inst.grid.transform.pixel_to_world(loop[:, 0], loop[:, 1])
    w = np.column_stack([x, y])
    if signed_area(w) < 0:  # south-up transforms flip handedness
        w = w[::-1]
    return w


# ---------------------------------------------------------------------------
# Douglas-Peucker
# ---------------------------------------------------------------------------


def point_segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    ab = np.asarray(b, float) - np.asarray(a, float)
    denom = float(np.dot(ab, ab))
    if denom == 0:
        return np.hypot(*(pts - a).T)
    t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    proj = np.asarray(a, float) + t[:, None] * ab
    return np.hypot(*(pts - proj).T)


def douglas_peucker(points, epsilon: float) -> np.ndarray:
    """Simplify an open polyline; both endpoints are always kept."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n <= 2:
        return pts.copy()
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        d = point_segment_distance(pts[i + 1 : j], pts[i], pts[j])
        k = int(np.argmax(d))
        if d[k] > epsilon:
            m = i + 1 + k
            keep[m] = True
            stack.append((i, m))
            stack.append((m, j))
    return pts[keep]


def _dp_closed(loop: np.ndarray, epsilon: float) -> np.ndarray:
    # anchor at the point farthest from the mean point, so the result does not
    # depend on where the trace started (rotating the mask rotates the polygon)
    d0 = np.round(np.hypot(*(loop - loop.mean(axis=0)).T), 9)
    loop = np.roll(loop, -int(np.argmax(d0)), axis=0)
    far = int(np.argmax(np.round(np.hypot(*(loop - loop[0]).T), 9)))
    if far == 0:
        return loop[:1]
    a = douglas_peucker(loop[: far + 1], epsilon)
    b = douglas_peucker(np.vstack([loop[far:], loop[:1]]), epsilon)
    return np.vstack([a[:-1], b[:-1]])


def simplify_dp(loop, epsilon_px: float, gsd: float = 1.0, source_instance: int = 0) -> BuildingPolygon:
    """Closed-loop Douglas-Peucker; anchors are the first vertex and the vertex farthest from it.

    If the simplified loop self-intersects, the tolerance is halved until it does not.
    """
    loop = np.asarray(loop, dtype=float)
    if len(loop) < 3:
        raise ValueError("loop needs at least 3 points")
    if abs(signed_area(loop)) == 0:
        raise ValueError("degenerate loop with zero area")
    eps = epsilon_px * gsd
    while True:
        out = _dp_closed(loop, eps)
        if len(out) >= 3 and abs(signed_area(out)) > 0 and Polygon(out).is_valid:
            return BuildingPolygon(out, (), source_instance)
        if eps < 1e-9 * gsd:
            return BuildingPolygon(_drop_collinear(loop), (), source_instance)
        eps /= 2


# ---------------------------------------------------------------------------
# Orientation regularization
# ---------------------------------------------------------------------------


def orientation_histogram(poly: BuildingPolygon, gsd: float = 1.0):
    """Per 10-degree bin (orthogonally folded): summed length in px and weighted mean angle."""
    v = poly.vertices
    e = np.roll(v, -1, axis=0) - v
    lengths = np.hypot(e[:, 0], e[:, 1]) / gsd
    folded = np.mod(edge_angles(v), 90.0)
    bins = np.minimum((folded // 10).astype(int), 8)
    total = np.bincount(bins, weights=lengths, minlength=9)
    wsum = np.bincount(bins, weights=lengths * folded, minlength=9)
    mean = np.divide(wsum, total, out=np.zeros(9), where=total > 0)
    return total, mean


def main_orientations(poly: BuildingPolygon, t_l_px: float, gsd: float = 1.0) -> list[float]:
    total, mean = orientation_histogram(poly, gsd)
    sel = [k for k in range(9) if total[k] > t_l_px]
    sel.sort(key=lambda k: (-total[k], k))
    return [float(mean[k]) for k in sel]


def dominant_orientation(poly: BuildingPolygon, gsd: float = 1.0) -> float:
    """Mean angle of the heaviest bin, used when no bin passes the length threshold."""
    total, mean = orientation_histogram(poly, gsd)
    return float(mean[int(np.argmax(total))])


def _intersect(p, d, q, e):
    """Intersection of lines p + s*d and q + t*e, or None when parallel."""
    den = d[0] * e[1] - d[1] * e[0]
    if abs(den) < 1e-12 * (math.hypot(*d) * math.hypot(*e)):
        return None
    w = (q[0] - p[0], q[1] - p[1])
    s = (w[0] * e[1] - w[1] * e[0]) / den
    return (p[0] + s * d[0], p[1] + s * d[1])


def _rebuild(poly: BuildingPolygon, angles: list[float | None]) -> BuildingPolygon:
    """Rotate edges to new angles about their midpoints and re-intersect neighbours.

    ``None`` keeps an edge's current direction.  Consecutive edges that end up
    parallel are merged into one line.  Returns ``poly`` unchanged when the
    result would not be a simple polygon.
    """
    v = poly.vertices
    n = len(v)
    lines = []  # (point, angle_deg, length)
    for i in range(n):
        a, b = v[i], v[(i + 1) % n]
        length = float(np.hypot(*(b - a)))
        cur = math.degrees(math.atan2(b[1] - a[1], b[0] - a[0]))
        ang = cur if angles[i] is None else _closest_direction(cur, angles[i])
        lines.append(((a + b) / 2, ang, length))
    changed = True
    while changed and len(lines) >= 3:
        changed = False
        for i in range(len(lines)):
            j = (i + 1) % len(lines)
            if angle_diff(lines[i][1], lines[j][1]) < 1e-6:
                (p, ang, la), (q, _, lb) = lines[i], lines[j]
                w = la + lb
                mid = (p * la + q * lb) / w if w > 0 else (p + q) / 2
                # keep the direction exactly, move the line to the weighted midpoint
                lines[i] = (mid, ang, w)
                del lines[j]
                changed = True
                break
    if len(lines) < 3:
        return poly
    pts = []
    m = len(lines)
    for i in range(m):
        p, a1, _ = lines[i - 1]
        q, a2, _ = lines[i]
        d = (math.cos(math.radians(a1)), math.sin(math.radians(a1)))
        e = (math.cos(math.radians(a2)), math.sin(math.radians(a2)))
        x = _intersect(p, d, q, e)
        if x is None:
            return poly
        pts.append(x)
    out = np.array(pts)
    if np.any(np.all(np.isclose(out, np.roll(out, -1, axis=0), atol=1e-9, rtol=0), axis=1)):
        return poly
    shp = Polygon(out)
    if not shp.is_valid or shp.area <= 0 or signed_area(out) * signed_area(v) <= 0:
        return poly
    return BuildingPolygon(out, poly.main_orientations, poly.source_instance)


def _closest_direction(cur_deg: float, target_deg: float) -> float:
    """The direction (target or target+180) closest to the current edge direction."""
    t = target_deg % 360.0
    alt = (t + 180.0) % 360.0
    return t if angle_diff(cur_deg, t, 360.0) <= angle_diff(cur_deg, alt, 360.0) else alt


def snap_angle(theta: float, orientations) -> float:
    """Nearest main orientation or orthogonal complement to ``theta`` (mod 180)."""
    cands = []
    for o in orientations:
        cands.extend([o % 180.0, (o + 90.0) % 180.0])
    d = [float(angle_diff(theta, c)) for c in cands]
    return cands[int(np.argmin(d))]


def adjust_lines(poly: BuildingPolygon, orientations) -> BuildingPolygon:
    orientations = list(orientations)
    if not orientations:
        return poly
    targets = [snap_angle(a, orientations) for a in edge_angles(poly.vertices)]
    out = _rebuild(poly, targets)
    return BuildingPolygon(out.vertices, orientations, poly.source_instance)


def regularize_with_image_lines(
    poly: BuildingPolygon,
    segs,
    gsd: float = 1.0,
    max_dist_px: float = 5.0,
    max_angle_deg: float = 10.0,
) -> BuildingPolygon:
    """Reset edge orientations to nearby detected image lines.

    A segment matches an edge when its midpoint lies within ``max_dist_px`` of the
    edge and its orientation is within ``max_angle_deg``; the nearest match wins.
    """
    segs = list(segs)
    if not segs:
        return poly
    v = poly.vertices
    mids = np.array([s.midpoint for s in segs])
    oris = np.array([s.orientation for s in segs])
    targets: list[float | None] = []
    hit = False
    for i, ang in enumerate(edge_angles(v)):
        a, b = v[i], v[(i + 1) % len(v)]
        dist = point_segment_distance(mids, a, b) / gsd
        dang = angle_diff(oris, ang)
        ok = (dist <= max_dist_px) & (dang <= max_angle_deg)
        if not ok.any():
            targets.append(None)
            continue
        idx = np.flatnonzero(ok)
        best = idx[np.lexsort((idx, dang[idx], dist[idx]))[0]]
        targets.append(float(oris[best]))
        hit = True
    if not hit:
        return poly
    return _rebuild(poly, targets)


# ---------------------------------------------------------------------------
# Line detection
# ---------------------------------------------------------------------------


def detect_lines(
    ortho: Grid,
    angle_tol_deg: float = 22.5,
    min_length_px: float = 10.0,
    grad_threshold: float | None = None,
    smooth_sigma: float = 1.0,
) -> list[LineSegment]:
    """Straight image edges by gradient-orientation region growing.

    A reduced line-segment detector: 2x2 gradients, greedy 8-connected region
    growing on the level-line angle, principal-axis fit per region.
    """
    img = np.asarray(ortho.values, dtype=float)
    gray = img.mean(axis=2) if img.ndim == 3 else img
    # light smoothing removes staircase aliasing on oblique edges
    gray = ndimage.gaussian_filter(gray, smooth_sigma, mode="nearest") if smooth_sigma > 0 else gray
    if gray.shape[0] < 2 or gray.shape[1] < 2:
        return []
    tau = math.radians(angle_tol_deg)
    if grad_threshold is None:
        grad_threshold = 2.0 / math.sin(tau)
    a, b = gray[:-1, :-1], gray[:-1, 1:]
    c, d = gray[1:, :-1], gray[1:, 1:]
    gx = (b + d - a - c) / 2
    gy = (c + d - a - b) / 2
    mag = np.hypot(gx, gy)
    # level-line angle (perpendicular to the gradient) in screen coordinates
    ang = np.arctan2(gx, -gy)
    rows, cols = mag.shape
    used = mag <= grad_threshold
    order = np.argsort(-mag, axis=None, kind="stable")
    segs: list[LineSegment] = []
    t = ortho.transform
    for flat in order:
        r, cc = divmod(int(flat), cols)
        if used[r, cc]:
            continue
        if mag[r, cc] <= grad_threshold:
            break
        region = [(r, cc)]
        used[r, cc] = True
        sx, sy = math.cos(ang[r, cc]), math.sin(ang[r, cc])
        theta = ang[r, cc]
        k = 0
        while k < len(region):
            pr, pc = region[k]
            k += 1
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    qr, qc = pr + dr, pc + dc
                    if 0 <= qr < rows and 0 <= qc < cols and not used[qr, qc]:
                        diff = abs((ang[qr, qc] - theta + math.pi) % (2 * math.pi) - math.pi)
                        if diff < tau:
                            used[qr, qc] = True
                            region.append((qr, qc))
                            sx += math.cos(ang[qr, qc])
                            sy += math.sin(ang[qr, qc])
                            theta = math.atan2(sy, sx)
        if len(region) < min_length_px:
            continue
        pts = np.array(region, dtype=float)
        w = mag[pts[:, 0].astype(int), pts[:, 1].astype(int)]
        # gradient samples sit on pixel corners: (col + 1, row + 1)
        xy = np.column_stack([pts[:, 1] + 1.0, pts[:, 0] + 1.0])
        cen = (xy * w[:, None]).sum(0) / w.sum()
        dxy = xy - cen
        cov = (dxy * w[:, None]).T @ dxy / w.sum()
        evals, evecs = np.linalg.eigh(cov)
        axis = evecs[:, 1]
        proj = dxy @ axis
        lo, hi = proj.min() - 0.5, proj.max() + 0.5
        if hi - lo < min_length_px:
            continue
        p0 = cen + lo * axis
        p1 = cen + hi * axis
        x0, y0 = t.pixel_to_world(p0[0], p0[1])
        x1, y1 = t.pixel_to_world(p1[0], p1[1])
        segs.append(LineSegment((float(x0), float(y0)), (float(x1), float(y1))))
    return segs


# ---------------------------------------------------------------------------
# Pipeline helper
# ---------------------------------------------------------------------------


def polygonize_instance(
    inst: InstanceMap, inst_id: int, cfg: Config, image_lines=None
) -> BuildingPolygon:
    """Trace, simplify and regularize one instance."""
    gsd = inst.grid.transform.gsd
    loop = trace_boundary(inst, inst_id)
    poly = simplify_dp(loop, cfg.dp_epsilon_px, gsd, inst_id)
    oris = main_orientations(poly, cfg.t_l_px, gsd)
    if not oris:
        oris = [dominant_orientation(poly, gsd)]
    poly = adjust_lines(poly, oris)
    if image_lines:
        poly = regularize_with_image_lines(
            poly, image_lines, gsd, cfg.line_match_dist_px, cfg.line_match_angle_deg
        )
        # image lines are sharper than the traced outline: re-derive the main orientations
        oris = main_orientations(poly, cfg.t_l_px, gsd) or [dominant_orientation(poly, gsd)]
        poly = BuildingPolygon(poly.vertices, tuple(oris), inst_id)
    return poly
