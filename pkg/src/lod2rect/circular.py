"""Circular buildings: centre voting from boundary key points, radius groups,
least-squares circle fit, arc extent and flat/cone/sphere roofs.

Geometry functions work in any consistent planar unit; the pipeline passes
world coordinates.  Azimuths are radians counter-clockwise from +x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geodata import Config, Grid, sample_grid
from .polygonize import _dp_closed, trace_mask

TWO_PI = 2 * math.pi
ROOF_TYPES = ("Flat", "Cone", "Sphere")


class CircleFitError(ValueError):
    pass


@dataclass(frozen=True)
class CircleModel:
    center: tuple
    radius: float
    inner_radius: float | None = None
    arc: tuple = (0.0, TWO_PI)
    roof_type: str = "Flat"
    roof_params: dict = field(default_factory=dict)
    terrain_z: float = 0.0
    fit_residual: float = 0.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.inner_radius is not None and not 0 < self.inner_radius < self.radius:
            raise ValueError("inner radius must lie in (0, radius)")
        if self.roof_type not in ROOF_TYPES:
            raise ValueError(f"unknown circular roof type {self.roof_type!r}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "arc", (float(self.arc[0]), float(self.arc[1])))

    @property
    def full(self) -> bool:
        return self.arc[1] - self.arc[0] >= TWO_PI - 1e-9

    def contains(self, x, y) -> np.ndarray:
        dx = np.asarray(x, float) - self.center[0]
        dy = np.asarray(y, float) - self.center[1]
        rho = np.hypot(dx, dy)
        ok = rho <= self.radius + 1e-9
        if self.inner_radius is not None:
            ok &= rho >= self.inner_radius - 1e-9
        if not self.full:
            ok &= in_arc(np.arctan2(dy, dx), self.arc)
        return ok


def in_arc(az, arc, tol: float = 1e-9):
    s, e = arc
    return np.mod(np.asarray(az, float) - s, TWO_PI) <= (e - s) + tol


def circle_height(c: CircleModel, x, y):
    """Roof height at world points; NaN outside the footprint."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    rho = np.hypot(x - c.center[0], y - c.center[1])
    p = c.roof_params
    if c.roof_type == "Flat":
        h = np.full(rho.shape, float(p["z_roof"]))
    elif c.roof_type == "Cone":
        h = p["z_apex"] - (p["z_apex"] - p["z_eave"]) * rho / c.radius
    else:
        zc = c.terrain_z + p["z_center_offset"]
        R = p["sphere_radius"]
        h = zc + np.sqrt(np.maximum(R * R - rho * rho, 0.0))
    out = np.where(c.contains(x, y), h, np.nan)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Centre voting
# ---------------------------------------------------------------------------


def _bisectors(kp: np.ndarray):
    """Unit normal n and offset c of each edge bisector {p : n . p = c}, closed loop."""
    a = kp
    b = np.roll(kp, -1, axis=0)
    d = b - a
    ln = np.hypot(d[:, 0], d[:, 1])
    ok = ln > 0
    n = d[ok] / ln[ok, None]  # bisector is perpendicular to the edge: its normal is the edge direction
    mid = (a[ok] + b[ok]) / 2
    c = np.einsum("ij,ij->i", n, mid)
    return n, c


def coarse_centers(keypoints, cell: float = 4.0, vote_min: int = 3, vote_frac: float = 0.25):
    """Cells crossed by many edge bisectors.

    Returns a list of ((x, y) cell centre, votes), strongest first.  Coincident
    bisectors (opposite sides of a rectangle, say) count once.
    """
    kp = np.asarray(keypoints, dtype=float)
    if len(kp) < 4:
        raise ValueError("need at least 4 key points")
    n, c = _bisectors(kp)
    # canonical orientation so coincident lines compare equal
    flip = (n[:, 0] < -1e-12) | ((np.abs(n[:, 0]) <= 1e-12) & (n[:, 1] < 0))
    n = np.where(flip[:, None], -n, n)
    c = np.where(flip, -c, c)
    keep = []
    for i in range(len(n)):
        dup = False
        for j in keep:
            ang = math.degrees(math.acos(min(1.0, abs(float(n[i] @ n[j])))))
            if ang < 1.0 and abs(c[i] - c[j]) < 0.5 * cell:
                dup = True
                break
        if not dup:
            keep.append(i)
    n, c = n[keep], c[keep]
    lo = kp.min(axis=0) - cell
    hi = kp.max(axis=0) + cell
    nx = int(math.ceil((hi[0] - lo[0]) / cell))
    ny = int(math.ceil((hi[1] - lo[1]) / cell))
    gx0 = lo[0] + np.arange(nx) * cell
    gy0 = lo[1] + np.arange(ny) * cell
    X0, Y0 = np.meshgrid(gx0, gy0)
    votes = np.zeros((ny, nx), dtype=int)
    for k in range(len(n)):
        vals = [n[k, 0] * (X0 + dx) + n[k, 1] * (Y0 + dy) - c[k] for dx in (0, cell) for dy in (0, cell)]
        vals = np.stack(vals)
        hit = (vals.min(axis=0) <= 0) & (vals.max(axis=0) >= 0)
        votes += hit
    thr = max(vote_min, vote_frac * len(kp))
    out = []
    for iy, ix in zip(*np.nonzero(votes >= thr)):
        win = votes[max(iy - 1, 0) : iy + 2, max(ix - 1, 0) : ix + 2]
        if votes[iy, ix] < win.max():
            continue
        # among equal maxima keep the first in raster order
        eq = np.argwhere(win == votes[iy, ix])[0]
        if (max(iy - 1, 0) + eq[0], max(ix - 1, 0) + eq[1]) != (iy, ix):
            continue
        out.append(((float(gx0[ix] + cell / 2), float(gy0[iy] + cell / 2)), int(votes[iy, ix])))
    out.sort(key=lambda t: -t[1])
    return out


# ---------------------------------------------------------------------------
# Radius groups
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadiusGroup:
    indices: tuple
    radius: float
    span: float  # angular extent covered by the supporters (radians)
    max_gap: float  # largest angular step between consecutive supporters (radians)


def _angular_stats(center, pts, cyclic: bool):
    az = np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0])
    if len(az) < 2:
        return 0.0, TWO_PI
    steps = np.abs((np.diff(az) + math.pi) % TWO_PI - math.pi)
    if cyclic:
        last = abs((az[0] - az[-1] + math.pi) % TWO_PI - math.pi)
        steps = np.append(steps, last)
    srt = np.sort(np.mod(az, TWO_PI))
    gaps = np.diff(np.append(srt, srt[0] + TWO_PI))
    span = TWO_PI - float(gaps.max()) if not cyclic else TWO_PI
    return span, float(steps.max())


def radius_groups(center, keypoints, tol: float = 0.1, min_span: float = math.pi / 2):
    """Runs of key points (in boundary order) at near-constant distance from ``center``."""
    kp = np.asarray(keypoints, dtype=float)
    n = len(kp)
    if n < 2:
        return []
    d = np.hypot(kp[:, 0] - center[0], kp[:, 1] - center[1])
    nxt = np.roll(d, -1)
    mid = (kp + np.roll(kp, -1, axis=0)) / 2
    dm = np.hypot(mid[:, 0] - center[0], mid[:, 1] - center[1])
    ref = (d + nxt) / 2
    # a step is smooth when the distance barely changes and the chord stays near the circle
    smooth = (np.abs(nxt - d) < tol * ref) & (np.abs(dm - ref) < tol * ref)
    groups = []
    if smooth.all():
        runs = [(list(range(n)), True)]
    else:
        start = (int(np.flatnonzero(~smooth)[0]) + 1) % n
        runs, cur = [], [start]
        for k in range(1, n + 1):
            i = (start + k - 1) % n
            j = (start + k) % n
            if smooth[i] and k < n:
                cur.append(j)
            else:
                runs.append((cur, False))
                cur = [j]
    for idx, cyclic in runs:
        if len(idx) < 3:
            continue
        span, gap = _angular_stats(center, kp[idx], cyclic)
        if span >= min_span:
            groups.append(RadiusGroup(tuple(idx), float(d[idx].mean()), span, gap))
    return groups


def exclude_noncandidate(groups, min_span: float = math.pi / 2, max_gap_deg: float = 45.0):
    """Drop short or sporadically supported arcs."""
    lim = math.radians(max_gap_deg)
    return [g for g in groups if g.span >= min_span and g.max_gap <= lim + 1e-12]


# ---------------------------------------------------------------------------
# Circle fit and arc
# ---------------------------------------------------------------------------


def fit_circle_ls(points, init, tol: float = 1e-6, max_iter: int = 100):
    """Gauss-Newton minimization of sum((x-xc)^2 + (y-yc)^2 - r^2)^2."""
    p = np.asarray(points, dtype=float)
    if len(p) < 3:
        raise CircleFitError("need at least 3 points")
    cen = p - p.mean(axis=0)
    sv = np.linalg.svd(cen, compute_uv=False)
    if sv[0] == 0 or sv[-1] / sv[0] < 1e-9:
        raise CircleFitError("points are collinear; circle fit is singular")
    xc, yc, r = (float(v) for v in init)
    if r <= 0:
        r = float(np.hypot(*(p - [xc, yc]).T).mean()) or 1.0
    for _ in range(max_iter):
        dx = p[:, 0] - xc
        dy = p[:, 1] - yc
        f = dx * dx + dy * dy - r * r
        J = np.column_stack([-2 * dx, -2 * dy, np.full(len(p), -2 * r)])
        step, *_ = np.linalg.lstsq(J, -f, rcond=None)
        xc += step[0]
        yc += step[1]
        r += step[2]
        if not np.all(np.isfinite([xc, yc, r])):
            break
        if np.max(np.abs(step)) < tol:
            return xc, yc, abs(r)
    raise CircleFitError("circle fit did not converge")


def arc_range(center, points, full_gap_deg: float = 45.0):
    """(start, end) azimuths covered by the supporters; the largest gap is the complement."""
    p = np.asarray(points, dtype=float)
    az = np.sort(np.mod(np.arctan2(p[:, 1] - center[1], p[:, 0] - center[0]), TWO_PI))
    if len(az) < 2:
        return 0.0, TWO_PI
    gaps = np.diff(np.append(az, az[0] + TWO_PI))
    k = int(np.argmax(gaps))
    if gaps[k] < math.radians(full_gap_deg):
        return 0.0, TWO_PI
    start = float(az[(k + 1) % len(az)])
    end = float(az[k])
    if end <= start:
        end += TWO_PI
    return start, end


# ---------------------------------------------------------------------------
# Roofs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialProfile:
    azimuth: float  # radians
    distances: np.ndarray  # pixels from the centre
    heights: np.ndarray
    available: bool


def radial_profiles(circle: CircleModel, dsm: Grid, mask: Grid, n_dir: int = 8):
    """DSM samples at 1-px steps along ``n_dir`` azimuths, kept where the mask covers the ray."""
    t = dsm.transform
    cc, cr = t.world_to_pixel(*circle.center)
    if not (0 <= cc < dsm.width and 0 <= cr < dsm.height):
        raise ValueError("circle centre lies outside the raster")
    gsd = t.gsd
    n_max = int(math.ceil(circle.radius / gsd)) + 3
    d = np.arange(1, n_max + 1, dtype=float)
    out = []
    for k in range(n_dir):
        az = TWO_PI * k / n_dir
        avail = circle.full or bool(in_arc(az, circle.arc, 1e-6))
        x = circle.center[0] + d * gsd * math.cos(az)
        y = circle.center[1] + d * gsd * math.sin(az)
        m = sample_grid(mask, x, y, "nearest", fill=0) > 0
        h = sample_grid(dsm, x, y, "nearest")
        sel = np.zeros(len(d), dtype=bool)
        on = np.flatnonzero(m)
        if on.size:
            first = on[0]
            stop = first
            while stop < len(d) and m[stop]:
                stop += 1
            sel[first:stop] = True
        sel &= np.isfinite(h)
        if not avail:
            sel[:] = False
        out.append(RadialProfile(az, d[sel], h[sel], avail and bool(sel.any())))
    return out


def _profile_derivatives(pr: RadialProfile):
    A = np.column_stack([np.ones_like(pr.distances), pr.distances, pr.distances**2])
    coef, *_ = np.linalg.lstsq(A, pr.heights, rcond=None)
    slope = np.abs(coef[1] + 2 * coef[2] * pr.distances).mean()
    return float(slope), float(abs(2 * coef[2]))


def classify_circular_roof(profiles, flat_slope: float = 0.05, cone_curv: float = 0.01) -> str:
    """Flat / Cone / Sphere from pooled first and second derivatives along the profiles."""
    use = [p for p in profiles if p.available and len(p.distances) >= 5]
    if len(use) < 2:
        raise CircleFitError("need at least 2 available profiles with 5 samples")
    stats = np.array([_profile_derivatives(p) for p in use])
    slope, curv = stats.mean(axis=0)
    if slope < flat_slope:
        return "Flat"
    if curv < cone_curv:
        return "Cone"
    return "Sphere"


def _pool(profiles, gsd):
    use = [p for p in profiles if p.available and len(p.distances)]
    if not use:
        raise CircleFitError("no available samples")
    d = np.concatenate([p.distances for p in use]) * gsd
    h = np.concatenate([p.heights for p in use])
    return d, h


def fit_circular_roof(profiles, roof_type: str, radius: float, gsd: float = 1.0, terrain_z: float = 0.0,
                      band: float = 0.3, iters: int = 200, seed: int = 0):
    """RANSAC fits: constant (Flat), line h = z_apex - k*d (Cone), axis-centred circle (Sphere).

    Returns (roof_params, residual).  Raises CircleFitError below 50% inliers.
    """
    d, h = _pool(profiles, gsd)
    n = len(d)
    rng = np.random.default_rng(seed)
    if roof_type == "Flat":
        best = None
        for _ in range(iters):
            z = h[rng.integers(n)]
            inl = np.abs(h - z) <= band
            if best is None or inl.sum() > best.sum():
                best = inl
        z = float(h[best].mean())
        inl = np.abs(h - z) <= band
        if inl.sum() < 0.5 * n:
            raise CircleFitError("fewer than 50% inliers")
        z = float(h[inl].mean())
        res = float(np.sqrt(np.mean((h[inl] - z) ** 2)))
        return {"z_roof": z}, res
    if roof_type == "Cone":
        best = None
        for _ in range(iters):
            i, j = rng.choice(n, 2, replace=False)
            if abs(d[i] - d[j]) < 1e-12:
                continue
            k = (h[i] - h[j]) / (d[j] - d[i])
            z0 = h[i] + k * d[i]
            inl = np.abs(h - (z0 - k * d)) <= band
            if best is None or inl.sum() > best.sum():
                best = inl
        if best is None or best.sum() < 0.5 * n:
            raise CircleFitError("fewer than 50% inliers")
        A = np.column_stack([np.ones(best.sum()), -d[best]])
        (z0, k), *_ = np.linalg.lstsq(A, h[best], rcond=None)
        inl = np.abs(h - (z0 - k * d)) <= band
        if inl.sum() < 0.5 * n:
            raise CircleFitError("fewer than 50% inliers")
        A = np.column_stack([np.ones(inl.sum()), -d[inl]])
        (z0, k), *_ = np.linalg.lstsq(A, h[inl], rcond=None)
        res = float(np.sqrt(np.mean((h[inl] - (z0 - k * d[inl])) ** 2)))
        return {"z_apex": float(z0), "z_eave": float(z0 - k * radius)}, res
    if roof_type == "Sphere":

        def solve(dd, hh):
            # d^2 + h^2 = 2*h*zc + (R^2 - zc^2)
            A = np.column_stack([2 * hh, np.ones_like(hh)])
            (zc, c0), *_ = np.linalg.lstsq(A, dd * dd + hh * hh, rcond=None)
            R2 = c0 + zc * zc
            return float(zc), math.sqrt(R2) if R2 > 0 else float("nan")

        def resid(zc, R):
            return np.abs(np.hypot(d, h - zc) - R)

        best = None
        for _ in range(iters):
            i, j = rng.choice(n, 2, replace=False)
            if abs(h[i] - h[j]) < 1e-12:
                continue
            zc, R = solve(d[[i, j]], h[[i, j]])
            if not np.isfinite(R):
                continue
            inl = resid(zc, R) <= band
            if best is None or inl.sum() > best.sum():
                best = inl
        if best is None or best.sum() < 0.5 * n:
            raise CircleFitError("fewer than 50% inliers")
        zc, R = solve(d[best], h[best])
        inl = resid(zc, R) <= band
        if inl.sum() < 0.5 * n or not np.isfinite(R):
            raise CircleFitError("fewer than 50% inliers")
        zc, R = solve(d[inl], h[inl])
        res = float(np.sqrt(np.mean(resid(zc, R)[inl] ** 2)))
        return {"z_center_offset": zc - terrain_z, "sphere_radius": R}, res
    raise ValueError(f"unknown roof type {roof_type!r}")


# ---------------------------------------------------------------------------
# Detection on an instance
# ---------------------------------------------------------------------------


def crack_midpoints(loop: np.ndarray) -> np.ndarray:
    """Midpoints of the unit pixel edges along a traced corner loop."""
    a = loop
    b = np.roll(loop, -1, axis=0)
    n = np.rint(np.abs(b - a).sum(axis=1)).astype(int)
    k = np.concatenate([(np.arange(m) + 0.5) / m for m in n])
    i = np.repeat(np.arange(len(a)), n)
    return a[i] + (b[i] - a[i]) * k[:, None]


def boundary_keypoints(region: np.ndarray, transform, epsilon_px: float) -> np.ndarray:
    """Douglas-Peucker key points of the outline, in world coordinates.

    The outline runs through crack midpoints, which sit on the true edge of a
    rasterized disc rather than on its staircase corners.
    """
    loop = crack_midpoints(trace_mask(region))
    kp = _dp_closed(loop, epsilon_px)
    x, y = transform.pixel_to_world(kp[:, 0], kp[:, 1])
    return np.column_stack([x, y])


def detect_circle(region: np.ndarray, dsm: Grid, cfg: Config, terrain_z: float | None = None):
    """Detect and fit one circular structure in a building region.

    Returns (CircleModel, footprint pixel mask) or None.
    """
    t = dsm.transform
    gsd = t.gsd
    region = np.asarray(region, dtype=bool)
    if region.sum() < 20:
        return None
    kp = boundary_keypoints(region, t, cfg.circle_dp_epsilon_px)
    if len(kp) < 4:
        return None
    cands = coarse_centers(kp, 4 * gsd, cfg.circle_vote_min, cfg.circle_vote_frac)
    mask_grid = Grid(region.astype(np.uint8), t, kind="mask")
    for (cx, cy), _ in cands:
        groups = radius_groups((cx, cy), kp, cfg.circle_grad_tol)
        if not groups:
            continue
        # the voting cell is coarse: re-centre on the widest run before judging gaps
        g0 = max(groups, key=lambda g: (g.span, len(g.indices)))
        try:
            cx, cy, _r = fit_circle_ls(kp[list(g0.indices)], (cx, cy, g0.radius))
        except CircleFitError:
            continue
        groups = exclude_noncandidate(
            radius_groups((cx, cy), kp, cfg.circle_grad_tol), math.pi / 2, cfg.circle_gap_deg
        )
        if not groups:
            continue
        groups.sort(key=lambda g: -g.radius)
        outer = groups[0]
        sup = kp[list(outer.indices)]
        try:
            xc, yc, r = fit_circle_ls(sup, (cx, cy, outer.radius))
        except CircleFitError:
            continue
        if r < cfg.circle_min_radius_px * gsd:
            continue
        if np.max(np.abs(np.hypot(sup[:, 0] - xc, sup[:, 1] - yc) - r)) > max(1.5 * gsd, 0.1 * r):
            continue
        inner = None
        if len(groups) > 1:
            sup_i = kp[list(groups[-1].indices)]
            ri = float(np.hypot(sup_i[:, 0] - xc, sup_i[:, 1] - yc).mean())
            if 0 < ri < r - 2 * gsd:
                inner = ri
        if inner is None:
            inner = _hole_radius(region, t, (xc, yc), r, cfg.circle_grad_tol)
        arc = arc_range((xc, yc), sup, cfg.circle_gap_deg)
        if arc[1] - arc[0] <= math.pi / 2:
            continue
        probe = CircleModel((xc, yc), r, inner, arc)
        # the disc must be well covered by the building mask
        c0 = max(int((xc - r - t.origin_x) / gsd) - 2, 0)
        c1 = min(int((xc + r - t.origin_x) / gsd) + 3, dsm.width)
        r0 = max(int((t.origin_y - (yc + r)) / abs(t.pixel_size_y)) - 2, 0)
        r1 = min(int((t.origin_y - (yc - r)) / abs(t.pixel_size_y)) + 3, dsm.height)
        sub_r, sub_c = np.mgrid[r0:r1, c0:c1]
        sx, sy = t.pixel_center(sub_c, sub_r)
        disc = probe.contains(sx, sy)
        if not disc.any() or region[sub_r[disc], sub_c[disc]].mean() < cfg.circle_min_cover:
            continue
        foot = np.zeros_like(region)
        foot[sub_r[disc], sub_c[disc]] = True
        foot &= region
        profiles = radial_profiles(probe, dsm, mask_grid)
        try:
            rtype = classify_circular_roof(profiles, cfg.circle_flat_slope, cfg.circle_cone_curv)
            if terrain_z is None:
                terrain_z = _ring_terrain(foot, dsm, cfg)
            params, res = fit_circular_roof(
                profiles, rtype, r, gsd, terrain_z, cfg.ransac_band_m, cfg.ransac_iters, cfg.seed
            )
        except CircleFitError:
            return None
        model = CircleModel((xc, yc), r, inner, arc, rtype, params, terrain_z, res)
        return model, foot
    return None


def _hole_radius(region, t, center, r, tol):
    """Radius of a concentric circular hole, if there is one."""
    from scipy import ndimage

    holes, n = ndimage.label(ndimage.binary_fill_holes(region) & ~region)
    if n == 0:
        return None
    col, row = t.world_to_pixel(*center)
    lab = holes[int(row), int(col)] if 0 <= row < region.shape[0] and 0 <= col < region.shape[1] else 0
    if lab == 0:
        return None
    loop = trace_mask(holes == lab)
    x, y = t.pixel_to_world(loop[:, 0], loop[:, 1])
    d = np.hypot(x - center[0], y - center[1])
    ri = float(d.mean())
    if d.std() > tol * ri or not 0 < ri < r - 2 * t.gsd:
        return None
    return ri


def _ring_terrain(foot: np.ndarray, dsm: Grid, cfg: Config) -> float:
    from scipy import ndimage

    inner = ndimage.binary_dilation(foot, iterations=cfg.refine_px)
    outer = ndimage.binary_dilation(inner, iterations=cfg.terrain_ring_px)
    h = dsm.as_float()
    ring = h[outer & ~inner]
    ring = ring[np.isfinite(ring)]
    if ring.size:
        return float(ring.min())
    vals = h[foot]
    return float(np.nanmin(vals))
