"""Georeferenced rasters, file I/O and run configuration.

Grids are north-up rasters described by a :class:`GeoTransform`.  Pixel
``(col, row)`` covers the world square whose outer corner is
``pixel_to_world(col, row)``; pixel centres sit at half-integer indices.

Supported formats
-----------------
* ESRI ASCII grid (``.asc``) for DSMs, instance maps and 3-class maps.
* Binary PPM (``P6``) for orthophotos and binary PGM (``P5``) for masks, both
  georeferenced by a 6-line world file (``.pmw`` / ``.pgw``; ``.wld`` is
  accepted on read).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

LABEL_KINDS = ("mask", "instances", "labels")
KINDS = ("dsm", "ortho") + LABEL_KINDS

_SNAP = 1e-9


class RasterFormatError(ValueError):
    """Malformed raster file; the message names the file and the line or byte offset."""


def _snap(a):
    """Round values that are within float noise of an integer."""
    r = np.rint(a)
    return np.where(np.abs(a - r) < _SNAP, r, a)


@dataclass(frozen=True)
class GeoTransform:
    origin_x: float
    origin_y: float
    pixel_size_x: float
    pixel_size_y: float
    crs_tag: str = ""

    def __post_init__(self):
        if not self.pixel_size_x > 0:
            raise ValueError(f"pixel_size_x must be > 0, got {self.pixel_size_x}")
        if self.pixel_size_y == 0 or not math.isfinite(self.pixel_size_y):
            raise ValueError("pixel_size_y must be finite and non-zero")

    @property
    def gsd(self) -> float:
        return self.pixel_size_x

    def pixel_to_world(self, col, row):
        """Outer-corner world coordinates of fractional pixel indices."""
        col = np.asarray(col, dtype=float)
        row = np.asarray(row, dtype=float)
        return self.origin_x + col * self.pixel_size_x, self.origin_y + row * self.pixel_size_y

    def pixel_center(self, col, row):
        return self.pixel_to_world(np.asarray(col) + 0.5, np.asarray(row) + 0.5)

    def world_to_pixel(self, x, y):
        """Inverse of :meth:`pixel_to_world`; results within 1e-9 of an integer are snapped."""
        col = (np.asarray(x, dtype=float) - self.origin_x) / self.pixel_size_x
        row = (np.asarray(y, dtype=float) - self.origin_y) / self.pixel_size_y
        return _snap(col), _snap(row)

    def aligned(self, other: "GeoTransform", tol: float = 1e-6) -> bool:
        return (
            abs(self.origin_x - other.origin_x) <= tol
            and abs(self.origin_y - other.origin_y) <= tol
            and abs(self.pixel_size_x - other.pixel_size_x) <= tol * 1e-3
            and abs(self.pixel_size_y - other.pixel_size_y) <= tol * 1e-3
        )


@dataclass(frozen=True, eq=False)
class Grid:
    """Immutable raster.  ``values`` has shape (rows, cols) or (rows, cols, 3)."""

    values: np.ndarray
    transform: GeoTransform
    nodata: float | int | None = None
    kind: str = "dsm"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        v = np.array(self.values, copy=True)
        if v.ndim not in (2, 3) or (v.ndim == 3 and v.shape[2] != 3):
            raise ValueError(f"grid values must be (rows, cols[, 3]), got {v.shape}")
        if self.kind in LABEL_KINDS and not np.issubdtype(v.dtype, np.integer):
            if v.dtype == bool:
                v = v.astype(np.uint8)
            else:
                raise ValueError(f"{self.kind} grid needs integer values, got {v.dtype}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]

    @property
    def bands(self) -> int:
        return 1 if self.values.ndim == 2 else self.values.shape[2]

    @property
    def is_label(self) -> bool:
        return self.kind in LABEL_KINDS

    def valid(self) -> np.ndarray:
        """Boolean (rows, cols) array of cells that are not nodata."""
        v = self.values
        if self.nodata is None:
            ok = np.ones(self.shape, dtype=bool)
        elif isinstance(self.nodata, float) and math.isnan(self.nodata):
            ok = ~np.isnan(v)
        else:
            ok = v != self.nodata
        if ok.ndim == 3:
            ok = ok.all(axis=2)
        if np.issubdtype(v.dtype, np.floating):
            fin = np.isfinite(v)
            ok &= fin if fin.ndim == 2 else fin.all(axis=2)
        return ok

    def as_float(self) -> np.ndarray:
        """Float copy with nodata cells set to NaN."""
        out = self.values.astype(float)
        bad = ~self.valid()
        if out.ndim == 3:
            out[bad, :] = np.nan
        else:
            out[bad] = np.nan
        return out

    def with_values(self, values, **kw) -> "Grid":
        return replace(self, values=values, **kw)

    def same_values(self, other: "Grid") -> bool:
        return (
            self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
            and self.transform.aligned(other.transform)
        )


def require_aligned(*grids: Grid) -> None:
    base = grids[0]
    for g in grids[1:]:
        if g.shape != base.shape or not g.transform.aligned(base.transform):
            raise ValueError("transform mismatch: grids are not aligned")


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_ASC_KEYS = {"ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter", "cellsize", "nodata_value"}


def _read_ascii(path: Path, kind: str) -> Grid:
    header: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    lineno = 0
    while lineno < len(lines):
        parts = lines[lineno].split()
        if not parts:
            lineno += 1
            continue
        key = parts[0].lower()
        if key not in _ASC_KEYS:
            break
        if len(parts) != 2:
            raise RasterFormatError(f"{path}: line {lineno + 1}: malformed header entry {lines[lineno]!r}")
        header[key] = parts[1]
        lineno += 1
    for req in ("ncols", "nrows", "cellsize"):
        if req not in header:
            raise RasterFormatError(f"{path}: line {lineno + 1}: malformed header, missing {req}")
    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
        cell = float(header["cellsize"])
        if "xllcorner" in header:
            xll = float(header["xllcorner"])
        else:
            xll = float(header["xllcenter"]) - cell / 2
        if "yllcorner" in header:
            yll = float(header["yllcorner"])
        else:
            yll = float(header["yllcenter"]) - cell / 2
    except (KeyError, ValueError) as exc:
        raise RasterFormatError(f"{path}: malformed header: {exc}") from None
    if ncols <= 0 or nrows <= 0:
        raise RasterFormatError(f"{path}: malformed header: non-positive dimensions")

    rows = []
    for i in range(lineno, len(lines)):
        toks = lines[i].split()
        if not toks:
            continue
        if len(toks) != ncols:
            raise RasterFormatError(
                f"{path}: line {i + 1}: dimension mismatch, expected {ncols} values, found {len(toks)}"
            )
        rows.append(toks)
    if len(rows) != nrows:
        raise RasterFormatError(f"{path}: dimension mismatch, expected {nrows} rows, found {len(rows)}")

    integer = kind in LABEL_KINDS
    try:
        if integer:
            data = np.array(rows, dtype=np.int64).astype(np.int32)
        else:
            data = np.array(rows, dtype=np.float64)
    except ValueError:
        raise RasterFormatError(f"{path}: non-numeric or non-integer cell values for kind {kind!r}") from None

    nodata: Any = None
    if "nodata_value" in header:
        nd = float(header["nodata_value"])
        nodata = int(nd) if integer else nd
    elif not integer:
        nodata = -9999.0
    transform = GeoTransform(xll, yll + nrows * cell, cell, -cell)
    return Grid(data, transform, nodata=nodata, kind=kind)


def _write_ascii(grid: Grid, path: Path) -> None:
    if grid.bands != 1:
        raise ValueError("ASCII grids hold a single band")
    t = grid.transform
    if abs(t.pixel_size_x + t.pixel_size_y) > 1e-12 * t.pixel_size_x:
        raise ValueError("ASCII grids need square north-up pixels")
    yll = t.origin_y + grid.height * t.pixel_size_y
    integer = np.issubdtype(grid.values.dtype, np.integer)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"ncols {grid.width}\n")
        fh.write(f"nrows {grid.height}\n")
        fh.write(f"xllcorner {t.origin_x!r}\n")
        fh.write(f"yllcorner {float(yll)!r}\n")
        fh.write(f"cellsize {t.pixel_size_x!r}\n")
        if grid.nodata is not None:
            nd = int(grid.nodata) if integer else float(grid.nodata)
            fh.write(f"NODATA_value {nd!r}\n")
        np.savetxt(fh, grid.values, fmt="%d" if integer else "%.17g", delimiter=" ")


def world_file_path(path: Path) -> Path:
    ext = path.suffix
    if len(ext) >= 3:
        return path.with_suffix("." + ext[1] + ext[-1] + "w")
    return path.with_name(path.name + "w")


def _read_world_file(path: Path) -> GeoTransform:
    candidates = [world_file_path(path), path.with_suffix(".wld"), path.with_name(path.name + "w")]
    for wf in candidates:
        if wf.exists():
            break
    else:
        raise RasterFormatError(f"{path}: missing world file (tried {', '.join(str(c) for c in candidates)})")
    vals = []
    with open(wf, "r", encoding="ascii") as fh:
        for i, line in enumerate(fh):
            if line.strip():
                try:
                    vals.append(float(line))
                except ValueError:
                    raise RasterFormatError(f"{wf}: line {i + 1}: not a number: {line.strip()!r}") from None
    if len(vals) != 6:
        raise RasterFormatError(f"{wf}: world file needs 6 values, found {len(vals)}")
    a, d, b, e, c, f = vals
    if d != 0 or b != 0:
        raise RasterFormatError(f"{wf}: rotated world files are not supported")
    return GeoTransform(c - a / 2, f - e / 2, a, e)


def _write_world_file(t: GeoTransform, path: Path) -> None:
    a, e = t.pixel_size_x, t.pixel_size_y
    c = t.origin_x + a / 2
    f = t.origin_y + e / 2
    with open(world_file_path(path), "w", encoding="ascii", newline="\n") as fh:
        for v in (a, 0.0, 0.0, e, c, f):
            fh.write(f"{float(v)!r}\n")


def _read_pnm(path: Path, kind: str) -> Grid:
    raw = path.read_bytes()
    pos = 0
    tokens: list[tuple[bytes, int]] = []
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise RasterFormatError(f"{path}: offset {pos}: malformed header, truncated")
        tokens.append((raw[start:pos], start))
    pos += 1  # the single whitespace byte after maxval
    magic = tokens[0][0]
    if magic not in (b"P5", b"P6"):
        raise RasterFormatError(f"{path}: offset 0: malformed header, unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t[0]) for t in tokens[1:])
    except ValueError:
        raise RasterFormatError(f"{path}: offset {tokens[1][1]}: malformed header, bad integer") from None
    if maxval != 255:
        raise RasterFormatError(f"{path}: offset {tokens[3][1]}: unsupported bit depth (maxval {maxval}, need 255)")
    bands = 3 if magic == b"P6" else 1
    need = w * h * bands
    if len(raw) - pos != need:
        raise RasterFormatError(
            f"{path}: offset {pos}: dimension mismatch, expected {need} data bytes, found {len(raw) - pos}"
        )
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    data = data.reshape((h, w, 3) if bands == 3 else (h, w)).copy()
    if kind == "mask":
        data = (data > 0).astype(np.uint8)
    return Grid(data, _read_world_file(path), nodata=None, kind=kind)


def _write_pnm(grid: Grid, path: Path) -> None:
    v = grid.values
    if path.suffix.lower() == ".ppm":
        if grid.bands != 3:
            raise ValueError("PPM needs a 3-band grid")
        magic = b"P6"
    else:
        if grid.bands != 1:
            raise ValueError("PGM needs a 1-band grid")
        magic = b"P5"
        if grid.kind == "mask":
            v = np.where(v > 0, 255, 0)
    if v.min(initial=0) < 0 or v.max(initial=0) > 255:
        raise ValueError("PNM output needs values in 0..255")
    data = np.ascontiguousarray(np.rint(v), dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (grid.width, grid.height))
        fh.write(data.tobytes())
    _write_world_file(grid.transform, path)


def read_raster(path, kind: str) -> Grid:
    """Read a raster of the given ``kind`` (dsm, ortho, mask, instances, labels)."""
    path = Path(path)
    if kind not in KINDS:
        raise ValueError(f"unknown raster kind {kind!r}")
    if not path.exists():
        raise FileNotFoundError(path)
    ext = path.suffix.lower()
    if ext in (".asc", ".txt"):
        return _read_ascii(path, kind)
    if ext in (".ppm", ".pgm", ".pnm"):
        g = _read_pnm(path, kind)
        if kind == "ortho" and g.bands != 3:
            raise RasterFormatError(f"{path}: orthophoto must be a P6 RGB image")
        return g
    raise RasterFormatError(f"{path}: unsupported raster extension {ext!r}")


def write_raster(grid: Grid, path) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    if ext in (".asc", ".txt"):
        _write_ascii(grid, path)
    elif ext in (".ppm", ".pgm"):
        _write_pnm(grid, path)
    else:
        raise ValueError(f"unsupported raster extension {ext!r}")


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _rot(angle_deg: float) -> tuple[float, float]:
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    # exact values for multiples of 90 degrees
    c = 0.0 if abs(c) < 1e-12 else c
    s = 0.0 if abs(s) < 1e-12 else s
    return c, s


def sample_grid(grid: Grid, x, y, sampling: str = "bilinear", fill=None) -> np.ndarray:
    """Sample ``grid`` at world points.  Points outside the support get ``fill``."""
    if sampling not in ("nearest", "bilinear"):
        raise ValueError(f"unknown sampling {sampling!r}")
    if sampling == "bilinear" and grid.is_label:
        raise ValueError("bilinear sampling is not allowed for label grids")
    col, row = grid.transform.world_to_pixel(x, y)
    col = col - 0.5
    row = row - 0.5
    col = _snap(col)
    row = _snap(row)
    if fill is None:
        fill = (grid.nodata if grid.nodata is not None else 0) if grid.is_label else np.nan
    out_shape = np.shape(col) + ((3,) if grid.bands == 3 else ())
    if sampling == "nearest":
        ci = np.floor(col + 0.5).astype(np.int64)
        ri = np.floor(row + 0.5).astype(np.int64)
        inside = (ci >= 0) & (ci < grid.width) & (ri >= 0) & (ri < grid.height)
        dtype = grid.values.dtype if grid.is_label else float
        out = np.full(out_shape, fill, dtype=dtype)
        src = grid.values if grid.is_label else grid.as_float()
        out[inside] = src[ri[inside], ci[inside]]
        return out
    data = grid.as_float()
    coords = np.stack([np.ravel(row), np.ravel(col)])
    if grid.bands == 1:
        vals = ndimage.map_coordinates(data, coords, order=1, mode="constant", cval=np.nan, prefilter=False)
        out = vals.reshape(np.shape(col))
    else:
        chans = [
            ndimage.map_coordinates(data[..., b], coords, order=1, mode="constant", cval=np.nan, prefilter=False)
            for b in range(3)
        ]
        out = np.stack(chans, axis=-1).reshape(out_shape)
    # map_coordinates treats points up to half a pixel outside as partially inside
    outside = (col < 0) | (col > grid.width - 1) | (row < 0) | (row > grid.height - 1)
    if np.any(outside):
        out = np.array(out)
        out[outside] = fill
    if not (isinstance(fill, float) and math.isnan(fill)):
        out = np.where(np.isnan(out), fill, out)
    return out


def rotate_resample(grid: Grid, angle_deg: float, pivot=None, sampling: str = "bilinear") -> Grid:
    """Rotate raster content counter-clockwise by ``angle_deg`` about world point ``pivot``.

    The output is a north-up grid with the same pixel size covering the rotated
    bounding box of the valid input pixels; cells without source support are nodata.
    """
    if not math.isfinite(angle_deg):
        raise ValueError("angle must be finite")
    if sampling == "bilinear" and grid.is_label:
        raise ValueError("bilinear sampling is not allowed for label grids")
    t = grid.transform
    if pivot is None:
        pivot = t.pixel_to_world(grid.width / 2, grid.height / 2)
    px, py = float(pivot[0]), float(pivot[1])
    valid = grid.valid()
    rows, cols = np.nonzero(valid)
    if rows.size == 0:
        return grid
    r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    cx, cy = t.pixel_to_world(np.array([c0, c1, c1, c0]), np.array([r0, r0, r1, r1]))
    c, s = _rot(angle_deg)
    rx = px + c * (cx - px) - s * (cy - py)
    ry = py + s * (cx - px) + c * (cy - py)
    gx, gy = t.pixel_size_x, abs(t.pixel_size_y)
    ncols = max(1, int(math.ceil((rx.max() - rx.min()) / gx - 1e-9)))
    nrows = max(1, int(math.ceil((ry.max() - ry.min()) / gy - 1e-9)))
    ox = float(rx.min())
    oy = float(ry.max()) if t.pixel_size_y < 0 else float(ry.min())
    out_t = GeoTransform(ox, oy, t.pixel_size_x, t.pixel_size_y, t.crs_tag)
    jj, ii = np.meshgrid(np.arange(ncols), np.arange(nrows))
    qx, qy = out_t.pixel_center(jj, ii)
    # inverse rotation back to source coordinates
    sx = px + c * (qx - px) + s * (qy - py)
    sy = py - s * (qx - px) + c * (qy - py)
    if grid.is_label:
        fill = grid.nodata if grid.nodata is not None else 0
        vals = sample_grid(grid, sx, sy, "nearest", fill=fill)
        return Grid(vals.astype(grid.values.dtype), out_t, nodata=grid.nodata, kind=grid.kind)
    nodata = grid.nodata if grid.nodata is not None else -9999.0
    vals = sample_grid(grid, sx, sy, sampling, fill=np.nan)
    bad = np.isnan(vals) if vals.ndim == 2 else np.isnan(vals).any(axis=-1)
    vals = np.where(np.isnan(vals), nodata, vals)
    if grid.kind == "ortho":
        vals = np.where(bad[..., None], 0, vals)
        return Grid(vals, out_t, nodata=None, kind="ortho")
    return Grid(vals, out_t, nodata=nodata, kind=grid.kind)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Config:
    # fusion and polygon extraction
    t_w: float = 0.15
    t_l_px: float = 120.0
    t_d: float = 10.0
    t_h1_m: float = 1.0
    t_h2_m: float = 0.2
    dsm_grad_m: float = 0.3
    nms_window_px: int = 7
    dilation_px: int = 7
    edge_len_tol_px: float = 5.0
    pyramid_levels: int = 3
    dp_epsilon_px: float = 2.0
    # graph cut
    gc_lambda: float = 1.0
    gc_sigma: float = 1.0
    orient_step_deg: float = 2.0
    osm_angle_deg: float = 30.0
    w_r: float = 3.0
    w_theta: float = 1.0
    w_s: float = 1.0
    w_c: float = 0.3
    w_sigma: float = 0.3
    neighbor_radius_m: float = 50.0
    # irregular fallback
    irregular_iou: float = 0.65
    irregular_area_px: int = 5000
    max_faces: int = 1000
    # decomposition details
    color_buffer_px: int = 3
    peel_min_area_px: int = 10
    peel_min_side_px: int = 2
    refine_px: int = 2
    min_instance_area_px: int = 40
    merge_max_angle_deg: float = 10.0
    terrain_ring_px: int = 5
    # image line regularization
    lsd_angle_tol_deg: float = 22.5
    lsd_min_length_px: float = 10.0
    line_match_dist_px: float = 5.0
    line_match_angle_deg: float = 10.0
    # circular buildings
    circle_dp_epsilon_px: float = 1.0
    circle_vote_min: int = 3
    circle_vote_frac: float = 0.25
    circle_grad_tol: float = 0.1
    circle_gap_deg: float = 45.0
    circle_flat_slope: float = 0.05
    circle_cone_curv: float = 0.01
    circle_min_radius_px: float = 5.0
    circle_min_cover: float = 0.85
    ransac_band_m: float = 0.3
    ransac_iters: int = 200
    circle_segments: int = 64
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("gc_lambda", "seed"):
                if v < 0:
                    raise ValueError(f"{f.name} must be >= 0")
                continue
            if not v > 0:
                raise ValueError(f"{f.name} must be strictly positive, got {v!r}")
        if not 0 < self.t_w < 1:
            raise ValueError("t_w must lie in (0, 1)")
        steps = 180.0 / self.orient_step_deg
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("orient_step_deg must divide 180")

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            default = known[k].default
            kw[k] = int(v) if isinstance(default, int) and not isinstance(default, bool) else float(v)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return Config.from_dict(data)
