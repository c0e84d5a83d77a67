import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import grid, make_transform
from lod2rect.geodata import (
    Config,
    GeoTransform,
    Grid,
    RasterFormatError,
    load_config,
    read_raster,
    require_aligned,
    rotate_resample,
    sample_grid,
    write_raster,
)


def _write(path, text):
    path.write_text(text, encoding="ascii")
    return path


def test_read_2x2_ascii(tmp_path):
    p = _write(tmp_path / "a.asc", "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 0.5\n1.0 1.0\n1.0 1.0\n")
    g = read_raster(p, "dsm")
    assert g.shape == (2, 2) and g.bands == 1
    assert np.all(g.values == 1.0)
    assert g.transform.origin_y == 1.0 and g.transform.pixel_size_y == -0.5


def test_dimension_mismatch(tmp_path):
    p = _write(tmp_path / "bad.asc", "ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2\n3 4\n")
    with pytest.raises(RasterFormatError, match="dimension mismatch"):
        read_raster(p, "dsm")


def test_malformed_header_reports_line(tmp_path):
    p = _write(tmp_path / "bad.asc", "ncols 2\nnrows\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2\n3 4\n")
    with pytest.raises(RasterFormatError, match="line 2"):
        read_raster(p, "dsm")


def test_float_roundtrip_and_nodata(tmp_path, rng):
    v = rng.uniform(-50, 400, (7, 5))
    v[2, 3] = -9999.0
    g = grid(v)
    write_raster(g, tmp_path / "d.asc")
    text = (tmp_path / "d.asc").read_text()
    assert "NODATA_value -9999" in text
    back = read_raster(tmp_path / "d.asc", "dsm")
    assert back.transform.aligned(g.transform)
    assert not back.valid()[2, 3]
    ok = g.valid()
    assert np.max(np.abs(back.values[ok] - v[ok])) <= 1e-4


@pytest.mark.parametrize("kind,ext", [("mask", ".pgm"), ("instances", ".asc"), ("labels", ".asc")])
def test_integer_roundtrip_exact(tmp_path, rng, kind, ext):
    hi = 2 if kind == "mask" else 40
    v = rng.integers(0, hi, (9, 6)).astype(np.int32)
    g = grid(v, kind=kind)
    write_raster(g, tmp_path / f"x{ext}")
    back = read_raster(tmp_path / f"x{ext}", kind)
    assert np.array_equal(back.values > 0 if kind == "mask" else back.values, v > 0 if kind == "mask" else v)
    assert back.transform.aligned(g.transform)


def test_ortho_ppm_roundtrip(tmp_path, rng):
    v = rng.integers(0, 256, (5, 4, 3)).astype(np.uint8)
    g = grid(v, kind="ortho")
    write_raster(g, tmp_path / "o.ppm")
    back = read_raster(tmp_path / "o.ppm", "ortho")
    assert np.array_equal(back.values, v)
    assert back.transform.aligned(g.transform)


@pytest.mark.parametrize("world", ["0.5\n0\n0\n-0.5\n0\n", "0.5\n0.1\n0\n-0.5\n0\n0\n", "0.5\nx\n0\n-0.5\n0\n0\n"])
def test_pgm_bad_world_file(tmp_path, world):
    g = grid(np.ones((3, 3), np.uint8), kind="mask")
    write_raster(g, tmp_path / "m.pgm")
    (tmp_path / "m.pmw").write_text(world)
    with pytest.raises(RasterFormatError):
        read_raster(tmp_path / "m.pgm", "mask")


def test_pgm_missing_world_file(tmp_path):
    g = grid(np.ones((3, 3), np.uint8), kind="mask")
    write_raster(g, tmp_path / "m.pgm")
    (tmp_path / "m.pmw").unlink()
    with pytest.raises(RasterFormatError, match="world file"):
        read_raster(tmp_path / "m.pgm", "mask")


def test_pgm_bit_depth(tmp_path):
    (tmp_path / "m.pgm").write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    (tmp_path / "m.pmw").write_text("1\n0\n0\n-1\n0.5\n1.5\n")
    with pytest.raises(RasterFormatError):
        read_raster(tmp_path / "m.pgm", "mask")


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        read_raster("/nonexistent/x.asc", "dsm")


@given(st.integers(-1000, 1000), st.integers(-1000, 1000), st.sampled_from([0.3, 0.5, 1.0, 0.25]))
def test_world_pixel_inverse(col, row, gsd):
    t = GeoTransform(123456.7, 765432.1, gsd, -gsd)
    x, y = t.pixel_to_world(col, row)
    c, r = t.world_to_pixel(x, y)
    assert c == col and r == row


def test_rotate_zero_identity():
    v = np.arange(12, dtype=float).reshape(3, 4)
    g = grid(v)
    out = rotate_resample(g, 0.0)
    assert out.shape == g.shape
    assert np.array_equal(out.values, v)


def test_rotate_90_nearest():
    v = np.arange(6, dtype=np.int32).reshape(2, 3) + 1
    g = grid(v, kind="instances", gsd=1.0)
    out = rotate_resample(g, 90.0, sampling="nearest")
    # counter-clockwise by 90 degrees: the first row becomes the first column read upward
    assert out.shape == (3, 2)
    assert np.array_equal(out.values, np.rot90(v))


def test_rotate_forth_and_back_constant():
    g = grid(np.full((40, 40), 7.25))
    pivot = g.transform.pixel_to_world(20, 20)
    a = rotate_resample(g, 17.0, pivot)
    b = rotate_resample(a, -17.0, pivot)
    x, y = g.transform.pixel_center(*np.meshgrid(np.arange(12, 28), np.arange(12, 28)))
    vals = sample_grid(b, x, y, "nearest")
    assert np.all(np.abs(vals - 7.25) <= 1e-6)


def test_bilinear_forbidden_for_labels():
    g = grid(np.ones((3, 3), np.int32), kind="instances")
    with pytest.raises(ValueError):
        rotate_resample(g, 10.0, sampling="bilinear")


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 3))
def test_rotate_zero_restricted_equals(rows, cols, seed):
    v = np.random.default_rng(seed).normal(size=(rows, cols))
    g = grid(v)
    out = rotate_resample(g, 0.0)
    x, y = g.transform.pixel_center(*np.meshgrid(np.arange(cols), np.arange(rows)))
    assert np.allclose(sample_grid(out, x, y, "nearest"), v, atol=0, rtol=0)


def test_require_aligned():
    a = grid(np.zeros((4, 4)))
    b = Grid(np.zeros((4, 4)), make_transform(4, 0.5, x0=1000.5), kind="dsm")
    with pytest.raises(ValueError, match="transform mismatch"):
        require_aligned(a, b)


def test_config_defaults_and_json(tmp_path):
    c = Config()
    assert (c.t_w, c.t_l_px, c.t_d, c.t_h1_m, c.t_h2_m, c.dsm_grad_m) == (0.15, 120, 10, 1.0, 0.2, 0.3)
    assert (c.nms_window_px, c.dilation_px, c.edge_len_tol_px, c.pyramid_levels) == (7, 7, 5, 3)
    assert (c.w_r, c.w_theta, c.w_s, c.w_c, c.w_sigma) == (3, 1, 1, 0.3, 0.3)
    assert (c.orient_step_deg, c.osm_angle_deg, c.irregular_iou, c.irregular_area_px, c.max_faces) == (2, 30, 0.65, 5000, 1000)
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"t_d": 12}))
    assert load_config(p).t_d == 12 and load_config(p).t_w == 0.15
    p.write_text(json.dumps({"no_such_key": 1}))
    with pytest.raises(ValueError):
        load_config(p)


@pytest.mark.parametrize("kw", [{"t_w": 1.5}, {"t_d": 0}, {"orient_step_deg": 7}])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        Config(**kw)


def test_sample_grid_bilinear_midpoint():
    g = grid(np.array([[0.0, 2.0], [0.0, 2.0]]), gsd=1.0)
    x, y = g.transform.pixel_center(0.5, 0.5)
    assert math.isclose(float(sample_grid(g, x, y)), 1.0)
