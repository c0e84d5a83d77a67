import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import grid
from oracles import brute_force_fit
from lod2rect.decompose import Rect
from lod2rect.geodata import Config
from lod2rect.labeling import RectGraph
from lod2rect.rooffit import (
    MERGE_MATRIX,
    RoofModel,
    RoofType,
    TYPES,
    fit_model,
    init_params,
    irregular_fallback,
    merge_models,
    merge_type,
    merged_footprint,
    roof_height,
    search_spec,
    type_consistency,
)

F, G, H, P, M = TYPES


def model(rtype, L=20.0, W=10.0, ze=8.0, zr=10.0, hipl=None, hipw=None, x=1020.0, y=2016.0, theta=0.0):
    from lod2rect.rooffit import initial_hips, type_hips

    hl0, hw0 = initial_hips(rtype, L, W)
    hl, hw = type_hips(rtype, L, W, hl0 if hipl is None else hipl, hw0 if hipw is None else hipw)
    return RoofModel(rtype, x, y, theta, L, W, ze if rtype is F else zr, ze, hl, hw, 2.0)


def render(models, shape=(64, 80), ground=2.0, gsd=0.5):
    g = grid(np.full(shape, ground), gsd=gsd)
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]]
    x, y = g.transform.pixel_center(cc, rr)
    h = np.full(shape, ground)
    for m in models:
        z = roof_height(m, x, y)
        h = np.where(np.isfinite(z), z, h)
    return grid(h, gsd=gsd)


# height function --------------------------------------------------------------


def test_roof_height_examples():
    assert roof_height(model(F, ze=10.0), 1020.0, 2016.0) == 10.0
    g = model(G, ze=8.0, zr=10.0)
    assert roof_height(g, 1020.0, 2016.0) == pytest.approx(10.0)
    assert roof_height(g, 1020.0, 2016.0 + 5.0) == pytest.approx(8.0)
    assert roof_height(g, 1020.0, 2016.0 - 5.0) == pytest.approx(8.0)
    p = model(P)
    assert roof_height(p, 1020.0, 2016.0) == pytest.approx(10.0)
    for sx in (-1, 1):
        for sy in (-1, 1):
            assert roof_height(p, 1020.0 + sx * 10, 2016.0 + sy * 5) == pytest.approx(8.0)
    assert math.isnan(roof_height(p, 1040.0, 2016.0))


def test_mansard_plateau():
    m = model(M, hipl=5.0, hipw=2.5)
    assert roof_height(m, 1020.0 + 4.0, 2016.0 + 2.0) == pytest.approx(10.0)
    assert roof_height(m, 1020.0 + 7.5, 2016.0) == pytest.approx(9.0)


def test_hip_half_length_equals_pyramid():
    rr, cc = np.mgrid[0:64, 0:80]
    t = grid(np.zeros((64, 80))).transform
    x, y = t.pixel_center(cc, rr)
    a = roof_height(model(H, hipl=10.0), x, y)
    b = roof_height(model(P), x, y)
    assert np.array_equal(np.isnan(a), np.isnan(b))
    assert np.allclose(a[np.isfinite(a)], b[np.isfinite(b)])


@given(st.sampled_from(TYPES), st.floats(0, 180), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_height_bounds(rtype, theta, fu, fv):
    m = model(rtype, theta=theta, hipl=4.0, hipw=2.0)
    u, v = (fu - 0.5) * m.length * 0.999, (fv - 0.5) * m.width * 0.999
    a = math.radians(theta)
    x = m.x0 + u * math.cos(a) - v * math.sin(a)
    y = m.y0 + u * math.sin(a) + v * math.cos(a)
    h = roof_height(m, x, y)
    assert m.z_eave - 1e-9 <= h <= m.z_ridge + 1e-9


def test_model_invariants():
    with pytest.raises(ValueError):
        RoofModel(G, 0, 0, 0, 10, 5, 7.0, 8.0, 0, 2.5)
    with pytest.raises(ValueError):
        RoofModel(H, 0, 0, 0, 10, 5, 9.0, 8.0, 6.0, 2.5)


# initial parameters ---------------------------------------------------------


def test_init_params_starting_table():
    dsm = grid(np.full((64, 80), 10.0))
    r = Rect((1020.0, 2016.0), 20.0, 10.0, 0.0)
    f = init_params(r, dsm, F)
    assert (f.z_eave, f.z_ridge) == (9.5, 9.5)
    g = init_params(r, dsm, G)
    assert (g.z_eave, g.z_ridge, g.hipl, g.hipw) == (9.5, 10.0, 0.0, 5.0)
    h = init_params(r, dsm, H)
    assert (h.hipl, h.hipw) == (5.0, 5.0)
    p = init_params(r, dsm, P)
    assert (p.hipl, p.hipw) == (10.0, 5.0)
    m = init_params(r, dsm, M)
    assert (m.hipl, m.hipw) == (5.0, 2.5)


def test_init_params_needs_pixels():
    with pytest.raises(ValueError):
        init_params(Rect((1020.0, 2016.0), 1.0, 1.0, 0.0), grid(np.full((64, 80), 10.0)), F)


def test_search_spec_ranges():
    s = search_spec(H, 9.5, 20.0, 10.0)
    assert len(s.ze) == 31 and s.ze[0] == pytest.approx(6.5) and s.ze[-1] == pytest.approx(12.5)
    assert s.dz[0] == 0.5 and s.dz[-1] == pytest.approx(3.9)  # 0.5 + 0.2k never lands on 4.0
    assert np.allclose(np.diff(s.hipl), 0.4) and s.hipl.min() >= 5.0 - 2.5 - 1e-9 and s.hipl.max() <= 7.5 + 1e-9


# fitting ------------------------------------------------------------------------


def test_fit_constant_dsm():
    dsm = grid(np.full((64, 80), 10.0))
    m = fit_model(Rect((1020.0, 2016.0), 20.0, 10.0, 0.0), dsm)
    assert m.rtype is F
    assert m.z_eave == pytest.approx(9.9) and m.fit_rmse == pytest.approx(0.1)


def test_fit_gable_render():
    truth = model(G, ze=8.0, zr=9.5)
    m = fit_model(Rect((1020.0, 2016.0), 20.0, 10.0, 0.0), render([truth]))
    assert m.rtype is G
    assert m.z_eave == pytest.approx(8.0, abs=0.1) and m.z_ridge == pytest.approx(9.5, abs=0.1)


def test_fit_hip_render():
    truth = model(H, ze=8.0, zr=10.0, hipl=5.0)
    m = fit_model(Rect((1020.0, 2016.0), 20.0, 10.0, 0.0), render([truth]))
    assert m.rtype is H
    assert m.hipl == pytest.approx(5.0, abs=0.2)


@pytest.mark.parametrize("seed", range(6))
def test_fit_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    rtype = TYPES[seed % 5]
    L, W = rng.uniform(8, 14), rng.uniform(5, 8)
    truth = model(rtype, L, W, 6.0 + rng.uniform(0, 1), 8.0 + rng.uniform(0, 1), L / 4 + rng.uniform(-0.5, 0.5),
                  W / 4 + rng.uniform(-0.3, 0.3), theta=rng.uniform(0, 180))
    dsm = render([truth], (48, 56))
    noisy = grid(dsm.values + rng.normal(0, 0.2, dsm.shape))
    cx, cy, th = truth.x0 + rng.uniform(-0.5, 0.5), truth.y0 + rng.uniform(-0.5, 0.5), truth.orientation + rng.uniform(-3, 3)
    got = fit_model(Rect((cx, cy), L, W, th), noisy)
    name, ze, zr, hl, hw, rmse = brute_force_fit(cx, cy, L, W, th % 180, noisy)
    assert got.rtype.value == name
    assert got.z_eave == pytest.approx(ze, abs=1e-9) and got.z_ridge == pytest.approx(zr, abs=1e-9)
    assert got.fit_rmse == pytest.approx(rmse, abs=1e-9)
    if name in ("Hip", "Mansard"):
        assert got.hipl == pytest.approx(hl, abs=1e-9)
    if name == "Mansard":
        assert got.hipw == pytest.approx(hw, abs=1e-9)


def test_fit_rigid_motion():
    truth = model(H, ze=8.0, zr=10.0, hipl=5.0, theta=25.0)
    dsm = render([truth])
    a = fit_model(Rect((1020.0, 2016.0), 20.0, 10.0, 25.0), dsm)
    # shift raster and rectangle by whole pixels
    moved = grid(dsm.values, x0=1000.0 + 7.5, y0=2000.0 - 3.0)
    b = fit_model(Rect((1027.5, 2013.0), 20.0, 10.0, 25.0), moved)
    assert a.rtype is b.rtype
    assert (a.z_eave, a.z_ridge, a.hipl, a.hipw) == pytest.approx((b.z_eave, b.z_ridge, b.hipl, b.hipw))
    assert (b.x0 - a.x0, b.y0 - a.y0) == pytest.approx((7.5, -3.0))


def test_support_mask_excludes_pixels():
    dsm = render([model(F, ze=10.0)])
    vals = dsm.values.copy()
    vals[20:24, 20:30] = 30.0  # a chimney-like outlier
    dirty = grid(vals)
    sup = np.ones(vals.shape, bool)
    sup[20:24, 20:30] = False
    r = Rect((1020.0, 2016.0), 20.0, 10.0, 0.0)
    assert fit_model(r, dirty, support=sup).fit_rmse == pytest.approx(0.1)


# type consistency ----------------------------------------------------------------


def test_type_consistency():
    dsm = render([model(G, x=1010.0, L=10.0, W=8.0), model(F, x=1025.0, L=10.0, W=8.0, ze=8.0),
                  model(G, x=1035.0, L=10.0, W=8.0)])
    ms = [fit_model(Rect((cx, 2016.0), 10.0, 8.0, 0.0), dsm) for cx in (1010.0, 1025.0, 1035.0)]
    assert [m.rtype for m in ms] == [G, F, G]
    full = RectGraph(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)])
    out = type_consistency(ms, full, dsm, Config(gc_lambda=1.0))
    assert [m.rtype for m in out] == [G, G, G]
    assert out[0] is ms[0]
    assert type_consistency(ms, full, dsm, Config(gc_lambda=0.0)) == ms
    assert type_consistency(ms, RectGraph(3, []), dsm, Config()) == ms


# merging ------------------------------------------------------------------------


# result of merging row type with column type; None marks the pair that is never merged
EXPECTED = {
    "Flat": ["Flat", "Gable", "Hip", "Flat", "Mansard"],
    "Gable": ["Gable", "Gable", "Hip", "Gable", "Mansard"],
    "Hip": ["Hip", "Hip", "Hip", "Hip", "Mansard"],
    "Pyramid": ["Flat", "Gable", "Hip", None, "Mansard"],
    "Mansard": ["Mansard"] * 5,
}


def test_merge_matrix_cells():
    cols = ["Flat", "Gable", "Hip", "Pyramid", "Mansard"]
    for row, vals in EXPECTED.items():
        for col, want in zip(cols, vals):
            got = merge_type(row, col)
            assert (got.value if got is not None else None) == want, (row, col)
    assert sum(v is None for row in MERGE_MATRIX.values() for v in row.values()) == 1


def test_merge_matrix_symmetric():
    for a in TYPES:
        for b in TYPES:
            assert merge_type(a, b) == merge_type(b, a)


def test_merged_footprint_shapes():
    a = model(G, L=10.0, W=6.0, x=1005.0, y=2003.0)
    b = model(G, L=10.0, W=6.0, x=1015.0, y=2003.0)
    fp = merged_footprint(a, b, gsd=0.5)
    assert fp.area == pytest.approx(120.0) and len(fp.exterior.coords) - 1 == 4
    # L: second box below the right end of a
    c = model(G, L=8.0, W=4.0, x=1008.0, y=1996.0, theta=90.0)
    fp = merged_footprint(a, c, gsd=0.5)
    assert len(fp.exterior.coords) - 1 == 6 and fp.area == pytest.approx(60 + 32)
    assert fp.is_valid
    # T: stem centred below a
    d = model(G, L=8.0, W=4.0, x=1005.0, y=1996.0, theta=90.0)
    fp = merged_footprint(a, d, gsd=0.5)
    assert len(fp.exterior.coords) - 1 == 8 and fp.area == pytest.approx(60 + 32)
    with pytest.raises(ValueError):
        merged_footprint(a, model(G, L=10.0, W=6.0, x=1050.0, y=2003.0), gsd=0.5)
    with pytest.raises(ValueError):
        merged_footprint(a, model(G, L=10.0, W=6.0, x=1015.0, y=2003.0, theta=30.0), gsd=0.5)


def test_merge_split_gable():
    truth = model(G, L=24.0, W=10.0, ze=8.0, zr=10.0, x=1020.0, y=2016.0)
    dsm = render([truth])
    left = fit_model(Rect((1014.0, 2016.0), 12.0, 10.0, 0.0), dsm, types=[G])
    right = fit_model(Rect((1026.0, 2016.0), 12.0, 10.0, 0.0), dsm, types=[G])
    m = merge_models(left, right, dsm)
    assert m is not None and m.rtype is G
    assert m.length == pytest.approx(24.0) and m.width == pytest.approx(10.0)
    assert m.z_ridge == pytest.approx(10.0, abs=0.1) and m.z_eave == pytest.approx(8.0, abs=0.1)


def test_merge_refusals():
    dsm = render([model(F, L=24.0, W=10.0, ze=8.0)])
    a = model(P, L=12.0, W=10.0, x=1014.0)
    b = model(P, L=12.0, W=10.0, x=1026.0)
    assert merge_models(a, b, dsm) is None
    ortho_v = np.zeros((64, 80, 3), np.uint8)
    ortho_v[:, :40] = 100
    ortho_v[:, 40:] = 130
    ortho = grid(ortho_v, kind="ortho")
    fa, fb = model(F, L=12.0, W=10.0, x=1014.0, ze=8.0), model(F, L=12.0, W=10.0, x=1026.0, ze=8.0)
    assert merge_models(fa, fb, dsm, ortho) is None
    assert merge_models(fa, fb, dsm) is not None


# irregular fallback ----------------------------------------------------------------


def _star(n, r_out, r_in, size):
    from shapely.geometry import Point, Polygon

    ang = np.arange(2 * n) * math.pi / n
    rad = np.where(np.arange(2 * n) % 2 == 0, r_out, r_in)
    poly = Polygon(np.column_stack([size / 2 + rad * np.cos(ang), size / 2 + rad * np.sin(ang)]))
    rr, cc = np.mgrid[0:size, 0:size]
    import shapely

    return shapely.contains_xy(poly, cc + 0.5, rr + 0.5)


def test_irregular_gates():
    cfg = Config()
    star = _star(7, 63, 30, 130)
    assert star.sum() > 5000
    dsm = grid(np.where(star, 9.0, 2.0), gsd=0.5)
    tr = dsm.transform
    cx, cy = tr.pixel_center(65, 65)
    small = Rect((float(cx), float(cy)), 30.0, 20.0, 0.0)
    mesh = irregular_fallback(star, [small], dsm, cfg)
    assert mesh is not None and 0 < mesh.n_faces <= cfg.max_faces
    # rectangles covering the mask well: no mesh
    assert irregular_fallback(star, [Rect((float(cx), float(cy)), 61.0, 61.0, 0.0)], dsm, Config(irregular_iou=0.3)) is None
    small_star = _star(7, 55, 25, 130)
    assert 3000 < small_star.sum() < 5000
    assert irregular_fallback(small_star, [small], dsm, cfg) is None
