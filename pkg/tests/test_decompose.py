import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import grid
from lod2rect import kernels
from lod2rect.decompose import (
    Rect,
    candidate_separators,
    decompose_pyramid,
    facing,
    max_inner_rect,
    merge_rects,
    rect_pixels,
    rects_mask,
    should_merge,
)
from lod2rect.geodata import Config
from lod2rect.polygonize import polygonize_instance
from lod2rect.segmentation import connected_components


def brute_max_rect(m):
    """Largest all-true rectangle by checking every (top, left, bottom, right)."""
    rows, cols = m.shape
    cs = np.zeros((rows + 1, cols + 1), int)
    cs[1:, 1:] = np.cumsum(np.cumsum(m, 0), 1)
    best = (0, 0, 0, 0, 0)
    for r0 in range(rows):
        for c0 in range(cols):
            for r1 in range(r0 + 1, rows + 1):
                for c1 in range(c0 + 1, cols + 1):
                    a = (r1 - r0) * (c1 - c0)
                    if a <= best[0]:
                        continue
                    s = cs[r1, c1] - cs[r0, c1] - cs[r1, c0] + cs[r0, c0]
                    if s == a:
                        best = (a, r0, c0, r1 - r0, c1 - c0)
    return best


# separators -----------------------------------------------------------------


def test_separators_flat_uniform():
    h = np.full((20, 20), 5.0)
    rgb = np.full((20, 20, 3), 100.0)
    assert len(candidate_separators(h, rgb, np.ones((20, 20), bool))) == 0


def test_separator_at_height_and_colour_step():
    h = np.full((20, 20), 5.0)
    h[:, 10:] = 7.0
    rgb = np.full((20, 20, 3), 100.0)
    rgb[:, 10:, 0] = 130.0
    seps = candidate_separators(h, rgb, np.ones((20, 20), bool))
    assert seps.columns() == [10] and seps.rows() == []


def test_separator_needs_colour_change():
    h = np.full((20, 20), 5.0)
    h[:, 10:] = 7.0
    rgb = np.full((20, 20, 3), 100.0)
    assert len(candidate_separators(h, rgb, np.ones((20, 20), bool))) == 0


# maximum inner rectangle ----------------------------------------------------


def test_max_inner_rect_identity_and_pixel():
    m = np.zeros((12, 12), bool)
    m[2:9, 3:8] = True
    assert max_inner_rect(m) == (2, 3, 7, 5)
    p = np.zeros((4, 4), bool)
    p[1, 2] = True
    assert max_inner_rect(p) == (1, 2, 1, 1)


def test_max_inner_rect_l_shape():
    m = np.zeros((12, 12), bool)
    m[0:4, 0:10] = True  # 10 x 4 arm
    m[0:10, 0:4] = True  # 4 x 10 arm
    r, c, h, w = max_inner_rect(m)
    assert h * w == 40 == brute_max_rect(m)[0]
    # tie between the two arms goes to the smaller top-left (row, col): the horizontal arm
    assert (r, c, h, w) == (0, 0, 4, 10)


def test_max_inner_rect_empty():
    with pytest.raises(ValueError):
        max_inner_rect(np.zeros((3, 3), bool))


@given(st.integers(0, 2**32 - 1), st.floats(0.3, 0.9))
def test_max_inner_rect_brute_force(seed, p):
    m = np.random.default_rng(seed).random((12, 12)) < p
    if not m.any():
        return
    r, c, h, w = max_inner_rect(m)
    assert m[r : r + h, c : c + w].all()
    assert h * w == brute_max_rect(m)[0]


def test_kernel_backends_agree(rng):
    bk = kernels.backends()
    for _ in range(50):
        m = rng.random((20, 17)) < 0.7
        if m.any():
            assert len({b.max_inner_rect(m) for b in bk.values()}) == 1


# pyramid decomposition ------------------------------------------------------


def _scene(mask, dsm, rgb, gsd=0.5):
    g = grid(mask.astype(np.uint8), kind="mask", gsd=gsd)
    inst = connected_components(g)
    cfg = Config()
    poly = polygonize_instance(inst, 1, cfg)
    d = grid(dsm, gsd=gsd)
    o = grid(rgb.astype(np.uint8), kind="ortho", gsd=gsd)
    return poly, d, o, cfg, inst.labels == 1


def _iou(a, b):
    return (a & b).sum() / (a | b).sum()


def test_decompose_single_rectangle():
    m = np.zeros((80, 100), bool)
    m[20:60, 15:85] = True
    dsm = np.where(m, 8.0, 1.0)
    rgb = np.where(m[..., None], 180, 90) * np.ones(3)
    poly, d, o, cfg, region = _scene(m, dsm, rgb)
    rects = decompose_pyramid(poly, d, o, cfg, region)
    assert len(rects) == 1
    assert _iou(rects_mask(rects, d.transform, m.shape), m) >= 0.95
    assert rects[0].mean_height == pytest.approx(8.0)


def test_decompose_height_step_splits():
    m = np.zeros((80, 120), bool)
    m[20:60, 10:110] = True
    dsm = np.where(m, 8.0, 1.0)
    dsm[20:60, 60:110] = 10.0
    rgb = np.where(m[..., None], 180, 90) * np.ones(3)
    rgb[20:60, 60:110] = (120, 150, 200)
    poly, d, o, cfg, region = _scene(m, dsm, rgb)
    rects = decompose_pyramid(poly, d, o, cfg, region)
    assert len(rects) == 2
    heights = sorted(r.mean_height for r in rects)
    assert heights == [pytest.approx(8.0), pytest.approx(10.0)]
    # the cut lies on the step: x = 1000 + 60 * 0.5
    xs = sorted(r.center[0] for r in rects)
    assert xs[0] == pytest.approx(1000 + 35 * 0.5, abs=0.5)
    assert xs[1] == pytest.approx(1000 + 85 * 0.5, abs=0.5)


def test_decompose_tiny_mask_empty():
    m = np.zeros((40, 40), bool)
    m[18:22, 18:22] = True
    dsm = np.where(m, 8.0, 1.0)
    rgb = np.full((40, 40, 3), 100.0)
    poly, d, o, cfg, region = _scene(m, dsm, rgb)
    assert decompose_pyramid(poly, d, o, cfg, region) == []


@given(st.integers(0, 10_000))
def test_decompose_rects_disjoint(seed):
    rng = np.random.default_rng(seed)
    m = np.zeros((90, 90), bool)
    m[10:50, 10:80] = True
    r0, c0 = rng.integers(45, 60), rng.integers(10, 40)
    m[r0 : r0 + 25, c0 : c0 + rng.integers(16, 40)] = True
    dsm = np.where(m, 8.0, 1.0)
    rgb = np.where(m[..., None], 180, 90) * np.ones(3)
    poly, d, o, cfg, region = _scene(m, dsm, rgb)
    rects = decompose_pyramid(poly, d, o, cfg, region)
    cover = np.zeros(m.shape, int)
    for r in rects:
        rr, cc = rect_pixels(r, d.transform, m.shape)
        cover[rr, cc] += 1
    assert cover.max() <= 1
    # never beyond the mask by more than 2 px of slack
    slack = ~m & (cover > 0)
    from scipy import ndimage

    assert not (slack & ~ndimage.binary_dilation(m, iterations=2)).any()


# merging ----------------------------------------------------------------------


def _pair(step=0.0, dcolor=0.0, dh=0.0):
    # a: x in [1000, 1010], b: x in [1010, 1020]; both 6 m deep
    dsm = np.full((20, 44), 1.0)
    t = grid(dsm).transform
    a = Rect((1005.0, 2003.0), 10.0, 6.0, 0.0, mean_color=(100, 100, 100), mean_height=5.0)
    b = Rect((1015.0, 2003.0), 10.0, 6.0, 0.0, mean_color=(100 + dcolor, 100, 100), mean_height=5.0 + dh)
    cc, rr = np.meshgrid(np.arange(44), np.arange(20))
    x, y = t.pixel_center(cc, rr)
    dsm = np.where((x < 1010) & (y > 2000) & (y < 2006), 5.0, dsm)
    dsm = np.where((x >= 1010) & (x < 1020) & (y > 2000) & (y < 2006), 5.0 + step, dsm)
    return a, b, grid(dsm)


def test_should_merge_hand_case():
    a, b, d = _pair(step=0.05, dcolor=4.0, dh=0.3)
    assert should_merge(a, b, d, Config())


def test_should_merge_street_guard():
    a, b, d = _pair(step=0.5, dcolor=4.0, dh=0.3)
    assert not should_merge(a, b, d, Config())


def test_should_merge_twins():
    a, b, d = _pair()
    assert should_merge(a, b, d, Config())


def test_should_merge_clauses():
    assert not should_merge(*_pair(dcolor=10.0), Config())  # t_d is strict
    assert not should_merge(*_pair(dh=1.0), Config())


def test_should_merge_not_adjacent():
    a, _, d = _pair()
    far = Rect((1040.0, 2003.0), 10.0, 6.0, 0.0)
    assert facing(a, far, Config(), 0.5) is None
    with pytest.raises(ValueError):
        should_merge(a, far, d, Config())


def test_merge_rects():
    a, b, d = _pair()
    out = merge_rects([a, b], d, None, Config())
    assert len(out) == 1
    m = out[0]
    assert m.length == pytest.approx(20.0) and m.width == pytest.approx(6.0)
    assert m.center == pytest.approx((1010.0, 2003.0))
    assert m.mean_height == pytest.approx(5.0)
    a, b, d = _pair(step=2.0, dh=2.0)
    assert merge_rects([a, b], d, None, Config()) == [a, b]
    assert merge_rects([], d, None, Config()) == []


def test_rect_invariants():
    with pytest.raises(ValueError):
        Rect((0, 0), 2.0, 3.0, 0.0)
    assert Rect((0, 0), 3.0, 2.0, 190.0).orientation == pytest.approx(10.0)
    assert Rect((0, 0), 3.0, 2.0, -30.0).orientation == pytest.approx(150.0)
