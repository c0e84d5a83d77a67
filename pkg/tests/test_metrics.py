import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import grid
from oracles import naive_counts
from lod2rect.metrics import ConfusionCounts, confusion, evaluate, iou2, iou3
from lod2rect.rooffit import RoofModel, RoofType
from lod2rect.scene import SceneModel, rasterize_scene


def mask(a):
    return grid(np.asarray(a, np.uint8), kind="mask")


def test_iou2_examples():
    a = np.zeros((20, 20), bool)
    a[0:10, 0:10] = True
    assert iou2(mask(a), mask(a)) == 1.0
    b = np.zeros((20, 20), bool)
    b[10:20, 10:20] = True
    assert iou2(mask(a), mask(b)) == 0.0
    c = np.zeros((20, 20), bool)
    c[5:15, 0:10] = True
    assert iou2(mask(a), mask(c)) == pytest.approx(50 / 150)
    z = np.zeros((4, 4), bool)
    assert iou2(mask(z), mask(z)) == 1.0


def test_iou3_examples():
    m = np.zeros((20, 20), bool)
    m[2:12, 2:12] = True
    h = grid(np.where(m, 10.0, 1.0))
    assert iou3(mask(m), h, mask(m), h) == 1.0
    assert iou3(mask(m), grid(h.values + 3.0), mask(m), h) == 0.0
    half = h.values.copy()
    half[2:7, 2:12] += 3.0
    # TP pixels outside the tolerance leave the ratio altogether: 50 / (50 + 0 + 0)
    assert iou3(mask(m), grid(half), mask(m), h) == 1.0
    # with 20 FP pixels the ratio shows: 50 / (50 + 20)
    p = m.copy()
    p[12:14, 2:12] = True
    assert iou3(mask(p), grid(half), mask(m), h) == pytest.approx(50 / 70)
    assert iou2(mask(p), mask(m)) == pytest.approx(100 / 120)
    with pytest.raises(ValueError):
        iou3(mask(m), h, mask(m), h, -1.0)


def test_misaligned():
    with pytest.raises(ValueError):
        iou2(mask(np.ones((4, 4))), grid(np.ones((4, 4), np.uint8), kind="mask", x0=0.0))


def test_counts_invariants():
    with pytest.raises(ValueError):
        ConfusionCounts(1, 0, 0, 2)
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)


@given(st.integers(0, 2**32 - 1))
def test_metrics_match_naive_loop(seed):
    rng = np.random.default_rng(seed)
    p, r = rng.random((24, 24)) < 0.5, rng.random((24, 24)) < 0.5
    ph, rh = rng.uniform(0, 6, (24, 24)), rng.uniform(0, 6, (24, 24))
    rh[rng.random((24, 24)) < 0.05] = -9999.0
    c = confusion(mask(p), mask(r), grid(ph), grid(rh), 2.0)
    valid = rh != -9999.0
    assert (c.TP, c.FP, c.FN, c.TP_3D) == naive_counts(p, r, valid, ph, rh, 2.0)
    assert iou2(mask(p), mask(r)) == iou2(mask(r), mask(p))
    assert iou3(mask(p), grid(ph), mask(r), grid(rh), math.inf) == confusion(mask(p), mask(r), None, grid(rh)).iou2


def _scene():
    t = grid(np.zeros((64, 64))).transform
    s = SceneModel(t)
    s.add("rectangular", RoofModel(RoofType.GABLE, 1012.0, 2016.0, 0.0, 12.0, 8.0, 10.0, 8.0, 0.0, 4.0, 2.0))
    s.add("rectangular", RoofModel(RoofType.FLAT, 1020.0, 2002.0, 0.0, 10.0, 2.0, 6.0, 6.0, 0.0, 0.0, 2.0))
    return s


def test_evaluate_self_and_empty(tmp_path):
    s = _scene()
    m, h = rasterize_scene(s, s.transform, (64, 64))
    rep = evaluate(s, m, h)
    assert rep.iou2 == 1.0 and rep.iou3 == 1.0 and rep.rmse_m == 0.0
    assert [b.id for b in rep.buildings] == [1, 2] and all(b.iou2 == 1.0 for b in rep.buildings)
    rep.write_json(str(tmp_path / "r.json"))
    rep.write_csv(str(tmp_path / "r.csv"))
    assert json.loads((tmp_path / "r.json").read_text())["iou2"] == 1.0
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "id,iou2,iou3,rmse_m"
    empty = evaluate(SceneModel(s.transform), m, h)
    assert empty.iou2 == 0.0


def test_evaluate_shift():
    s = _scene()
    m, h = rasterize_scene(s, s.transform, (64, 64))
    shifted = np.roll(m.values, 1, axis=1)
    ref = mask(shifted)
    ref_h = np.where(shifted > 0, np.roll(h.values, 1, axis=1), 2.0)
    rep = evaluate(s, ref, grid(ref_h))
    # 24x16 and 20x4 pixel boxes shifted one column: one column of each box turns FP, one FN
    tp = 23 * 16 + 19 * 4
    assert rep.iou2 == pytest.approx(tp / (tp + 2 * 16 + 2 * 4))
    # reference nodata pixels leave every count
    ref_nd = np.where(shifted > 0, ref_h, -9999.0)
    rep = evaluate(s, ref, grid(ref_nd))
    assert rep.iou2 == pytest.approx(tp / (tp + 16 + 4))
