import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lod2rect.decompose import Rect
from lod2rect.geodata import Config
from lod2rect.labeling import (
    FeatureScales,
    GCProblem,
    Road,
    RoadNetwork,
    affinity,
    apply_orientation_labels,
    build_graph,
    build_orientation_problem,
    initial_labels,
    load_roads,
    min_cut_binary,
    orientation_data_cost,
    orientation_labels,
    osm_align,
    refine_orientations,
    solve_multilabel,
)


def rect(x=0.0, y=0.0, theta=0.0, L=20.0, W=10.0, color=(100, 100, 100)):
    return Rect((x, y), L, W, theta, mean_color=color, color_std=(5, 5, 5), mean_height=6.0)


def exhaustive(p: GCProblem):
    best = None
    for lab in itertools.product(range(p.n_labels), repeat=p.n_nodes):
        e = p.energy(lab)
        if best is None or e < best[0] - 1e-12:
            best = (e, lab)
    return best


def random_problem(seed, max_nodes=6, max_labels=8):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_nodes + 1))
    k = int(rng.integers(2, max_labels + 1))
    edges = [(i, j, float(rng.uniform(0.1, 1.0))) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.5]
    return GCProblem(rng.uniform(0, 1, (n, k)), np.arange(k), float(rng.uniform(0, 2)), edges)


# affinity -------------------------------------------------------------------


def test_affinity_identity_and_symmetry():
    cfg = Config()
    a, b = rect(), rect(30.0, 5.0, 12.0, color=(90, 120, 80))
    assert affinity(a, a, cfg) == 1.0
    assert affinity(a, b, cfg) == affinity(b, a, cfg)
    assert 0.0 < affinity(a, b, cfg) < 1.0


def test_affinity_monotone_in_distance():
    cfg = Config()
    a = rect()
    w = [affinity(a, rect(d, 0.0), cfg) for d in np.linspace(0, 20, 11)]
    assert all(x > y for x, y in zip(w, w[1:]))


def test_affinity_hand_value():
    # unit scales, centres 1 m apart only: dist = sqrt(3), W = exp(-sqrt(3) / 2)
    cfg = Config()
    assert affinity(rect(), rect(1.0, 0.0), cfg, FeatureScales()) == pytest.approx(math.exp(-math.sqrt(3) / 2))


def test_graph_radius():
    g = build_graph([rect(), rect(49.0), rect(120.0)], Config())
    assert [(i, j) for i, j, _ in g.edges] == [(0, 1)]
    assert all(0 < w <= 1 for _, _, w in g.edges)


# orientation problem -------------------------------------------------------


def test_orientation_labels():
    th = orientation_labels(Config())
    assert len(th) == 90 and th[0] == 0 and th[-1] == 178


def test_data_cost_grid_point_and_tie():
    th = orientation_labels(Config())
    c40 = orientation_data_cost([40.0], th)[0]
    assert int(np.argmin(c40)) == 20 and c40[20] == 0.0
    c41 = orientation_data_cost([41.0], th)[0]
    assert c41[20] == pytest.approx(1 - math.exp(-1)) and c41[21] == pytest.approx(1 - math.exp(-1))
    p = GCProblem(c41[None, :], th, 1.0)
    assert initial_labels(p)[0] == 20


def test_data_cost_folds():
    th = orientation_labels(Config())
    c = orientation_data_cost([179.0], th)[0]
    assert c[0] == pytest.approx(1 - math.exp(-1))


def test_lambda_zero_is_independent():
    rects = [rect(0, 0, 41.0), rect(10, 0, 87.0), rect(20, 0, 133.0)]
    cfg = Config(gc_lambda=0.0)
    p = build_orientation_problem(rects, build_graph(rects, cfg), cfg)
    assert list(solve_multilabel(p)) == [20, 43, 66]


def test_two_nodes_agree_under_strong_smoothing():
    th = orientation_labels(Config())
    p = GCProblem(orientation_data_cost([40.0, 44.0], th), th, 10.0, [(0, 1, 1.0)])
    lab = solve_multilabel(p)
    assert lab[0] == lab[1]
    # exhaustive over 90^2 pairs
    best = min(p.energy((i, j)) for i in range(90) for j in range(90))
    assert p.energy(lab) == pytest.approx(best)


def test_row_of_three():
    th = orientation_labels(Config())
    edges = [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]
    p = GCProblem(orientation_data_cost([30.0, 34.0, 30.0], th), th, 10.0, edges)
    lab = solve_multilabel(p)
    assert [th[k] for k in lab] == [30.0, 30.0, 30.0]
    assert p.energy(lab) == pytest.approx(exhaustive(GCProblem(p.data[:, 14:18], th[14:18], 10.0, edges))[0])


def test_apply_labels():
    r = rect(theta=90.0)
    out = apply_orientation_labels([r, rect(theta=10.0)], [45, 3])
    assert out[0] is r
    assert out[1].orientation == 6.0 and out[1].center == (0.0, 0.0) and out[1].length == 20.0


def test_single_node_and_no_edges():
    p = random_problem(3)
    p = GCProblem(p.data, p.label_values, 5.0, [])
    assert list(solve_multilabel(p)) == list(np.argmin(p.data, axis=1))


def test_refine_orientations_end_to_end():
    rects = [rect(0, 0, 30.0), rect(0, 15, 34.0), rect(0, 30, 30.0)]
    out = refine_orientations(rects, Config(gc_lambda=10.0))
    assert [r.orientation for r in out] == [30.0, 30.0, 30.0]


def test_problem_validation():
    with pytest.raises(ValueError):
        GCProblem(np.array([[-1.0, 0.0]]), np.arange(2), 1.0)
    with pytest.raises(ValueError):
        GCProblem(np.zeros((2, 2)), np.arange(2), 1.0, [(0, 0, 1.0)])
    with pytest.raises(ValueError):
        GCProblem(np.zeros((2, 2)), np.arange(2), -1.0)


# solver properties ------------------------------------------------------------


@given(st.integers(0, 2**32 - 1))
def test_min_cut_binary_exhaustive(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    u0, u1 = rng.uniform(0, 2, n), rng.uniform(0, 2, n)
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < 0.5:
                A, D = rng.uniform(0, 1, 2)
                B, C = A + D + rng.uniform(0, 1), 0.0
                pairs.append((i, j, A, B, C, D))

    def e(x):
        s = sum(u1[p] if x[p] else u0[p] for p in range(n))
        for p, q, A, B, C, D in pairs:
            s += ((A, B), (C, D))[x[p]][x[q]]
        return s

    best = min(e(x) for x in itertools.product((0, 1), repeat=n))
    assert e(min_cut_binary(u0, u1, pairs)) == pytest.approx(best, abs=1e-9)


def test_min_cut_rejects_supermodular():
    with pytest.raises(ValueError):
        min_cut_binary([0, 0], [0, 0], [(0, 1, 1.0, 0.0, 0.0, 1.0)])


@given(st.integers(0, 2**32 - 1))
def test_expansion_never_worse_than_initial(seed):
    p = random_problem(seed)
    lab = solve_multilabel(p)
    assert p.energy(lab) <= p.energy(initial_labels(p)) + 1e-12


@given(st.integers(0, 2**32 - 1))
def test_expansion_within_potts_bound(seed):
    p = random_problem(seed, 5, 5)
    e_opt = exhaustive(p)[0]
    assert p.energy(solve_multilabel(p)) <= 2 * e_opt + 1e-9


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_scaling_invariance(seed, k):
    p = random_problem(seed)
    q = GCProblem(p.data * k, p.label_values, p.lam * k, p.edges)
    assert list(solve_multilabel(p)) == list(solve_multilabel(q))


def test_expansion_optimal_on_most_small_problems():
    hits = 0
    for seed in range(200):
        p = random_problem(10_000 + seed)
        if p.energy(solve_multilabel(p)) <= exhaustive(p)[0] + 1e-9:
            hits += 1
    assert hits >= 190


# roads ------------------------------------------------------------------------


def test_osm_snap_and_gate():
    cfg = Config()
    road20 = RoadNetwork((Road(1, ((0.0, 0.0), (100 * math.cos(math.radians(20)), 100 * math.sin(math.radians(20))))),))
    out = osm_align([rect(30.0, 5.0, 25.0)], road20, cfg)
    assert out[0].orientation == pytest.approx(20.0)
    road70 = RoadNetwork((Road(1, ((0.0, 0.0), (100 * math.cos(math.radians(70)), 100 * math.sin(math.radians(70))))),))
    r = rect(30.0, 5.0, 25.0)
    assert osm_align([r], road70, cfg)[0] is r
    assert osm_align([r], RoadNetwork(), cfg) == [r]
    assert osm_align([r], None, cfg) == [r]


def test_osm_nearest_road():
    roads = RoadNetwork((Road(1, ((0, 0), (100, 0))), Road(2, ((0, 50), (100, 60)))))
    out = osm_align([rect(50, 5, 8.0), rect(50, 52, 2.0)], roads, Config())
    assert out[0].orientation == pytest.approx(0.0)
    assert out[1].orientation == pytest.approx(math.degrees(math.atan2(10, 100)))


@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100), st.floats(0, 179.9)), min_size=1, max_size=6),
       st.floats(0, 179.9))
def test_osm_idempotent(items, road_deg):
    a = math.radians(road_deg)
    roads = RoadNetwork((Road(1, ((10.0, 10.0), (10 + 80 * math.cos(a), 10 + 80 * math.sin(a)))), Road(2, ((0, 90), (90, 95)))))
    rects = [rect(x, y, t) for x, y, t in items]
    once = osm_align(rects, roads, Config())
    twice = osm_align(once, roads, Config())
    assert [r.orientation for r in once] == [r.orientation for r in twice]


def test_load_roads(tmp_path):
    p = tmp_path / "roads.json"
    p.write_text(json.dumps([{"id": 3, "coords": [[0, 0], [5, 5], [9, 5]]}]))
    net = load_roads(str(p))
    assert len(list(net.segments())) == 2
    p.write_text(json.dumps([{"id": 3, "coords": [[0, 0]]}]))
    with pytest.raises(ValueError):
        load_roads(str(p))
    p.write_text(json.dumps({"id": 3}))
    with pytest.raises(ValueError):
        load_roads(str(p))
