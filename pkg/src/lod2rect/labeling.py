"""Multi-label graph cuts over the rectangle neighbourhood graph.

Energy: E(L) = sum_i D_i(L_i) + lam * sum_(i,j) W_ij * [L_i != L_j], minimized by
alpha-expansion; each expansion move is a binary min-cut solved with Dinic's
max-flow.
"""
from __future__ import annotations

import json
import math
import sys
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .decompose import Rect
from .geodata import Config
from .polygonize import angle_diff, point_segment_distance


# ---------------------------------------------------------------------------
# Affinity
# ---------------------------------------------------------------------------


def rect_features_vector(r: Rect) -> dict:
    return {
        "r": np.array(r.center, float),
        "theta": float(r.orientation),
        "s": np.array([r.length, r.width], float),
        "c": np.array(r.mean_color, float),
        "sigma": np.array(r.color_std, float),
    }


@dataclass(frozen=True)
class FeatureScales:
    """Scene-level standard deviations of every feature component (0 replaced by 1)."""

    r: tuple = (1.0, 1.0)
    theta: float = 1.0
    s: tuple = (1.0, 1.0)
    c: tuple = (1.0, 1.0, 1.0)
    sigma: tuple = (1.0, 1.0, 1.0)

    @classmethod
    def from_rects(cls, rects) -> "FeatureScales":
        rects = list(rects)
        if len(rects) < 2:
            return cls()

        def sd(vals):
            s = np.std(np.asarray(vals, float), axis=0)
            return np.where(s > 0, s, 1.0)

        f = [rect_features_vector(r) for r in rects]
        th = np.array([x["theta"] for x in f])
        # circular spread of axial angles
        z = np.exp(1j * np.radians(2 * th)).mean()
        th_sd = math.degrees(math.sqrt(max(-2 * math.log(max(abs(z), 1e-300)), 0.0))) / 2
        return cls(
            tuple(sd([x["r"] for x in f])),
            th_sd if th_sd > 1e-9 else 1.0,
            tuple(sd([x["s"] for x in f])),
            tuple(sd([x["c"] for x in f])),
            tuple(sd([x["sigma"] for x in f])),
        )


def feature_distance(a: Rect, b: Rect, cfg: Config, scales: FeatureScales | None = None) -> float:
    sc = scales or FeatureScales()
    fa, fb = rect_features_vector(a), rect_features_vector(b)
    d2 = cfg.w_r * float(np.sum(((fa["r"] - fb["r"]) / np.asarray(sc.r)) ** 2))
    d2 += cfg.w_theta * (float(angle_diff(fa["theta"], fb["theta"])) / sc.theta) ** 2
    d2 += cfg.w_s * float(np.sum(((fa["s"] - fb["s"]) / np.asarray(sc.s)) ** 2))
    d2 += cfg.w_c * float(np.sum(((fa["c"] - fb["c"]) / np.asarray(sc.c)) ** 2))
    d2 += cfg.w_sigma * float(np.sum(((fa["sigma"] - fb["sigma"]) / np.asarray(sc.sigma)) ** 2))
    return math.sqrt(d2)


def affinity(a: Rect, b: Rect, cfg: Config, scales: FeatureScales | None = None) -> float:
    """Exponential similarity kernel in (0, 1]."""
    w = math.exp(-feature_distance(a, b, cfg, scales) / (2 * cfg.gc_sigma**2))
    return max(w, np.finfo(float).tiny)


@dataclass
class RectGraph:
    n: int
    edges: list = field(default_factory=list)  # (i, j, w) with i < j

    def neighbors(self, i: int):
        for a, b, w in self.edges:
            if a == i:
                yield b, w
            elif b == i:
                yield a, w


def build_graph(rects, cfg: Config, scales: FeatureScales | None = None) -> RectGraph:
    """Neighbours are rectangles whose centres lie within ``neighbor_radius_m``."""
    rects = list(rects)
    if scales is None:
        scales = FeatureScales.from_rects(rects)
    edges = []
    for i in range(len(rects)):
        for j in range(i + 1, len(rects)):
            d = math.dist(rects[i].center, rects[j].center)
            if d <= cfg.neighbor_radius_m:
                edges.append((i, j, affinity(rects[i], rects[j], cfg, scales)))
    return RectGraph(len(rects), edges)


# ---------------------------------------------------------------------------
# Max-flow
# ---------------------------------------------------------------------------


class _Dinic:
    def __init__(self, n: int):
        self.n = n
        self.head = [[] for _ in range(n)]
        self.to: list[int] = []
        self.cap: list[float] = []

    def add_edge(self, u: int, v: int, c: float, rc: float = 0.0):
        self.head[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(c)
        self.head[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(rc)

    def max_flow(self, s: int, t: int) -> float:
        eps = 1e-12 * max([abs(c) for c in self.cap] + [1e-300])
        # augmenting paths are at most n long
        if sys.getrecursionlimit() < self.n + 200:
            sys.setrecursionlimit(self.n + 200)
        flow = 0.0
        while True:
            level = [-1] * self.n
            level[s] = 0
            q = deque([s])
            while q:
                u = q.popleft()
                for e in self.head[u]:
                    if self.cap[e] > eps and level[self.to[e]] < 0:
                        level[self.to[e]] = level[u] + 1
                        q.append(self.to[e])
            if level[t] < 0:
                break
            it = [0] * self.n

            def dfs(u, f):
                if u == t:
                    return f
                while it[u] < len(self.head[u]):
                    e = self.head[u][it[u]]
                    v = self.to[e]
                    if self.cap[e] > eps and level[v] == level[u] + 1:
                        d = dfs(v, min(f, self.cap[e]))
                        if d > 0:
                            self.cap[e] -= d
                            self.cap[e ^ 1] += d
                            return d
                    it[u] += 1
                return 0.0

            while True:
                f = dfs(s, math.inf)
                if f <= 0:
                    break
                flow += f
        self._eps = eps
        return flow

    def source_side(self, s: int) -> list[bool]:
        seen = [False] * self.n
        seen[s] = True
        q = deque([s])
        while q:
            u = q.popleft()
            for e in self.head[u]:
                v = self.to[e]
                if self.cap[e] > self._eps and not seen[v]:
                    seen[v] = True
                    q.append(v)
        return seen


def min_cut_binary(unary0, unary1, pairs) -> np.ndarray:
    """Minimize sum_p U_p(x_p) + sum E_pq(x_p, x_q) over binary x.

    ``pairs`` holds (p, q, A, B, C, D) with E(0,0)=A, E(0,1)=B, E(1,0)=C, E(1,1)=D,
    which must satisfy B + C >= A + D.
    """
    n = len(unary0)
    u = np.asarray(unary1, float) - np.asarray(unary0, float)  # cost of x_p = 1
    k_pairs = []
    u = u.copy()
    for p, q, A, B, C, D in pairs:
        u[p] += C - A
        u[q] += D - C
        k = B + C - A - D
        if k < -1e-12 * max(1.0, abs(B) + abs(C)):
            raise ValueError("pairwise term is not submodular")
        if k > 0:
            k_pairs.append((p, q, k))
    s, t = n, n + 1
    g = _Dinic(n + 2)
    for p in range(n):
        if u[p] > 0:
            g.add_edge(s, p, u[p])
        elif u[p] < 0:
            g.add_edge(p, t, -u[p])
    for p, q, k in k_pairs:
        # paid when x_p = 0 (source side) and x_q = 1 (sink side)
        g.add_edge(p, q, k)
    g.max_flow(s, t)
    side = g.source_side(s)
    return np.array([0 if side[p] else 1 for p in range(n)], dtype=np.int8)


# ---------------------------------------------------------------------------
# Generic problem
# ---------------------------------------------------------------------------


@dataclass
class GCProblem:
    data: np.ndarray  # (nodes, labels)
    label_values: np.ndarray
    lam: float
    edges: list = field(default_factory=list)  # (i, j, w)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise ValueError("data costs must be (nodes, labels)")
        if not np.all(np.isfinite(self.data)) or np.any(self.data < 0):
            raise ValueError("data costs must be finite and non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        for i, j, w in self.edges:
            if i == j or not w > 0:
                raise ValueError("edges need distinct endpoints and positive weight")

    @property
    def n_nodes(self) -> int:
        return self.data.shape[0]

    @property
    def n_labels(self) -> int:
        return self.data.shape[1]

    def energy(self, labels) -> float:
        labels = np.asarray(labels)
        e = float(self.data[np.arange(self.n_nodes), labels].sum())
        for i, j, w in self.edges:
            if labels[i] != labels[j]:
                e += self.lam * w
        return e


def initial_labels(p: GCProblem) -> np.ndarray:
    """Per-node data-optimal labels (lowest label on ties)."""
    return np.argmin(p.data, axis=1) if p.n_nodes else np.zeros(0, dtype=int)


def solve_multilabel(p: GCProblem, max_sweeps: int = 100) -> np.ndarray:
    """Alpha-expansion over labels in ascending order until a sweep brings no gain."""
    x = initial_labels(p).astype(int)
    if p.n_nodes == 0 or p.lam == 0 or not p.edges:
        return x
    e_cur = p.energy(x)
    rows = np.arange(p.n_nodes)
    for _ in range(max_sweeps):
        improved = False
        for alpha in range(p.n_labels):
            u0 = p.data[rows, x]
            u1 = p.data[:, alpha]
            pairs = []
            for i, j, w in p.edges:
                c = p.lam * w
                A = c * (x[i] != x[j])
                B = c * (x[i] != alpha)
                C = c * (alpha != x[j])
                pairs.append((i, j, A, B, C, 0.0))
            move = min_cut_binary(u0, u1, pairs)
            cand = np.where(move == 1, alpha, x)
            e_new = p.energy(cand)
            if e_new < e_cur - 1e-12 * max(1.0, abs(e_cur)):
                x, e_cur = cand, e_new
                improved = True
        if not improved:
            break
    return x


# ---------------------------------------------------------------------------
# Orientation refinement
# ---------------------------------------------------------------------------


def orientation_labels(cfg: Config) -> np.ndarray:
    n = int(round(180.0 / cfg.orient_step_deg))
    return np.arange(n) * cfg.orient_step_deg


def orientation_data_cost(theta, label_thetas) -> np.ndarray:
    """1 - exp(-|d|) with d the 180-degree folded difference in degrees."""
    d = angle_diff(np.asarray(theta, float)[..., None], np.asarray(label_thetas, float)[None, :])
    return 1.0 - np.exp(-d)


def build_orientation_problem(rects, graph: RectGraph, cfg: Config) -> GCProblem:
    thetas = orientation_labels(cfg)
    data = orientation_data_cost([r.orientation for r in rects], thetas)
    if len(rects) == 0:
        data = np.zeros((0, len(thetas)))
    return GCProblem(data, thetas, cfg.gc_lambda, list(graph.edges))


def apply_orientation_labels(rects, labels, label_values=None, cfg: Config | None = None) -> list[Rect]:
    if label_values is None:
        label_values = orientation_labels(cfg or Config())
    out = []
    for r, lab in zip(rects, labels):
        th = float(label_values[int(lab)])
        out.append(r if th == r.orientation else replace(r, orientation=th))
    return out


def refine_orientations(rects, cfg: Config, scales: FeatureScales | None = None) -> list[Rect]:
    rects = list(rects)
    graph = build_graph(rects, cfg, scales)
    prob = build_orientation_problem(rects, graph, cfg)
    return apply_orientation_labels(rects, solve_multilabel(prob), prob.label_values)


# ---------------------------------------------------------------------------
# Road alignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Road:
    id: int
    coords: tuple

    def __post_init__(self):
        c = tuple((float(x), float(y)) for x, y in self.coords)
        if len(c) < 2:
            raise ValueError(f"road {self.id} needs at least 2 points")
        for a, b in zip(c, c[1:]):
            if a == b:
                raise ValueError(f"road {self.id} has a zero-length segment")
        object.__setattr__(self, "coords", c)


@dataclass(frozen=True)
class RoadNetwork:
    polylines: tuple = ()

    def segments(self):
        for road in self.polylines:
            for a, b in zip(road.coords, road.coords[1:]):
                yield road.id, np.array(a), np.array(b)


def load_roads(path) -> RoadNetwork:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError(f"{path}: road file must be a JSON array")
    return RoadNetwork(tuple(Road(int(d["id"]), d["coords"]) for d in data))


def osm_align(rects, roads: RoadNetwork | None, cfg: Config) -> list[Rect]:
    """Snap each rectangle to the direction of its nearest road when within the gate."""
    segs = list(roads.segments()) if roads is not None else []
    if not segs:
        return list(rects)
    out = []
    for r in rects:
        c = np.array(r.center)
        best = None
        for k, (_, a, b) in enumerate(segs):
            d = float(point_segment_distance(c, a, b)[0])
            if best is None or d < best[0]:
                best = (d, k)
        _, a, b = segs[best[1]]
        ori = math.degrees(math.atan2(b[1] - a[1], b[0] - a[0])) % 180.0
        if float(angle_diff(r.orientation, ori)) < cfg.osm_angle_deg:
            r = replace(r, orientation=ori)
        out.append(r)
    return out
