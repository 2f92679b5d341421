import numpy as np
import pytest

from rladlab.errors import DomainError, ShapeError
from rladlab.vasculometry import PARAM_KEYS, build_graph, correlation_report, measure


def stamp_curve(mask, points, width):
    h, w = mask.shape
    rr = width / 2.0
    for y, x in points:
        y0, y1 = int(max(0, y - rr - 1)), int(min(h, y + rr + 2))
        x0, x1 = int(max(0, x - rr - 1)), int(min(w, x + rr + 2))
        yy, xx = np.mgrid[y0:y1, x0:x1]
        mask[y0:y1, x0:x1] |= (yy - y) ** 2 + (xx - x) ** 2 <= rr * rr


def branchy_fixture():
    m = np.zeros((64, 64), bool)
    t = np.linspace(0, 1, 400)
    stamp_curve(m, zip(10 + 40 * t, 32 + 12 * np.sin(2.5 * t * np.pi) * t), 4)
    stamp_curve(m, zip(30 + 25 * t, 36 + 18 * t), 3)
    return m


def semicircle_fixture(radius=20):
    m = np.zeros((64, 64), bool)
    ts = np.linspace(0, np.pi, 4000)
    ys = np.round(40 - radius * np.sin(ts)).astype(int)
    xs = np.round(32 + radius * np.cos(ts)).astype(int)
    m[ys, xs] = True
    return m


class TestBuildGraph:
    def test_straight_segment(self):
        m = np.zeros((9, 20), bool)
        m[4, 3:13] = True
        g = build_graph(m)
        assert g.node_count("END") == 2
        assert g.node_count("BRANCH") == 0
        assert len(g.edges) == 1

    def test_y_junction(self):
        m = np.zeros((21, 21), bool)
        for i in range(1, 8):
            m[10 - i, 10] = True
            m[10 + i, 10 - i] = True
            m[10 + i, 10 + i] = True
        m[10, 10] = True
        g = build_graph(m)
        assert g.node_count("END") == 3
        assert g.node_count("BRANCH") == 1
        assert len(g.edges) == 3

    def test_empty_mask(self):
        g = build_graph(np.zeros((8, 8), bool))
        assert not g.nodes and not g.edges

    def test_every_pixel_covered(self):
        g = build_graph(branchy_fixture())
        covered = set(g.nodes)
        for e in g.edges:
            covered.update(map(tuple, e.path.tolist()))
        skel_pixels = set(zip(*map(list, np.nonzero(g.skeleton))))
        assert skel_pixels <= covered

    def test_node_conservation(self):
        g = build_graph(branchy_fixture())
        assert sum(len(e.endpoints) for e in g.edges) == 2 * len(g.edges)

    def test_arc_never_below_chord(self):
        g = build_graph(branchy_fixture())
        for e in g.edges:
            assert e.arc >= e.chord - 1e-9

    def test_start_nodes_with_disc(self):
        m = np.zeros((20, 20), bool)
        m[10, 2:18] = True
        disc = np.zeros((20, 20), bool)
        disc[8:13, 0:5] = True  # covers the left endpoint
        g = build_graph(m, disc=disc)
        assert g.node_count("START") == 1
        assert g.node_count("END") == 1

    def test_disc_shape_mismatch(self):
        with pytest.raises(ShapeError):
            build_graph(np.zeros((8, 8), bool), disc=np.zeros((9, 9), bool))

    def test_closed_loop_anchoring(self):
        yy, xx = np.mgrid[0:21, 0:21]
        r = np.hypot(yy - 10, xx - 10)
        m = (r > 5) & (r < 8)
        g = build_graph(m)
        assert len(g.edges) >= 1
        assert any(e.chord == 0.0 for e in g.edges)


class TestMeasure:
    def test_straight_segment_values(self):
        m = np.zeros((9, 20), bool)
        m[4, 3:13] = True  # 10 px
        p = measure(build_graph(m), m)
        assert p["LEN"] == 9.0
        assert p["TI"] == 1.0
        assert p["EPoints"] == 2
        assert p["BPoints"] == 0
        assert p["AREA"] == 10.0

    def test_semicircle_tortuosity(self):
        m = semicircle_fixture()
        p = measure(build_graph(m), m)
        assert abs(p["TI"] - np.pi / 2) / (np.pi / 2) < 0.02

    def test_fractal_dimensions_square_and_line(self):
        sq = np.zeros((64, 64), bool)
        sq[0:32, 0:32] = True
        p = measure(build_graph(sq), sq)
        assert 1.8 <= p["D0"] <= 2.05
        ln = np.zeros((64, 64), bool)
        ln[0, :] = True
        p = measure(build_graph(ln), ln)
        assert 0.9 <= p["D0"] <= 1.1

    def test_no_edges_flagged_zero(self):
        m = np.zeros((8, 8), bool)
        m[3, 3] = True  # isolated pixel: a node, no edges
        p = measure(build_graph(m), m)
        assert p.degenerate
        assert p["LEN"] == 0.0 and p["TI"] == 0.0 and p["BA"] == 0.0

    def test_schema(self):
        m = branchy_fixture()
        p = measure(build_graph(m), m)
        assert tuple(p.keys()) == PARAM_KEYS

    def test_rotation_robustness(self):
        m = branchy_fixture()
        base = measure(build_graph(m), m)
        for k in (1, 2, 3):
            rot = np.rot90(m, k).copy()
            p = measure(build_graph(rot), rot)
            assert abs(p["LEN"] - base["LEN"]) / base["LEN"] <= 0.01
            assert abs(p["TI"] - base["TI"]) / base["TI"] <= 0.01

    def test_scale_behavior(self):
        m = branchy_fixture()
        m2 = np.kron(m, np.ones((2, 2), dtype=bool))
        p1 = measure(build_graph(m), m)
        p2 = measure(build_graph(m2), m2)
        assert abs(p2["LEN"] / p1["LEN"] - 2.0) / 2.0 <= 0.05
        assert abs(p2["TI"] - p1["TI"]) / p1["TI"] <= 0.03

    def test_branch_angle_of_symmetric_y(self):
        m = np.zeros((21, 21), bool)
        for i in range(1, 9):
            m[10 - i, 10] = True
            m[10 + i, 10 - i] = True
            m[10 + i, 10 + i] = True
        m[10, 10] = True
        p = measure(build_graph(m), m)
        assert p["BPoints"] == 1
        assert 100.0 <= p["BA"] <= 140.0  # mean pairwise angle of the symmetric Y


class TestCorrelationReport:
    def _masks(self, seeds):
        from rladlab.toydata import make_layout

        return [make_layout(seed, 64).av for seed in seeds]

    def test_perfect_prediction(self):
        masks = self._masks(range(6))
        table = correlation_report(masks, masks)
        for key, value in table.items():
            assert value == pytest.approx(1.0, abs=1e-9), key

    def test_random_masks_decorrelated(self):
        gt = self._masks(range(50))
        rng = np.random.default_rng(123)
        pred = []
        for _ in range(50):
            blob = np.zeros((64, 64, 2), bool)
            for ch in range(2):
                yy, xx = np.mgrid[0:64, 0:64]
                cy, cx = rng.uniform(10, 54, 2)
                blob[..., ch] = np.hypot(yy - cy, xx - cx) < rng.uniform(3, 12)
            pred.append(blob)
        table = correlation_report(gt, pred)
        for key, value in table.items():
            assert abs(value) < 0.3, (key, value)

    def test_schema_exact(self):
        masks = self._masks(range(4))
        table = correlation_report(masks, masks)
        assert set(table) == set(PARAM_KEYS)

    def test_validation(self):
        masks = self._masks(range(3))
        with pytest.raises(ShapeError):
            correlation_report(masks, masks[:2])
        with pytest.raises(DomainError):
            correlation_report(masks[:1], masks[:1])
