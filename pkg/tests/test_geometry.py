import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from billiardlab.errors import InvalidConfiguration, PreconditionError, TangentHit
from billiardlab.geometry import (BoundaryPoint, ConvexObstacle, ObstacleConfiguration, check_no_eclipse,
                                  min_separation, outward_normal_and_shape, ray_intersect, reference_configuration)


def far_pair(p, q):
    # a third disc well away from the pair so the configuration is valid
    return ObstacleConfiguration([p, q, ConvexObstacle.disc((0.0, 40.0), 1.0)])


def fd_curvature(obs, theta, h=1e-5):
    """Curvature from central differences of the normal along arclength."""
    dn = (obs.normal(theta + h) - obs.normal(theta - h)) / (2 * h)
    ds = np.linalg.norm(obs.dpoint(theta))
    return float(np.linalg.norm(dn) / ds)


def brute_distance(p, q, m=4000):
    th = np.linspace(0, 2 * np.pi, m, endpoint=False)
    P, Q = p.point(th), q.point(th)
    d = np.linalg.norm(P[:, None, :] - Q[None, :, :], axis=2)
    i, j = np.unravel_index(np.argmin(d), d.shape)
    # refine locally on a finer grid
    tp = th[i] + np.linspace(-2e-3, 2e-3, 801)
    tq = th[j] + np.linspace(-2e-3, 2e-3, 801)
    d2 = np.linalg.norm(p.point(tp)[:, None, :] - q.point(tq)[None, :, :], axis=2)
    return float(d2.min())


def hull_sample_clear(ki, kj, kl, m=20000):
    """Dense sample of the convex hull of two discs (stadium) tested against a third disc."""
    ci, cj = ki.c, kj.c
    r = ki.radius
    t = np.linspace(0, 1, m)
    seg = ci[None, :] + t[:, None] * (cj - ci)[None, :]
    # distance from the third centre to the stadium is distance to the segment minus r
    d = np.linalg.norm(seg - kl.c[None, :], axis=1).min() - r
    return d > kl.radius


class TestNormalAndShape:
    def test_unit_disc(self):
        cfg = far_pair(ConvexObstacle.disc((0, 0), 1.0), ConvexObstacle.disc((5, 0), 1.0))
        bp = cfg.boundary_point(0, 0.0)
        nu, Lu, k = outward_normal_and_shape(cfg, bp, np.array([0.0, 1.0]))
        assert np.allclose(nu, [1, 0]) and np.allclose(Lu, [0, 1]) and k == pytest.approx(1.0)

    @pytest.mark.parametrize("r", [0.5, 1.0, 2.5])
    def test_disc_radius(self, r):
        cfg = far_pair(ConvexObstacle.disc((0, 0), r), ConvexObstacle.disc((10, 0), 1.0))
        for th in (0.3, 2.0, -1.1):
            bp = cfg.boundary_point(0, th)
            u = np.array([-math.sin(th), math.cos(th)])
            _, Lu, k = outward_normal_and_shape(cfg, bp, u)
            assert k == pytest.approx(1 / r, rel=1e-14)
            assert np.linalg.norm(Lu) >= k - 1e-15

    def test_ellipse_against_finite_differences(self):
        ell = ConvexObstacle.ellipse((0, 0), 2.0, 1.0)
        cfg = far_pair(ell, ConvexObstacle.disc((8, 0), 1.0))
        bp = cfg.boundary_point(0, 0.0)
        nu, _, k = outward_normal_and_shape(cfg, bp, np.array([0.0, 1.0]))
        assert np.allclose(nu, [1, 0])
        # a / b^2 at the end of the major axis
        assert k == pytest.approx(2.0, rel=1e-14)
        for th in np.linspace(0, 2 * np.pi, 17):
            assert abs(ell.curvature(th) - fd_curvature(ell, th)) <= 1e-8

    def test_rejects_non_tangent(self, ref):
        bp = ref.boundary_point(0, 0.0)
        with pytest.raises(PreconditionError):
            outward_normal_and_shape(ref, bp, np.array([1.0, 0.0]))
        with pytest.raises(PreconditionError):
            outward_normal_and_shape(ref, bp, np.array([0.0, 2.0]))

    @settings(max_examples=20, deadline=None)
    @given(a=st.floats(0.3, 3), b=st.floats(0.3, 3), angle=st.floats(0, 3.14), th=st.floats(-4, 4))
    def test_second_fundamental_form_positive(self, a, b, angle, th):
        ell = ConvexObstacle.ellipse((0, 0), a, b, angle)
        cfg = far_pair(ell, ConvexObstacle.disc((10, 0), 1.0))
        t = ell.dpoint(th)
        u = t / np.linalg.norm(t)
        nu, Lu, k = outward_normal_and_shape(cfg, cfg.boundary_point(0, th), u)
        assert k > 0 and float(Lu @ u) > 0
        # the normal is outward
        assert ell.level(ell.point(th) + 1e-6 * nu) > 0


class TestRayIntersect:
    def setup_method(self):
        self.cfg = far_pair(ConvexObstacle.disc((0, 0), 1.0), ConvexObstacle.disc((0, -20), 1.0))

    def test_head_on(self):
        t, bp = ray_intersect((3, 0), np.array([-1.0, 0.0]), self.cfg)
        assert t == pytest.approx(2.0) and np.allclose(bp.position, [1, 0]) and bp.obstacle == 0

    def test_escape(self):
        assert ray_intersect((3, 0), np.array([1.0, 0.0]), self.cfg) is None

    def test_from_above(self):
        t, bp = ray_intersect((0, 3), np.array([0.0, -1.0]), self.cfg)
        assert t == pytest.approx(2.0) and np.allclose(bp.position, [0, 1])

    def test_tangent(self):
        with pytest.raises(TangentHit):
            ray_intersect((3, 1.0), np.array([-1.0, 0.0]), self.cfg)

    @settings(max_examples=50, deadline=None)
    @given(th=st.floats(0, 2 * np.pi), psi=st.floats(-1.5, 1.5))
    def test_relaunch_does_not_rehit(self, th, psi):
        ref = reference_configuration()
        obs = ref[0]
        nu = obs.normal(th)
        c, s = math.cos(psi), math.sin(psi)
        v = np.array([c * nu[0] - s * nu[1], s * nu[0] + c * nu[1]])
        hit = None
        try:
            hit = ray_intersect(obs.point(th), v, ref)
        except TangentHit:
            return
        assert hit is None or hit[1].obstacle != 0


class TestNoEclipse:
    def test_reference(self, ref):
        ok, witness = check_no_eclipse(ref)
        assert ok and witness is None
        for i, j, l in [(0, 1, 2), (0, 2, 1), (1, 2, 0)]:
            assert hull_sample_clear(ref[i], ref[j], ref[l])

    def test_collinear(self):
        cfg = ObstacleConfiguration([ConvexObstacle.disc(c, 1.0) for c in [(0, 0), (4, 0), (8, 0)]])
        assert check_no_eclipse(cfg) == (False, (0, 2, 1))

    def test_two_obstacles(self):
        with pytest.raises(InvalidConfiguration):
            ObstacleConfiguration([ConvexObstacle.disc((0, 0), 1), ConvexObstacle.disc((5, 0), 1)])

    def test_overlap(self):
        with pytest.raises(InvalidConfiguration):
            ObstacleConfiguration([ConvexObstacle.disc(c, 1.0) for c in [(0, 0), (1.5, 0), (0, 8)]])

    # the threshold is side = 4/sqrt(3) ~ 2.3094, where the hull just touches the third disc
    @pytest.mark.parametrize("side,expected", [(2.2, False), (2.3, False), (2.32, True), (3.0, True), (6.0, True)])
    def test_against_sampling_oracle(self, side, expected):
        cfg = ObstacleConfiguration([ConvexObstacle.disc(c, 1.0) for c in
                                     [(0, 0), (side, 0), (side / 2, side * math.sqrt(3) / 2)]])
        oracle = all(hull_sample_clear(cfg[i], cfg[j], cfg[l]) for i, j, l in [(0, 1, 2), (0, 2, 1), (1, 2, 0)])
        assert oracle == expected
        assert cfg.no_eclipse == oracle

    @pytest.mark.parametrize("r", [0.9, 0.5, 0.1])
    def test_monotone_under_shrinking(self, r):
        assert reference_configuration(radius=r).no_eclipse

    def test_ellipses(self):
        cfg = ObstacleConfiguration([ConvexObstacle.ellipse((0, 0), 1.5, 0.7, 0.3),
                                     ConvexObstacle.ellipse((7, 0), 1.2, 0.8, -0.4),
                                     ConvexObstacle.ellipse((3.5, 6), 1.0, 0.6, 1.0)])
        assert cfg.no_eclipse


class TestSeparation:
    def test_reference(self, ref):
        assert min_separation(ref) == pytest.approx(4.0, abs=1e-15)

    def test_contributes_to_min(self):
        cfg = far_pair(ConvexObstacle.disc((0, 0), 1.0), ConvexObstacle.disc((5, 0), 1.0))
        assert cfg.pair_distances[0, 1] == pytest.approx(3.0) and cfg.d0 == pytest.approx(3.0)

    @pytest.mark.parametrize("angle", [0.0, 0.7, 2.1])
    def test_ellipse_pair(self, angle):
        p = ConvexObstacle.ellipse((0, 0), 2.0, 1.0, angle)
        q = ConvexObstacle.ellipse((5, 1), 1.0, 0.5, -angle)
        cfg = far_pair(p, q)
        assert abs(cfg.pair_distances[0, 1] - brute_distance(p, q)) <= 1e-6


class TestRigidMotion:
    @settings(max_examples=10, deadline=None)
    @given(rot=st.floats(-3, 3), dx=st.floats(-50, 50), dy=st.floats(-50, 50))
    def test_invariance(self, rot, dx, dy):
        cfg = ObstacleConfiguration([ConvexObstacle.ellipse((0, 0), 1.5, 0.7, 0.3),
                                     ConvexObstacle.disc((7, 0), 1.0),
                                     ConvexObstacle.ellipse((3.5, 6), 1.0, 0.6, 1.0)])
        moved = cfg.moved(rot, (dx, dy))
        assert moved.no_eclipse == cfg.no_eclipse
        for key, d in cfg.pair_distances.items():
            assert moved.pair_distances[key] == pytest.approx(d, rel=1e-10)
        for th in (0.1, 1.3):
            assert moved[0].curvature(th) == pytest.approx(cfg[0].curvature(th), rel=1e-10)


class TestConfigFile:
    def test_round_trip(self, tmp_path, ref):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(ref.to_dict()))
        loaded = ObstacleConfiguration.load(p)
        assert loaded == ref and loaded.d0 == 4.0 and loaded.no_eclipse

    def test_documented_format(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text('{"dimension": 2, "obstacles": [{"kind": "disc", "center": [0,0], "radius": 1},'
                     '{"kind": "disc", "center": [6,0], "radius": 1}, {"kind": "disc", "center": [3,5], "radius": 1}]}')
        assert ObstacleConfiguration.load(p).k0 == 3

    @pytest.mark.parametrize("text", ["not json", '{"dimension": 3, "obstacles": []}', '{"dimension": 2}',
                                      '{"obstacles": [{"kind": "square"}]}'])
    def test_bad_files(self, tmp_path, text):
        p = tmp_path / "bad.json"
        p.write_text(text)
        with pytest.raises(InvalidConfiguration):
            ObstacleConfiguration.load(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InvalidConfiguration):
            ObstacleConfiguration.load(tmp_path / "none.json")

    def test_bad_axes(self):
        with pytest.raises(InvalidConfiguration):
            ConvexObstacle.ellipse((0, 0), -1.0, 1.0)

    def test_boundary_point_on_boundary(self, ref):
        bp = ref.boundary_point(2, 0.7)
        assert isinstance(bp, BoundaryPoint)
        assert abs(ref[2].level(bp.position)) <= 1e-12


class TestPointDistance:
    def test_disc(self, ref):
        assert ref[0].distance([3.0, 0.0]) == pytest.approx(2.0)
        assert ref[0].distance([0.2, 0.1]) == 0.0
        assert ref.boundary_distance([3.0, 0.0]) == pytest.approx(2.0)

    @pytest.mark.parametrize("p", [(5.0, 5.0), (1.0, 3.5), (-3.0, 0.0), (2.9, 2.4)])
    def test_ellipse_against_sampling(self, p):
        e = ConvexObstacle.ellipse((1.0, 2.0), 2.0, 1.0, 0.4)
        th = np.linspace(0, 2 * np.pi, 20001)
        pts = np.array([e.point(t) for t in th])
        d = np.linalg.norm(pts - np.array(p), axis=1)
        k = int(np.argmin(d))
        fine = np.linspace(th[k - 1], th[k + 1], 2001)
        brute = min(np.linalg.norm(e.point(t) - np.array(p)) for t in fine)
        assert e.distance(p) == pytest.approx(brute, abs=1e-9)
