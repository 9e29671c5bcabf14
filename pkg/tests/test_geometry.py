"""Boxes, erosion, covers, and covering numbers."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npmpc.geometry import (Box, covering_centers_box, covering_number_box,
                            dist_to_boundary, erode, inscribed_radius,
                            is_cover, uniform_grid, vec_norm)


def box2(a: float = 3.0) -> Box:
    return Box([-a, -a], [a, a])


class TestBox:
    def test_empty_flag(self):
        assert Box([1.0], [0.0]).is_empty
        assert not Box([0.0], [0.0]).is_empty

    def test_contains_closed_boundary(self):
        b = box2()
        assert b.contains([3.0, -3.0])
        assert not b.contains([3.0000000001, 0.0])

    def test_contains_matrix(self):
        b = box2()
        got = b.contains(np.array([[0, 0], [4, 0], [-3, 3]]))
        assert got.tolist() == [True, False, True]

    def test_sample_inside(self):
        rng = np.random.default_rng(0)
        pts = box2().sample(rng, size=256)
        assert pts.shape == (256, 2) and box2().contains(pts).all()

    def test_sample_empty_raises(self):
        with pytest.raises(ValueError):
            Box([1.0], [0.0]).sample(np.random.default_rng(0))


class TestErode:
    def test_componentwise(self):
        got = erode(box2(3.0), 0.5)
        assert got.lo.tolist() == [-2.5, -2.5] and got.hi.tolist() == [2.5, 2.5]

    def test_zero_identity(self):
        b = box2(2.0)
        got = erode(b, 0.0)
        assert got.lo.tolist() == b.lo.tolist() and got.hi.tolist() == b.hi.tolist()

    def test_interval_inverts_to_empty(self):
        assert erode(Box([-1.0], [1.0]), 1.5).is_empty

    def test_negative_eps_rejected(self):
        with pytest.raises(ValueError):
            erode(box2(), -0.1)

    @given(st.floats(0, 2.9), st.floats(-1, 1))
    @settings(max_examples=200, deadline=None)
    def test_membership_oracle(self, eps, t):
        # x in erode(X, eps) iff the eps-ball around x fits inside X
        x = np.array([3.0 * t, -1.5])
        inner = erode(box2(3.0), eps)
        ball_fits = bool(
            box2().contains(x + eps) and box2().contains(x - eps)
        )
        assert bool(inner.contains(x)) == ball_fits

    def test_same_for_all_norms(self):
        for norm in ("inf", "two", 1, 3):
            got = erode(box2(3.0), 0.25, norm)
            assert got.lo.tolist() == [-2.75, -2.75]


class TestDistToBoundary:
    def test_center(self):
        assert dist_to_boundary([0.0, 0.0], box2()) == 3.0

    def test_interior_point(self):
        assert dist_to_boundary([2.5, 0.0], box2()) == 0.5

    def test_on_boundary(self):
        assert dist_to_boundary([3.0, 0.0], box2()) == 0.0

    def test_outside_clamps_to_zero(self):
        assert dist_to_boundary([4.0, 0.0], box2()) == 0.0

    def test_rows(self):
        got = dist_to_boundary(np.array([[0.0, 0.0], [2.5, 0.0]]), box2())
        assert got.tolist() == [3.0, 0.5]

    @given(st.floats(-2.99, 2.99), st.floats(-2.99, 2.99))
    @settings(max_examples=200, deadline=None)
    def test_ball_of_that_radius_fits(self, x1, x2):
        x = np.array([x1, x2])
        r = dist_to_boundary(x, box2())
        assert box2().contains(x + r) and box2().contains(x - r)


class TestUniformGrid:
    def test_interval_three_points(self):
        got = uniform_grid(Box([-1.0], [1.0]), 3)
        assert got.ravel().tolist() == [-1.0, 0.0, 1.0]

    def test_square_count(self):
        assert uniform_grid(Box([-1, -1], [1, 1]), 3).shape == (9, 2)

    def test_endpoints_present(self):
        got = uniform_grid(box2(), 5)
        corners = {(-3.0, -3.0), (-3.0, 3.0), (3.0, -3.0), (3.0, 3.0)}
        assert corners <= {tuple(p) for p in got}

    def test_g1_is_center(self):
        assert uniform_grid(box2(), 1).tolist() == [[0.0, 0.0]]


class TestCoveringNumber:
    def test_36(self):
        assert covering_number_box(box2(3.0), 0.5) == 36

    def test_single_ball(self):
        assert covering_number_box(box2(3.0), 3.0) == 1

    def test_400(self):
        assert covering_number_box(Box([-2, -2], [2, 2]), 0.1) == 400

    def test_against_second_evaluation(self):
        # independent form: per-axis ceil of side / diameter, multiplied out
        import math
        rng = np.random.default_rng(3)
        for _ in range(100):
            lo = rng.uniform(-5, 0, size=2)
            hi = lo + rng.uniform(0.1, 6, size=2)
            r = float(rng.uniform(0.05, 3))
            box = Box(lo, hi)
            expect = 1
            for s in hi - lo:
                expect *= max(1, math.ceil(s / (2 * r) - 1e-9))
            assert covering_number_box(box, r) == expect

    def test_centers_realize_the_count(self):
        box = box2(3.0)
        centers = covering_centers_box(box, 0.5)
        assert centers.shape[0] == covering_number_box(box, 0.5) == 36
        assert is_cover(centers, 0.5, box).holds

    def test_nonpositive_radius_rejected(self):
        with pytest.raises(ValueError):
            covering_number_box(box2(), 0.0)


class TestIsCover:
    def test_grid_tiles_exactly(self):
        centers = uniform_grid(Box([-1, -1], [1, 1]), 3)
        res = is_cover(centers, 0.5, Box([-1, -1], [1, 1]))
        assert res.holds and res.exact

    def test_exact_knife_edge(self):
        # radius below the tiling pitch must fail, at it must hold
        centers = uniform_grid(Box([-1, -1], [1, 1]), 3)
        assert not is_cover(centers, 0.5 - 1e-12, Box([-1, -1], [1, 1])).holds
        assert is_cover(centers, 0.5, Box([-1, -1], [1, 1])).holds

    def test_single_small_ball_fails_with_witness(self):
        res = is_cover(np.array([[0.0, 0.0]]), 0.9, Box([-1, -1], [1, 1]))
        assert not res.holds
        w = np.asarray(res.witness)
        assert Box([-1, -1], [1, 1]).contains(w)
        assert np.max(np.abs(w)) > 0.9  # genuinely uncovered

    def test_witness_is_uncovered(self):
        rng = np.random.default_rng(5)
        centers = rng.uniform(-3, 3, size=(12, 2))
        radii = rng.uniform(0.2, 0.8, size=12)
        res = is_cover(centers, radii, box2())
        if not res.holds:
            d = np.max(np.abs(centers - np.asarray(res.witness)), axis=1)
            assert np.all(d > radii)

    def test_empty_centers_no_cover(self):
        assert not is_cover(np.zeros((0, 2)), [], box2()).holds

    @given(st.sampled_from([2, 3, 5, 9, 17]))
    @settings(max_examples=20, deadline=None)
    def test_grid_pitch_cover_property(self, g):
        # grid covers iff radius >= half the pitch; g-1 a power of two keeps
        # the pitch exactly representable so the knife edge is genuine
        box = Box([-1, -1], [1, 1])
        centers = uniform_grid(box, g)
        pitch = 2.0 / (g - 1)
        assert is_cover(centers, pitch / 2, box).holds
        assert not is_cover(centers, pitch / 2 * 0.99, box).holds


class TestInscribedRadius:
    def test_symmetric_box(self):
        assert inscribed_radius(box2(3.0)) == 3.0

    def test_offset_box(self):
        assert inscribed_radius(Box([-1.0, -4.0], [2.0, 3.0])) == 1.0

    def test_requires_origin(self):
        with pytest.raises(ValueError):
            inscribed_radius(Box([1.0], [2.0]))


def test_vec_norm_rows_and_single():
    assert vec_norm([3.0, -4.0], "inf") == 4.0
    assert vec_norm([3.0, -4.0], "two") == 5.0
    got = vec_norm(np.array([[1.0, -2.0], [0.5, 0.25]]), "inf")
    assert got.tolist() == [2.0, 0.5]
