import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lazyball.diagnostics import (cube_sampler, isotropic_cube, isotropy_report,
                                  transformed_box_moments)
from lazyball.geometry import AffineMap, ContractError, apply_affine, distance_to_boundary, make_body
from lazyball.rounding import (RoundingConfig, RoundingFailure, cap_radius, estimate_moments,
                               initial_interior_point, interior_distance, reexpress, round_bounded,
                               round_polytope, sqrt_psd, warm_start)
from lazyball.walks import WalkConfig, make_rng, practical_alpha, sample_unit_ball


def small_cfg(n, m, r, R, **kw):
    kw.setdefault("p", max(n + 1, 30 * n))
    kw.setdefault("proper_steps", 800)
    return RoundingConfig.practical(n, m, r, R, **kw)


class TestEstimateMoments:
    def test_four_points(self):
        mu, S = estimate_moments([(1, 0), (-1, 0), (0, 1), (0, -1)])
        np.testing.assert_allclose(mu, 0)
        np.testing.assert_allclose(S, np.diag([0.5, 0.5]))

    def test_equal_samples(self):
        mu, S = estimate_moments(np.tile([1.0, 2.0, 3.0], (5, 1)))
        np.testing.assert_allclose(mu, [1, 2, 3])
        np.testing.assert_array_equal(S, np.zeros((3, 3)))

    def test_uniform_cube(self, rng):
        _, S = estimate_moments(cube_sampler(2)(rng, 100_000))
        np.testing.assert_allclose(S, np.eye(2) / 3, atol=0.05 / 3)

    @pytest.mark.parametrize("k", [1000, 4000, 16_000])
    def test_clt_rate(self, k):
        # mean error shrinks like sqrt(1/(3k)) per coordinate
        errs = [np.abs(estimate_moments(cube_sampler(3)(make_rng(s), k))[0]).max() for s in range(20)]
        assert np.mean(errs) <= 4 * math.sqrt(1 / (3 * k))

    def test_too_few(self):
        with pytest.raises(ContractError):
            estimate_moments([[1.0, 2.0]])


class TestSqrtPsd:
    def test_square(self, np_rng):
        B = np_rng.standard_normal((4, 4))
        S = B @ B.T + 0.1 * np.eye(4)
        R = sqrt_psd(S)
        np.testing.assert_allclose(R @ R, S, atol=1e-10)
        np.testing.assert_allclose(R, R.T)

    def test_singular(self):
        with pytest.raises(RoundingFailure):
            sqrt_psd(np.diag([1.0, 0.0]))


class TestInitialInteriorPoint:
    @pytest.mark.parametrize("n", [1, 2, 5])
    def test_margin(self, rng, n):
        for _ in range(200):
            assert np.linalg.norm(initial_interior_point(n, rng=rng)) <= 1 - n ** -3

    def test_rejection_rate_n2(self, rng):
        # the filter rejects the annulus 1 - 1/8 < |v| <= 1 of the unit disc
        v = np.linalg.norm(sample_unit_ball(rng, 2, 200_000), axis=1)
        rate = np.mean(v > 1 - 1 / 8)
        assert rate == pytest.approx(1 - (7 / 8) ** 2, abs=0.005)
        assert 1 - (7 / 8) ** 2 == pytest.approx(0.234, abs=1e-3)

    def test_mean_near_zero(self, rng):
        pts = np.array([initial_interior_point(3, rng=rng) for _ in range(20_000)])
        assert np.all(np.abs(pts.mean(axis=0)) <= 4 / math.sqrt(5 * 20_000))

    def test_bad_dimension(self):
        with pytest.raises(ContractError):
            initial_interior_point(0)


class TestWarmStart:
    def test_identity_reexpression(self, np_rng):
        M = AffineMap.from_factor(np_rng.standard_normal((3, 3)) + 3 * np.eye(3), [1.0, 2.0, 3.0])
        y = np_rng.standard_normal(3)
        np.testing.assert_allclose(reexpress(M, M, y), y)

    def test_doubling_halves(self, np_rng):
        cur = AffineMap.from_factor(np.diag([1.0, 3.0]), [0.5, -1.0])
        nxt = AffineMap.from_factor(2 * cur.sigma_factor, cur.mu)
        y = np_rng.standard_normal(2)
        np.testing.assert_allclose(reexpress(cur, nxt, y), y / 2)

    def test_acceptance_rate_on_isotropic_cube(self):
        n = 4
        poly = isotropic_cube(n)
        ident = AffineMap.identity(n)
        walk = WalkConfig(eta=0.5, alpha=practical_alpha(2 * n), proper_steps=200, i_max=10 ** 7)
        rng = make_rng(4)
        tries = []
        for _ in range(100):
            _, k, _ = warm_start(ident, ident, poly, walk, rng, x0=np.zeros(n), radius=100.0, rho=100.0)
            tries.append(k)
        assert len(tries) / sum(tries) >= 0.5

    def test_output_is_interior(self, rng):
        n = 3
        poly = make_body("cube", n)
        cur = AffineMap.scaling(n, 1.0)
        nxt = AffineMap.scaling(n, 0.6)
        walk = WalkConfig(eta=0.4, alpha=practical_alpha(6), proper_steps=200, i_max=10 ** 7)
        y, _, stats = warm_start(cur, nxt, poly, walk, rng, x0=np.zeros(n), radius=1.2, rho=50.0)
        assert interior_distance(poly, nxt, 1.2, 50.0, y) >= n ** -3
        assert stats.wall_steps > 0

    def test_exhausted(self, rng):
        # the next frame's origin sits 50 away, outside its own cap of radius 45
        n = 2
        poly = make_body("cube", n)
        cur = AffineMap.identity(n)
        nxt = AffineMap.from_factor(np.eye(n), [50.0, 0.0])
        walk = WalkConfig(eta=0.3, alpha=practical_alpha(4), proper_steps=50, i_max=10 ** 6)
        with pytest.raises(RoundingFailure):
            warm_start(cur, nxt, poly, walk, rng, x0=np.zeros(n), radius=10.0, rho=45.0, max_tries=5)


class TestConfig:
    def test_invalid(self):
        walk = WalkConfig(eta=0.1, alpha=1.0, proper_steps=10, i_max=10)
        for kw in (dict(r=2.0, R=1.0), dict(r=0.0, R=1.0)):
            with pytest.raises(ContractError):
                RoundingConfig(p=10, eps=0.1, walk=walk, **kw)
        with pytest.raises(ContractError):
            RoundingConfig(r=1, R=2, p=10, eps=1.0, walk=walk)

    def test_p_too_small(self):
        cfg = small_cfg(4, 8, 1.0, 2.0, p=4)
        with pytest.raises(ContractError):
            round_polytope(make_body("cube", 4), cfg, make_rng(0))

    @pytest.mark.parametrize("power,expected", [(2, 20 * math.log(40 * 100 / 0.1)), (0, 20 * math.log(400))])
    def test_cap_radius(self, power, expected):
        assert cap_radius(1, 0.1, 10, power) == pytest.approx(expected)

    def test_paper_profile(self):
        cfg = RoundingConfig.paper(3, 6, 1.0, 4.0, eps=0.1)
        assert cfg.attempts_max == math.ceil(math.log(10))
        assert cfg.checks_cap <= cfg.walk.i_max
        assert not cfg.scale_first_step


class TestRoundPolytope:
    def test_ball_needs_no_iterations(self, rng):
        poly = make_body("cube", 3)
        cfg = small_cfg(3, 6, 1.0, 1.0)
        res = round_polytope(poly, cfg, rng)
        assert res.succeeded and res.iterations_completed == 0 and res.i_star == 0
        np.testing.assert_allclose(res.map.sigma_factor, np.eye(3))
        np.testing.assert_allclose(res.map.mu, 0)

    def test_scaled_cube(self):
        lo, hi = np.array([-1.0, -10.0]), np.array([1.0, 10.0])
        poly = make_body("scaled_cube", 2, scales=[1.0, 10.0])
        cfg = RoundingConfig.practical(2, 4, 1.0, 10 * math.sqrt(2), proper_steps=1500)
        res = round_polytope(poly, cfg, make_rng(3))
        assert res.succeeded and res.iterations_completed == res.i_star - 1
        _, cov = transformed_box_moments(lo, hi, res.map)
        eig = np.linalg.eigvalsh(cov)
        assert eig[-1] / eig[0] <= 16
        body = apply_affine(poly, res.map).with_rho(cfg.rho(2))
        assert distance_to_boundary(body, res.warm_point) >= 2 ** -3

    def test_frame_consistency(self):
        poly = make_body("random_rows", 3, m=12, seed=5)
        cfg = small_cfg(3, 12, 1.0, 3.0)
        probe = make_rng(99)
        seen = []

        def check(i, amap, working):
            ref = apply_affine(poly, amap).with_rho(cfg.rho(3))
            pts = 3 * sample_unit_ball(probe, 3, 1000)
            s_ref = ref.b - pts @ ref.A.T
            s_work = working.b - pts @ working.A.T
            # compare only points clear of every face by 1e-9
            clear = (np.abs(s_ref) > 1e-9).all(axis=1)
            assert np.array_equal((s_ref[clear] >= 0).all(axis=1), (s_work[clear] >= 0).all(axis=1))
            seen.append(i)

        res = round_polytope(poly, cfg, make_rng(1), on_iteration=check)
        assert res.succeeded and seen == list(range(1, res.iterations_completed + 1))

    def test_deterministic(self):
        poly = make_body("scaled_cube", 2, scales=[1.0, 3.0])
        cfg = small_cfg(2, 4, 1.0, 3.2)
        a = round_polytope(poly, cfg, make_rng(5))
        b = round_polytope(poly, cfg, make_rng(5))
        assert a.to_json() == b.to_json()

    def test_step_cap_reported(self):
        poly = make_body("scaled_cube", 2, scales=[1.0, 3.0])
        cfg = small_cfg(2, 4, 1.0, 3.2)
        cfg = cfg.replace(walk=cfg.walk.replace(i_max=cfg.walk.proper_steps))
        res = round_polytope(poly, cfg, make_rng(5))
        assert not res.succeeded and res.reason == "hit_i_max"

    def test_serialisation(self):
        res = round_polytope(make_body("cube", 2), small_cfg(2, 4, 1.0, 1.0), make_rng(0))
        d = res.to_dict()
        assert {"sigma_factor", "mu", "warm_point", "iterations", "checks_used", "succeeded"} <= set(d)


class TestRoundBounded:
    def test_zero_budget(self, rng):
        cfg = small_cfg(2, 4, 1.0, 3.0, checks_cap=0, attempts_max=4)
        res = round_bounded(make_body("cube", 2), cfg, rng)
        assert not res.succeeded and res.attempts == 4 and res.reason == "check_budget"

    def test_unbounded_budget_matches_single_attempt(self):
        poly = make_body("scaled_cube", 2, scales=[1.0, 2.0])
        cfg = small_cfg(2, 4, 1.0, 2.5)
        a = round_bounded(poly, cfg, make_rng(7))
        b = round_polytope(poly, cfg, make_rng(7).spawn(cfg.attempts_max)[0])
        assert a.succeeded and a.attempts == 1
        assert a.to_json() == b.to_json()

    def test_attempt_streams_differ(self):
        poly = make_body("scaled_cube", 2, scales=[1.0, 2.0])
        cfg = small_cfg(2, 4, 1.0, 2.5)
        s1, s2 = make_rng(7).spawn(2)
        a, b = round_polytope(poly, cfg, s1), round_polytope(poly, cfg, s2)
        assert not np.array_equal(a.map.sigma_factor, b.map.sigma_factor)

    def test_small_budget_fails(self):
        poly = make_body("scaled_cube", 2, scales=[1.0, 4.0])
        cfg = small_cfg(2, 4, 1.0, 4.5, checks_cap=500, attempts_max=2)
        res = round_bounded(poly, cfg, make_rng(2))
        assert not res.succeeded and res.attempts == 2 and res.reason == "check_budget"


class TestNesting:
    def test_volume_growth_bounded_by_e(self):
        n, r = 3, 1.0
        lo, hi = np.array([-1.0, -2.0, -3.0]), np.array([1.0, 2.0, 3.0])
        pts = lo + (hi - lo) * make_rng(0).random((1_000_000, n))
        norms = np.linalg.norm(pts, axis=1)
        radii = r * (1 + 1 / n) ** np.arange(0, 8)
        counts = np.array([(norms <= t).sum() for t in radii])
        assert np.all(np.diff(counts) >= 0)
        ratios = counts[1:] / counts[:-1]
        se = np.sqrt(ratios / counts[:-1])
        assert np.all(ratios <= math.e + 3 * se)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 6), st.data())
    def test_isotropy_propagates_on_boxes(self, n, data):
        floats = st.floats(0.2, 5.0)
        half = np.array(data.draw(st.lists(floats, min_size=n, max_size=n)))
        lo, hi = -half, half
        # a frame making the smaller box 2-isotropic: per-axis spread within [1/2, 2]
        spread = np.array(data.draw(st.lists(st.floats(0.5, 2.0), min_size=n, max_size=n)))
        shift = np.array(data.draw(st.lists(st.floats(-0.1, 0.1), min_size=n, max_size=n)))
        shift *= min(1.0, 0.2 / max(np.linalg.norm(shift), 1e-12))
        F = np.diag(half / math.sqrt(3) / spread)
        amap = AffineMap.from_factor(F, -F @ shift)
        mu0, cov0 = transformed_box_moments(lo, hi, amap)
        assert isotropy_report(cov0, mu0).grade_a <= 2 + 1e-9
        grow_lo = np.array(data.draw(st.lists(st.floats(1.0, 1 + 1 / n), min_size=n, max_size=n)))
        grow_hi = np.array(data.draw(st.lists(st.floats(1.0, 1 + 1 / n), min_size=n, max_size=n)))
        mu1, cov1 = transformed_box_moments(lo * grow_lo, hi * grow_hi, amap)
        assert isotropy_report(cov1, mu1).grade_a <= 15
