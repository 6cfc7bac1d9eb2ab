"""Post-retirement dual value: quadrature vs MC, closed forms, strategies."""

import numpy as np
import pytest

from retireopt.market import MarketEnvironment, baseline_environment
from retireopt.post_value import (
    AnalyticKernel,
    GaussHermiteKernel,
    PostValueEvaluator,
    apy_closed_form,
    build_post_surface,
    hatV_derivatives,
    hatV_mc,
    hatV_quadrature,
    infinite_horizon_hatV,
    pension_adjusted_wealth,
    post_strategy,
    primal_value,
    stationary_dual_value,
    surface_derivatives_fd,
)
from retireopt.utility import (
    ApyUtility,
    DualTerms,
    PowerPairUtility,
    dual_h,
    dual_h_neg_derivative,
    dual_power_terms,
    envelope_breakpoints,
)

ENV = baseline_environment()
SPEC = PowerPairUtility(alpha=0.5, beta=0.75, a=10.0)
APY = ApyUtility(phi=2.0, psi=3.0, c0=0.5, b0=2.0)


@pytest.fixture(scope="module")
def evaluator():
    return PostValueEvaluator(ENV, SPEC)


@pytest.fixture(scope="module")
def surface():
    return build_post_surface(ENV, SPEC, n_t=500)


class TestInnerKernels:
    def test_analytic_matches_gauss_hermite_away_from_kink(self):
        # GH stalls around 1e-6..1e-7 once its tail nodes cross the kink,
        # which is why the closed-form moments are the default inner evaluator
        ak = AnalyticKernel(dual_power_terms(SPEC))
        gh = GaussHermiteKernel(SPEC, n_nodes=96)
        ys = np.array([0.05, 2.0, 5.0])
        for delta in (0.1, 0.5, 2.0):
            M = (0.07 - 0.5 * 0.0625) * delta
            V = 0.0625 * delta
            a = ak.expectation(ys, M, V)
            g = gh.expectation(ys, M, V)
            assert np.allclose(a, g, rtol=5e-6)

    def test_analytic_matches_monte_carlo_near_kink(self):
        terms = dual_power_terms(SPEC)
        ak = AnalyticKernel(terms)
        rng = np.random.default_rng(2)
        y = terms.kink  # hardest point for any smooth quadrature
        delta = 0.4
        M = (0.07 - 0.5 * 0.0625) * delta
        V = 0.0625 * delta
        draws = y * np.exp(M + np.sqrt(V) * rng.standard_normal(400_000))
        mc = dual_h(draws, SPEC)
        se = mc.std(ddof=1) / np.sqrt(mc.size)
        assert abs(float(ak.expectation(np.array([y]), M, V)[0]) - mc.mean()) < 4 * se

    def test_derivative_kernels_vs_finite_differences(self):
        ak = AnalyticKernel(dual_power_terms(SPEC))
        M, V = 0.02, 0.03
        ys = np.array([0.2, 0.4273, 1.0, 3.0])
        eps = 1e-6
        d_fd = (ak.expectation(ys + eps, M, V) - ak.expectation(ys - eps, M, V)) / (2 * eps)
        assert np.allclose(ak.d_expectation_dy(ys, M, V), d_fd, rtol=1e-6)
        dd_fd = (ak.d_expectation_dy(ys + eps, M, V)
                 - ak.d_expectation_dy(ys - eps, M, V)) / (2 * eps)
        assert np.allclose(ak.d2_expectation_dy2(ys, M, V), dd_fd, rtol=1e-6)


class TestQuadratureValue:
    def test_terminal_time_is_zero(self, evaluator):
        assert evaluator.value(ENV.T_bar, 1.0) == 0.0
        assert hatV_quadrature(ENV.T_bar, 0.3, ENV, SPEC) == 0.0

    def test_refinement_stability(self, evaluator):
        coarse = evaluator.value(0.0, 1.0, tol=1e-6)
        fine = evaluator.value(0.0, 1.0, tol=1e-11)
        assert coarse == pytest.approx(fine, rel=1e-6)

    def test_matches_finite_horizon_tail_of_closed_form(self):
        # constants with fast-decaying tails so T_bar=200 is effectively infinite
        env = MarketEnvironment(r=0.05, mu=0.1, sigma=0.4, rho=0.12, T=2.0, T_bar=200.0)
        cf = apy_closed_form(2.0, 3.0, 0.5, 2.0, env)
        for y in (0.1, 0.5, 1.5):
            val = hatV_quadrature(0.0, y, env, APY, tol=1e-9)
            assert val == pytest.approx(float(cf.value(np.array([y]))[0]), rel=1e-3)

    def test_quadrature_vs_mc_baseline(self, evaluator):
        val = evaluator.value(0.0, 1.0)
        mc, se = hatV_mc(0.0, 1.0, n_samples=20_000, seed=31, env=ENV, spec=SPEC)
        assert abs(val - mc) < 3 * se

    def test_gauss_hermite_mode_agrees(self):
        gh_val = hatV_quadrature(0.0, 2.0, ENV, SPEC, inner="gauss-hermite", tol=1e-8)
        an_val = hatV_quadrature(0.0, 2.0, ENV, SPEC, inner="analytic", tol=1e-10)
        assert gh_val == pytest.approx(an_val, rel=1e-6)


class TestMonteCarlo:
    def test_terminal_is_exact_zero(self):
        mean, se = hatV_mc(ENV.T_bar, 1.0, 100, 0, ENV, SPEC)
        assert mean == 0.0 and se == 0.0

    def test_consistency_large_n(self, evaluator):
        val = evaluator.value(0.5, 0.8)
        mean, se = hatV_mc(0.5, 0.8, n_samples=100_000, seed=7, env=ENV, spec=SPEC)
        assert abs(mean - val) < 4 * se

    def test_se_scaling_with_n(self):
        _, se1 = hatV_mc(0.0, 1.0, 4_000, seed=3, env=ENV, spec=SPEC)
        _, se2 = hatV_mc(0.0, 1.0, 16_000, seed=4, env=ENV, spec=SPEC)
        assert se2 == pytest.approx(se1 / 2.0, rel=0.2)


class TestDerivatives:
    def test_convexity_and_monotonicity_at_random_points(self, surface):
        rng = np.random.default_rng(5)
        ts = rng.uniform(0.0, ENV.T_bar * 0.99, 200)
        ys = np.exp(rng.uniform(np.log(surface.y_grid[2]),
                                np.log(surface.y_grid[-3]), 200))
        ev = surface.evaluator
        for t, y in zip(ts, ys):
            dv = ev.derivative(t, y, tol=1e-7)
            dvv = ev.second_derivative(t, y, tol=1e-7)
            assert dv <= 1e-12
            assert dvv >= -1e-8

    def test_wealth_vanishes_at_large_y(self, surface):
        y_max = surface.y_grid[-1]
        x_there = -surface.evaluator.derivative(0.0, y_max)
        x_mid = -surface.evaluator.derivative(0.0, 1.0)
        assert 0.0 <= x_there < 0.02 * x_mid

    def test_basic_only_regime_matches_power_integral(self, evaluator):
        # y >> kink: only the alpha-power term contributes
        al = SPEC.alpha
        a1 = (1 - al) / al
        p1 = -al / (1 - al)
        theta2 = 0.0625
        lam = 0.5 * theta2 * p1 * (p1 - 1) + 0.07 * p1 - 0.1
        for t, y in ((0.0, 9.0), (1.0, 8.0)):
            span = ENV.T_bar - t
            closed = a1 * p1 * y ** (p1 - 1) * (np.exp(lam * span) - 1.0) / lam
            assert evaluator.derivative(t, y, tol=1e-10) == pytest.approx(closed, rel=1e-6)

    def test_quadrature_vs_surface_fd_cross_validation(self, surface):
        for t, y in ((0.3, 0.8), (1.2, 1.7), (2.0, 0.3)):
            dv, dvv = hatV_derivatives(surface, t, y)
            dv_fd, dvv_fd = surface_derivatives_fd(surface, t, y)
            assert dv == pytest.approx(dv_fd, rel=1e-4)
            assert dvv == pytest.approx(dvv_fd, rel=2e-3)


class TestSurface:
    def test_terminal_row_exactly_zero(self, surface):
        assert np.all(surface.values[-1] == 0.0)

    def test_nonnegative_decreasing_convex(self, surface):
        vals = surface.values
        assert np.min(vals) >= -1e-12
        assert np.all(np.diff(vals[:-1], axis=1) <= 1e-10)
        second = np.diff(vals[:-1], 2, axis=1)
        scale = np.max(np.abs(vals))
        assert np.min(second) >= -1e-7 * scale

    def test_growth_envelope_stable_under_refinement(self):
        beta = SPEC.beta
        p = beta / (beta - 1.0)
        coarse = build_post_surface(ENV, SPEC, n_t=250)
        fine = build_post_surface(ENV, SPEC, n_t=500)
        for surf in (coarse, fine):
            mask = surf.y_grid >= 1.0
            surf.fitted_C = np.max(surf.values[0, mask] / surf.y_grid[mask] ** p)
        assert coarse.fitted_C == pytest.approx(fine.fitted_C, rel=1e-3)

    def test_pde_residual_small(self, evaluator):
        rng = np.random.default_rng(12)
        theta2 = 0.0625
        for _ in range(20):
            t = rng.uniform(0.05, 2.3)
            y = np.exp(rng.uniform(np.log(0.05), np.log(6.0)))
            eps = 1e-4
            vt = (evaluator.value(t + eps, y, tol=1e-11)
                  - evaluator.value(t - eps, y, tol=1e-11)) / (2 * eps)
            dv = evaluator.derivative(t, y, tol=1e-11)
            dvv = evaluator.second_derivative(t, y, tol=1e-11)
            val = evaluator.value(t, y, tol=1e-11)
            h = dual_h(y, SPEC)
            res = vt + 0.5 * theta2 * y ** 2 * dvv + 0.07 * y * dv - 0.1 * val + h
            assert abs(res) <= 1e-4 * (1.0 + abs(h))

    def test_mc_agreement_at_random_points(self, surface):
        rng = np.random.default_rng(9)
        for _ in range(10):
            t = rng.uniform(0.0, 2.2)
            y = np.exp(rng.uniform(np.log(0.2), np.log(3.0)))
            val = surface.evaluator.value(t, y)
            mc, se = hatV_mc(t, y, 4_000, seed=int(rng.integers(1 << 30)),
                             env=ENV, spec=SPEC)
            assert abs(val - mc) < 3.5 * se

    def test_csv_layout(self, surface, tmp_path):
        out = tmp_path / "surf.csv"
        surface.to_csv(out)
        header = out.read_text().splitlines()[0]
        assert header == "t,y,value,dy,dyy"


class TestPrimalValue:
    def test_fenchel_roundtrip(self, surface):
        for t, y0 in ((0.0, 0.8), (1.0, 1.5), (2.0, 0.5)):
            x = -surface.evaluator.derivative(t, y0, tol=1e-11)
            direct = surface.evaluator.value(t, y0, tol=1e-11) + x * y0
            assert primal_value(surface, t, x) == pytest.approx(direct, rel=1e-6, abs=1e-8)

    def test_monotone_in_wealth(self, surface):
        rng = np.random.default_rng(21)
        pairs = np.sort(rng.uniform(0.5, 60.0, size=(50, 2)), axis=1)
        v1 = primal_value(surface, 0.5, pairs[:, 0])
        v2 = primal_value(surface, 0.5, pairs[:, 1])
        assert np.all(v1 <= v2 + 1e-10)

    def test_concave_in_wealth(self, surface):
        rng = np.random.default_rng(22)
        pairs = np.sort(rng.uniform(1.0, 50.0, size=(50, 2)), axis=1)
        mids = 0.5 * pairs.sum(axis=1)
        lhs = primal_value(surface, 0.8, mids)
        va = primal_value(surface, 0.8, pairs[:, 0])
        vb = primal_value(surface, 0.8, pairs[:, 1])
        assert np.all(lhs >= 0.5 * (va + vb) - 1e-8)


class TestPostStrategy:
    def test_everything_vanishes_at_large_y(self, surface):
        x, pi, k = post_strategy(surface, 0.5, 9.5, ENV, SPEC)
        assert x < 0.15 and abs(pi[0]) < 0.35 and k < 0.15

    def test_comonotone_wealth_and_consumption(self, surface):
        ys = np.geomspace(0.05, 5.0, 30)
        xs, ks = [], []
        for y in ys:
            x, _, k = post_strategy(surface, 0.7, float(y), ENV, SPEC)
            xs.append(x)
            ks.append(k)
        assert np.all(np.diff(xs) <= 1e-9)
        assert np.all(np.diff(ks) <= 1e-9)

    def test_consumption_jump_but_wealth_continuous_across_kink(self, surface):
        env_data = envelope_breakpoints(SPEC)
        y_bar = env_data.y_bar
        t = 0.5
        x_lo, _, k_lo = post_strategy(surface, t, y_bar * (1 - 1e-7), ENV, SPEC)
        x_hi, _, k_hi = post_strategy(surface, t, y_bar * (1 + 1e-7), ENV, SPEC)
        assert k_lo == pytest.approx(env_data.k_plus, rel=1e-5)   # 45.477
        assert k_hi == pytest.approx(env_data.k_minus, rel=1e-5)  # 5.4772
        assert x_lo == pytest.approx(x_hi, rel=1e-4)


class TestApyClosedForm:
    ENV2 = MarketEnvironment(r=0.03, mu=0.1, sigma=0.4, rho=0.1, T=2.0, T_bar=2.5)

    def test_named_constants(self):
        cf = apy_closed_form(2.0, 3.0, 1.0, 2.0, self.ENV2)
        assert cf.constants["C2"] == pytest.approx(-1.0 / 0.03, rel=1e-12)
        assert cf.constants["C2"] == pytest.approx(-33.333, rel=1e-4)
        assert cf.constants["C6"] == pytest.approx(-cf.constants["C3"], rel=1e-12)

    def test_c1_continuity_at_kink(self):
        cf = apy_closed_form(2.0, 3.0, 0.5, 2.0, self.ENV2)
        k = cf.kink
        left, right = cf.value(np.array([k * (1 - 1e-12)])), cf.value(np.array([k]))
        assert abs(float(left - right)) <= 1e-10 * (1 + abs(float(right)))
        dleft = cf.derivative(np.array([k * (1 - 1e-12)]))
        dright = cf.derivative(np.array([k]))
        assert abs(float(dleft - dright)) <= 1e-9 * (1 + abs(float(dright)))

    def test_stated_constants_alone_fail_continuity(self):
        # the pasting terms are genuinely needed: the raw bracket gap is nonzero
        cf = apy_closed_form(2.0, 3.0, 0.5, 2.0, self.ENV2)
        assert abs(cf.stated_form_gap) > 1.0

    def test_stationary_pde_residual(self):
        cf = apy_closed_form(2.0, 3.0, 0.5, 2.0, self.ENV2)
        rng = np.random.default_rng(4)
        ys = np.exp(rng.uniform(np.log(1e-2), np.log(1e2), 100))
        ys = ys[np.abs(ys - cf.kink) / cf.kink > 1e-6]
        res = cf.solution.stationary_residual(ys, self.ENV2)
        scale = 1.0 + np.abs(cf.value(ys))
        assert np.max(np.abs(res) / scale) <= 1e-8

    def test_degenerate_denominator_raises(self):
        # choose psi so its power is killed at exactly rate ~0
        with pytest.raises(ValueError):
            env = MarketEnvironment(r=0.03, mu=0.1, sigma=0.4, rho=1e-18,
                                    T=2.0, T_bar=2.5)
            apy_closed_form(2.0, 3.0, 0.5, 2.0, env)


class TestInfiniteHorizon:
    ENV2 = MarketEnvironment(r=0.03, mu=0.1, sigma=0.4, rho=0.1, T=2.0, T_bar=2.5)

    def test_matches_apy_closed_form(self):
        cf = apy_closed_form(2.0, 3.0, 0.5, 2.0, self.ENV2)
        ys = np.geomspace(0.02, 20.0, 20)
        vals = infinite_horizon_hatV(ys, self.ENV2, APY, tol=1e-8)
        ref = cf.value(ys)
        assert np.max(np.abs(vals - ref) / (1.0 + np.abs(ref))) <= 1e-4

    def test_large_rho_limit(self):
        env = MarketEnvironment(r=0.03, mu=0.1, sigma=0.4, rho=10.0, T=2.0, T_bar=2.5)
        for y in (0.2, 1.0, 3.0):
            val = infinite_horizon_hatV(y, env, SPEC)
            target = dual_h(y, SPEC) / 10.0
            assert abs(val - target) <= 0.05 * target

    def test_linearity_in_h(self):
        env = MarketEnvironment(r=0.03, mu=0.1, sigma=0.4, rho=0.3, T=2.0, T_bar=2.5)
        terms = dual_power_terms(SPEC)
        doubled = DualTerms(
            global_terms=tuple((2 * c, p) for c, p in terms.global_terms),
            below_terms=tuple((2 * c, p) for c, p in terms.below_terms),
            kink=terms.kink)
        v1 = infinite_horizon_hatV(1.3, env, SPEC)
        v2 = infinite_horizon_hatV(1.3, env, doubled)
        assert v2 == pytest.approx(2 * v1, rel=1e-9)

    def test_powerpair_quadrature_vs_pasted_closed_form(self):
        env = MarketEnvironment(r=0.03, mu=0.1, sigma=0.4, rho=0.3, T=2.0, T_bar=2.5)
        sol = stationary_dual_value(SPEC, env)
        ys = np.geomspace(0.05, 8.0, 15)
        vals = infinite_horizon_hatV(ys, env, SPEC, tol=1e-9)
        ref = sol.value(ys)
        assert np.max(np.abs(vals - ref) / (1.0 + np.abs(ref))) <= 1e-6

    def test_violated_growth_raises(self):
        with pytest.raises(ValueError, match="finiteness"):
            infinite_horizon_hatV(1.0, self.ENV2, SPEC)  # rho=0.1 < 0.11625


class TestPension:
    def test_zero_pension(self):
        assert pension_adjusted_wealth(7.0, 1.0, 0.0, ENV) == 7.0

    def test_constant_annuity_closed_form(self):
        tau, p, r = 1.0, 2.0, 0.03
        expect = 7.0 + p * (1 - np.exp(-r * (2.5 - tau))) / r
        assert pension_adjusted_wealth(7.0, tau, p, ENV) == pytest.approx(expect, rel=1e-12)

    def test_retirement_at_terminal(self):
        assert pension_adjusted_wealth(7.0, 2.5, 5.0, ENV) == pytest.approx(7.0)
