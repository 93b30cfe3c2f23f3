import json
import math
from importlib import resources

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from difftest.errors import ConfigError, OptimizerInconsistency
from difftest.hypotest import (CLAMP_TOL, _assemble, case_number, chi2_cdf, chi2_quantile, chi2_sf,
                               noncentral_chi2_cdf, stage1_statistics, stage2_statistics,
                               two_step_decision)
from difftest.estimate import fit_alpha
from difftest.model import Hypothesis, ParameterSpace, Theta
from difftest.simulate import SimConfig, euler_maruyama, ou_exact

from oracles import ou_alpha_hat, ou_stage1, ou_stage2

NULL = Hypothesis([(0, 1.0)], [(0, 2.0)])


class TestChiSquared:
    def test_quantile_one_df(self):
        assert chi2_quantile(0.95, 1) == pytest.approx(3.8415, abs=1e-3)

    def test_quantile_two_df(self):
        assert chi2_quantile(0.95, 2) == pytest.approx(-2 * math.log(0.05), abs=1e-12)

    def test_quantile_inverts_cdf(self):
        for df in (1, 2, 3, 7):
            for q in (0.01, 0.5, 0.95, 0.999):
                assert chi2_cdf(chi2_quantile(q, df), df) == pytest.approx(q, abs=1e-12)

    def test_quantile_domain(self):
        with pytest.raises(ValueError):
            chi2_quantile(1.0, 1)

    def test_cdf_plus_sf(self):
        x = np.linspace(0, 20, 41)
        np.testing.assert_allclose(chi2_cdf(x, 3) + chi2_sf(x, 3), 1.0, atol=1e-15)

    def test_negative_argument_is_zero(self):
        assert chi2_cdf(-1.0, 1) == 0.0

    @pytest.mark.parametrize("df,c", [(1, 0.5), (1, 4.0), (1, 50.0), (2, 10.0), (3, 200.0)])
    def test_noncentral_matches_library(self, df, c):
        x = np.linspace(0, c + 10 * math.sqrt(2 * (df + 2 * c)), 60)
        np.testing.assert_allclose(noncentral_chi2_cdf(x, df, c), stats.ncx2.cdf(x, df, c), atol=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(x=st.floats(0, 100), df=st.integers(1, 5))
    def test_zero_noncentrality_reduces(self, x, df):
        assert noncentral_chi2_cdf(x, df, 0.0) == chi2_cdf(x, df)

    def test_noncentral_rejects_negative(self):
        with pytest.raises(ValueError):
            noncentral_chi2_cdf(1.0, 1, -0.1)

    @settings(max_examples=60, deadline=None)
    @given(a=st.floats(0, 60), b=st.floats(0, 60), df=st.integers(1, 4))
    def test_p_values_monotone(self, a, b, df):
        if a < b and chi2_sf(b, df) > 0:
            assert chi2_sf(a, df) >= chi2_sf(b, df)
        if a + 1e-3 < b < 30:
            assert chi2_sf(a, df) > chi2_sf(b, df)


class TestCases:
    @pytest.mark.parametrize("r1,r2,case", [(False, False, 1), (False, True, 2),
                                            (True, False, 3), (True, True, 4)])
    def test_mapping(self, r1, r2, case):
        assert case_number(r1, r2) == case


class TestClamp:
    def test_small_negative_clamped(self):
        res = _assemble("alpha", -1e-10, -5e-10, 0.0, 1, 0.05, False)
        assert (res.lambda_, res.wald, res.rao) == (0.0, 0.0, 0.0)
        assert res.lambda_raw == -1e-10
        assert res.p_lambda == 1.0

    def test_large_negative_raises(self):
        with pytest.raises(OptimizerInconsistency):
            _assemble("beta", -10 * CLAMP_TOL, 0.0, 0.0, 1, 0.05, False)

    def test_rejection_threshold(self):
        crit = chi2_quantile(0.95, 1)
        assert _assemble("alpha", crit * 1.001, 0, 0, 1, 0.05, False).reject_lambda
        assert not _assemble("alpha", crit * 0.999, 0, 0, 1, 0.05, False).reject_lambda


class TestOUStatistics:
    @pytest.mark.parametrize("seed", range(8))
    def test_stage_values_match_closed_form(self, ou, ou_space, seed):
        path = ou_exact(Theta([1.0], [2.0]), SimConfig(n=5000, seed=seed))
        report = two_step_decision(path, ou, ou_space, NULL)
        states = path.states[:, 0]
        expected1 = ou_stage1(states, path.h, 1.0)
        expected2 = ou_stage2(states, path.h, 2.0)
        got1 = (report.stage1.lambda_, report.stage1.wald, report.stage1.rao)
        got2 = (report.stage2.lambda_, report.stage2.wald, report.stage2.rao)
        np.testing.assert_allclose(got1, expected1, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(got2, expected2, rtol=1e-6, atol=1e-9)

    def test_stage_functions_agree_with_two_step(self, ou, ou_space):
        path = ou_exact(Theta([1.05], [2.3]), SimConfig(n=3000, seed=31))
        report = two_step_decision(path, ou, ou_space, NULL)
        s1 = stage1_statistics(path, ou, ou_space, NULL)
        s2 = stage2_statistics(path, ou, ou_space, NULL, report.alpha_hat)
        assert s1 == report.stage1
        assert s2 == report.stage2

    def test_stage2_uses_unconstrained_alpha(self, ou, ou_space):
        path = ou_exact(Theta([1.5], [2.0]), SimConfig(n=3000, seed=5))
        report = two_step_decision(path, ou, ou_space, NULL)
        a_hat = ou_alpha_hat(path.states[:, 0], path.h)
        assert report.alpha_hat[0] == pytest.approx(a_hat, abs=1e-9)
        assert report.stage2.wald == pytest.approx(ou_stage2(path.states[:, 0], path.h, 2.0)[1], rel=1e-6)

    def test_case_consistent_with_flags(self, ou, ou_space):
        for seed in range(10):
            path = ou_exact(Theta([1.03], [2.5]), SimConfig(n=2000, seed=seed))
            report = two_step_decision(path, ou, ou_space, NULL)
            for kind in ("lambda", "wald", "rao"):
                assert report.case_by_statistic[kind] == case_number(
                    report.stage1.rejects(kind), report.stage2.rejects(kind))


class TestCoincidence:
    """Hook: pin the hypothesis at the fitted value so constrained == unconstrained."""

    @pytest.mark.parametrize("seed", range(6))
    def test_ou(self, ou, ou_space, seed):
        path = ou_exact(Theta([1.0], [2.0]), SimConfig(n=3000, seed=seed))
        a_hat = fit_alpha(path, ou, ou_space).theta_hat[0]
        s1 = stage1_statistics(path, ou, ou_space, Hypothesis([(0, a_hat)]))
        assert s1.lambda_ == 0.0 and s1.wald == 0.0
        assert s1.rao <= 1e-12
        report = two_step_decision(path, ou, ou_space, Hypothesis([(0, a_hat)], [(0, 2.0)]))
        b_hat = report.beta_hat[0]
        s2 = stage2_statistics(path, ou, ou_space, Hypothesis([], [(0, b_hat)]), report.alpha_hat)
        assert s2.lambda_ == 0.0 and s2.wald == 0.0
        assert s2.rao <= 1e-12

    def test_no_negative_zero(self):
        res = _assemble("alpha", -0.0, -0.0, -0.0, 1, 0.05, False)
        assert math.copysign(1.0, res.lambda_) == 1.0

    def test_model2_both_stages(self, model2):
        space = ParameterSpace.uniform(3, 2)
        path = euler_maruyama(model2, Theta([1.0, 1.0, 0.5], [2.0, 2.0]), SimConfig(n=2000, seed=4))
        base = two_step_decision(path, model2, space,
                                 Hypothesis([(0, 1.0), (1, 1.0)], [(0, 2.0), (1, 2.0)]))
        hook = Hypothesis([(0, base.alpha_hat[0]), (1, base.alpha_hat[1])],
                          [(0, base.beta_hat[0]), (1, base.beta_hat[1])])
        report = two_step_decision(path, model2, space, hook)
        for stage in (report.stage1, report.stage2):
            assert stage.lambda_ == 0.0 and stage.wald == 0.0
            assert stage.rao <= 1e-12
        assert set(report.case_by_statistic.values()) == {1}


class TestValidation:
    def test_level_range(self, ou, ou_space):
        path = ou_exact(Theta([1.0], [2.0]), SimConfig(n=100, seed=1))
        for level in (0.0, 1.0, -0.1):
            with pytest.raises(ConfigError):
                two_step_decision(path, ou, ou_space, NULL, level=level)

    def test_stage_needs_pinned_component(self, ou, ou_space):
        path = ou_exact(Theta([1.0], [2.0]), SimConfig(n=100, seed=1))
        with pytest.raises(ConfigError):
            two_step_decision(path, ou, ou_space, Hypothesis([], [(0, 2.0)]))
        with pytest.raises(ConfigError):
            two_step_decision(path, ou, ou_space, Hypothesis([(0, 1.0)]))

    def test_separate_stage2_hypothesis(self, ou, ou_space):
        path = ou_exact(Theta([1.0], [2.0]), SimConfig(n=500, seed=1))
        joint = two_step_decision(path, ou, ou_space, NULL)
        split = two_step_decision(path, ou, ou_space, Hypothesis([(0, 1.0)]),
                                  hyp_beta=Hypothesis([], [(0, 2.0)]))
        assert joint.stage2 == split.stage2


def test_report_matches_schema(ou, ou_space):
    schema = json.loads(resources.files("difftest").joinpath("schemas/test_report.schema.json").read_text())
    path = ou_exact(Theta([1.0], [2.0]), SimConfig(n=1000, seed=3))
    report = two_step_decision(path, ou, ou_space, NULL)
    document = json.loads(json.dumps(report.to_dict()))
    jsonschema.validate(document, schema)
    assert document["stage1"]["df"] == 1
    assert 0.0 <= document["stage1"]["p_lambda"] <= 1.0
