"""Tests for the parameter-regime classifier."""

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fracsde import regimes as rg
from fracsde.errors import DomainError, RegimeRefusal

INF = math.inf


def params(H, d, p, q):
    return rg.RegimeParams(H=H, d=d, p=p, q=q)


def rows_by_key(pp):
    return {row.key: row for row in rg.comparison_rows(pp)}


# strategies shared by the property tests
_extended = st.floats(min_value=1.0, max_value=1e6, allow_nan=False) | st.just(INF)
_params_st = st.builds(
    params,
    H=st.floats(min_value=0.01, max_value=0.99),
    d=st.integers(min_value=1, max_value=5),
    p=_extended,
    q=_extended,
)


class TestParams:
    @pytest.mark.parametrize("H", [0.0, 1.0, -0.1, 1.2, math.nan, INF])
    def test_rejects_bad_hurst(self, H):
        with pytest.raises(DomainError):
            params(H, 1, 2, 2)

    @pytest.mark.parametrize("d", [0, -1, 1.5])
    def test_rejects_bad_dimension(self, d):
        with pytest.raises(DomainError):
            params(0.3, d, 2, 2)

    @pytest.mark.parametrize("bad", [0.5, 0.999, -3.0, math.nan])
    def test_rejects_out_of_range_exponents(self, bad):
        with pytest.raises(DomainError):
            params(0.3, 1, bad, 2)
        with pytest.raises(DomainError):
            params(0.3, 1, 2, bad)

    def test_inf_spelled_as_string(self):
        pp = params(0.3, 1, "inf", "Infinity")
        assert pp.p == INF and pp.q == INF

    def test_float_dimension_coerced_when_integral(self):
        assert params(0.3, 3.0, 2, 2).d == 3


class TestConditions:
    @pytest.mark.parametrize(
        "H,d,p,q,expect",
        [
            (0.25, 1, 2, INF, True),  # 0 + 0.125 < 0.75
            (0.4, 3, 2, 5, False),  # 0.2 + 0.6 >= 0.6
        ],
    )
    def test_h1_hand_values(self, H, d, p, q, expect):
        assert rg.check_h1(params(H, d, p, q)).holds is expect

    def test_h1_boundary_is_false_with_zero_residual(self):
        verdict = rg.check_h1(params(0.5, 1, INF, 2))
        assert not verdict.holds
        assert verdict.residual == 0.0

    @pytest.mark.parametrize(
        "H,p,q,expect",
        [
            (0.3, 2, 4, True),  # H*q = 1.2
            (0.3, 2, 3, False),  # H*q = 0.9
            (0.3, 1.5, 50, False),  # p < 2
            (0.25, 2, 4, True),  # H*q = 1 exactly, non-strict
            (0.3, 2.0, INF, True),  # p = 2 exactly, non-strict
        ],
    )
    def test_h2_hand_values(self, H, p, q, expect):
        assert rg.check_h2(params(H, 1, p, q)).holds is expect

    @pytest.mark.parametrize("p,q", [(2, 4), (10, INF), (3, 7)])
    def test_h2_false_at_half(self, p, q):
        assert not rg.check_h2(params(0.5, 1, p, q)).holds

    @pytest.mark.parametrize(
        "H,d,p,q,expect",
        [
            (0.25, 1, 2, INF, True),
            (0.4, 3, 2, 5, False),  # 0.12 + 0.6 >= 0.6
        ],
    )
    def test_weak14_hand_values(self, H, d, p, q, expect):
        assert rg.check_weak14(params(H, d, p, q)).holds is expect

    @given(
        H=st.floats(min_value=0.01, max_value=0.99),
        d=st.integers(min_value=1, max_value=5),
        p=_extended,
    )
    def test_weak14_with_infinite_q_reduces_to_spatial_condition(self, H, d, p):
        pp = params(H, d, p, INF)
        assert rg.check_weak14(pp).holds == ((H * d) / p < 1.0 - H)

    @given(pp=_params_st)
    def test_strong_gate_implies_weak_existence(self, pp):
        if rg.check_h1(pp).holds and rg.check_h2(pp).holds:
            assert rg.check_weak14(pp).holds

    @given(pp=_params_st)
    def test_kappa_positive_iff_h1(self, pp):
        assert (rg.kappa(pp) > 0) == rg.check_h1(pp).holds

    def test_verdicts_are_truthy_objects(self):
        good = rg.check_h1(params(0.25, 1, 2, INF))
        bad = rg.check_h1(params(0.4, 3, 2, 5))
        assert good and not bad
        assert "1/q + H*d/p" in bad.rendered and ">=" in bad.rendered


class TestReduction:
    def test_randomized_sweep_all_agree(self):
        n = 10_000
        assert rg.verify_reduction(n_draws=n, seed=1) == n

    @given(p=_extended, q=_extended, d=st.integers(min_value=1, max_value=10))
    def test_equivalence_is_exact_in_floating_point(self, p, q, d):
        # both sides differ only by a power-of-two scaling, so the
        # equivalence is exact even on adversarial floats
        reduced, brownian = rg.reduction_at_half(p, q, d)
        assert reduced == brownian


class TestComparisonRows:
    def test_all_nine_rows_present_in_order(self):
        rows = rg.comparison_rows(params(0.3, 1, 4, 4))
        assert tuple(r.key for r in rows) == rg.ROW_KEYS + ("fracsde",)

    def test_brownian_row_applies_only_at_half(self):
        at_half = rows_by_key(params(0.5, 2, 6, 6))["krylov_rockner"]
        assert at_half.strong is True and at_half.weak is None
        off_half = rows_by_key(params(0.3, 2, 6, 6))["krylov_rockner"]
        assert off_half.strong is False
        assert "H = 1/2" in off_half.strong_rendered

    def test_brownian_row_needs_p_and_q_at_least_two(self):
        row = rows_by_key(params(0.5, 2, 6, 1.5))["krylov_rockner"]
        assert row.strong is False

    def test_time_independent_rows_need_infinite_q(self):
        by = rows_by_key(params(0.3, 1, 2, 8))
        for key in ("anzeletti", "butkovsky_timeindep", "catellier_gubinelli"):
            assert by[key].weak is False
            assert "q = inf" in (by[key].weak_rendered)

    def test_anzeletti_weak_strong_gap(self):
        weak_only = rows_by_key(params(0.3, 1, 1, INF))["anzeletti"]
        assert weak_only.weak is True and weak_only.strong is False
        both = rows_by_key(params(0.3, 1, 2, INF))["anzeletti"]
        assert both.weak is True and both.strong is True

    def test_weak_existence_row_matches_weak14(self):
        for tup in [(0.25, 1, 2, INF), (0.4, 3, 2, 5), (0.7, 2, 30, 9)]:
            pp = params(*tup)
            row = rows_by_key(pp)["butkovsky_gallay"]
            assert row.weak == rg.check_weak14(pp).holds
            assert row.strong is None

    def test_mixed_norm_row_third_condition_binds_under_guard(self):
        # guard active (p < 1/(1-H), q > 2): the extra inequality can reject
        binding = rows_by_key(params(0.45, 1, 1.7, 4))["butkovsky_mixed"]
        assert binding.strong is False
        loose = rows_by_key(params(0.45, 1, 1.7, 10))["butkovsky_mixed"]
        assert loose.strong is True
        # guard inactive (p >= 1/(1-H)): only the first two conditions bind
        no_guard = rows_by_key(params(0.45, 1, 2.0, 4))["butkovsky_mixed"]
        assert no_guard.strong is True

    def test_mixed_norm_row_weak_equals_strong(self):
        for tup in [(0.45, 1, 1.7, 4), (0.3, 2, 5, 8), (0.2, 1, 1.1, 3)]:
            row = rows_by_key(params(*tup))["butkovsky_mixed"]
            assert row.weak == row.strong

    def test_time_independent_weak_row_allows_smooth_noise(self):
        row = rows_by_key(params(0.6, 1, 4, INF))["butkovsky_timeindep"]
        assert row.weak is True  # 0.15 < 0.4, any H in (0,1)

    def test_pathwise_row_requires_rough_noise(self):
        ok = rows_by_key(params(0.3, 1, 2, INF))["catellier_gubinelli"]
        assert ok.weak is True  # 0.15 < 1/0.6 - 1
        smooth = rows_by_key(params(0.6, 1, 50, INF))["catellier_gubinelli"]
        assert smooth.weak is False

    def test_two_condition_weak_row(self):
        tight = rows_by_key(params(0.45, 3, 4, INF))["galeati_gerencser"]
        assert tight.weak is False  # d/p = 0.75 >= 1/(2H) - 1/2
        ok = rows_by_key(params(0.45, 3, 6, INF))["galeati_gerencser"]
        assert ok.weak is True

    def test_capped_q_strong_row(self):
        slow = rows_by_key(params(0.3, 1, 10, 1))["galeati_gerencser"]
        assert slow.strong is False  # 1/min(1,2) = 1 dominates
        fast = rows_by_key(params(0.3, 1, 10, 4))["galeati_gerencser"]
        assert fast.strong is True  # 1/2 + 0.03 < 0.7
        assert "H in (0, 1)" in fast.note

    def test_half_threshold_rows(self):
        by = rows_by_key(params(0.3, 1, 10, 10))
        assert by["le"].strong is True  # 0.13 < 0.2
        near = rows_by_key(params(0.3, 1, 5, 5))["le"]
        assert near.strong is False and near.weak is True  # 0.26 in [0.2, 0.5)

    def test_own_gate_extends_the_half_threshold_row(self):
        # a point where the 1/2 - H threshold rejects but h1 & h2 accept
        by = rows_by_key(params(0.3, 1, 6, 6))
        assert by["le"].strong is False  # 1/6 + 0.05 >= 0.2
        assert by["fracsde"].strong is True  # 0.2167 < 0.7 and H*q = 1.8

    @given(pp=_params_st)
    def test_own_row_equals_gate_conjunction(self, pp):
        own = rows_by_key(pp)["fracsde"]
        expect = rg.check_h1(pp).holds and rg.check_h2(pp).holds
        assert own.weak == expect and own.strong == expect


class TestHolderExponents:
    def test_time_bound_at_infinite_exponents(self):
        assert rg.holder_exponents(params(0.3, 1, INF, INF)) == (0.3, 1.0)

    def test_finite_q_caps_the_time_bound(self):
        time_bound, space_bound = rg.holder_exponents(params(0.3, 1, INF, 2))
        assert time_bound == pytest.approx(0.25)
        assert space_bound == 1.0

    def test_not_applicable_outside_h1(self):
        assert rg.holder_exponents(params(0.45, 3, 2, 2)) == (None, None)


class TestClassify:
    def test_report_fields(self):
        rep = rg.classify(params(0.25, 1, 2, INF))
        assert rep.h1 and rep.h2 and rep.weak14
        assert rep.kappa == pytest.approx(0.625)
        assert rep.holder_time_bound == pytest.approx(0.25)
        assert rep.reduction_consistent
        assert len(rep.comparison) == 9

    def test_render_parse_round_trip(self):
        for tup in [(0.3, 1, 10, 10), (0.25, 1, 2, INF), (0.5, 2, 6, 6)]:
            rep = rg.classify(params(*tup))
            assert rg.parse_report(rg.render_report(rep)) == rep

    def test_json_has_stable_shape(self):
        data = rg.report_to_dict(rg.classify(params(0.25, 1, 2, INF)))
        assert data["params"]["q"] == "inf"
        assert [row["key"] for row in data["comparison"]][:2] == [
            "krylov_rockner",
            "anzeletti",
        ]


class TestRefusal:
    def test_admissible_params_pass_silently(self):
        assert rg.require_strong_regime(params(0.3, 1, 4, 4)) is None

    def test_integrability_violation_names_the_inequality(self):
        with pytest.raises(RegimeRefusal) as err:
            rg.require_strong_regime(params(0.45, 3, 2, 2))
        assert err.value.violated == "1/q + H*d/p < 1 - H"

    @pytest.mark.parametrize(
        "H,p,q,clause",
        [
            (0.3, 2, 3, "H*q >= 1"),
            (0.3, 1.5, 50, "p >= 2"),
        ],
    )
    def test_moment_violation_names_the_clause(self, H, p, q, clause):
        with pytest.raises(RegimeRefusal) as err:
            rg.require_strong_regime(params(H, 1, p, q))
        assert err.value.violated == clause


class TestRegionSample:
    def _load(self, text):
        return np.genfromtxt(io.StringIO(text), delimiter=",", names=True)

    def test_header_and_shape(self):
        text = rg.region_sample(0.3, 1, (1, 10), (1, 10), resolution=11)
        lines = text.strip().split("\n")
        assert lines[0] == (
            "p,q,h1,h2,weak14,row_1,row_2,row_3,row_4,row_5,row_6,row_7,row_8"
        )
        assert len(lines) == 1 + 11 * 11

    def test_h1_region_monotone_in_p(self):
        table = self._load(rg.region_sample(0.3, 2, (1, 12), (1, 12), resolution=13))
        for q in np.unique(table["q"]):
            flags = table["h1"][table["q"] == q]
            assert np.all(np.diff(flags) >= 0)  # once true, stays true

    def test_moment_region_empty_for_smooth_noise(self):
        table = self._load(rg.region_sample(0.55, 1, (1, 12), (1, 12), resolution=9))
        assert not table["h2"].any()

    def test_h1_strictly_contains_half_threshold_strong_region(self):
        table = self._load(rg.region_sample(0.3, 1, (1, 20), (1, 20), resolution=21))
        h1 = table["h1"].astype(bool)
        # row_8 covers its weak region too, so test via classify directly
        le_strong = np.array(
            [
                rows_by_key(params(0.3, 1, float(p), float(q)))["le"].strong
                for p, q in zip(table["p"], table["q"])
            ]
        )
        assert np.all(h1[le_strong])
        assert np.any(h1 & ~le_strong)

    def test_rejects_degenerate_window(self):
        with pytest.raises(DomainError):
            rg.region_sample(0.3, 1, (5, 5), (1, 10), resolution=11)
        with pytest.raises(DomainError):
            rg.region_sample(0.3, 1, (1, 10), (1, 10), resolution=1)
