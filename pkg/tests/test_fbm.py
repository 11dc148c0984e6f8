"""Tests for the fBm kernel, covariance, and the three path generators."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from fracsde import fbm
from fracsde.errors import DomainError, UnsupportedRegimeError


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("H", [0.1, 0.25, 0.4, 0.5])
def test_covariance_unit_time_variance(H):
    assert fbm.covariance(1.0, 1.0, H) == pytest.approx(1.0)


def test_covariance_brownian_is_min():
    assert fbm.covariance(2.0, 3.0, 0.5) == pytest.approx(2.0)
    assert fbm.covariance(3.0, 2.0, 0.5) == pytest.approx(2.0)


def test_covariance_hand_value():
    # 0.5 * (1 + 2^0.5 - 1) at H = 1/4
    assert fbm.covariance(1.0, 2.0, 0.25) == pytest.approx(0.70710678, abs=1e-8)


def test_covariance_rejects_negative_times():
    with pytest.raises(DomainError):
        fbm.covariance(-1.0, 1.0, 0.3)
    with pytest.raises(DomainError):
        fbm.covariance(1.0, -0.5, 0.3)


@given(
    t=st.floats(min_value=0.0, max_value=10.0),
    s=st.floats(min_value=0.0, max_value=10.0),
    H=st.floats(min_value=0.05, max_value=0.5),
)
@settings(max_examples=200, deadline=None)
def test_covariance_symmetric_and_cauchy_schwarz(t, s, H):
    r_ts = fbm.covariance(t, s, H)
    assert r_ts == pytest.approx(fbm.covariance(s, t, H), rel=1e-12, abs=1e-12)
    bound = np.sqrt(fbm.covariance(t, t, H) * fbm.covariance(s, s, H))
    assert r_ts <= bound + 1e-12


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("H", [0.1, 0.45])
@pytest.mark.parametrize("t", [0.5, 2.0])
def test_kernel_normalization(H, t):
    # independent adaptive-quadrature oracle over the quad-route kernel;
    # this identity is what pins the kernel constant
    val, _ = integrate.quad(lambda s: fbm.kernel_K(t, s, H) ** 2, 0.0, t, limit=400)
    assert val == pytest.approx(t ** (2 * H), rel=1e-4)


def test_kernel_support_convention():
    assert fbm.kernel_K(1.0, 1.0, 0.3) == 0.0
    assert fbm.kernel_K(1.0, 1.5, 0.3) == 0.0


def test_kernel_domain_and_regime_errors():
    with pytest.raises(DomainError):
        fbm.kernel_K(1.0, 0.0, 0.3)
    with pytest.raises(DomainError):
        fbm.kernel_K(1.0, -0.1, 0.3)
    with pytest.raises(UnsupportedRegimeError):
        fbm.kernel_K(1.0, 0.5, 0.7)


def test_kernel_approaches_one_near_brownian():
    # second term vanishes and the first term tends to 1 as H -> 1/2
    vals = [
        fbm.kernel_K(1.0, 0.5, H) / fbm.normalization_constant(H)
        for H in (0.4, 0.45, 0.49, 0.499)
    ]
    errors = [abs(v - 1.0) for v in vals]
    assert errors == sorted(errors, reverse=True)
    assert errors[-1] < 5e-3


def test_kernel_divergence_rate_near_diagonal():
    # K(1, s, 0.3) * (1-s)^0.2 approaches a finite positive limit as s -> 1
    probe = [fbm.kernel_K(1.0, s, 0.3) * (1.0 - s) ** 0.2 for s in (0.99, 0.999, 0.9999)]
    assert all(v > 0 for v in probe)
    assert probe[1] == pytest.approx(probe[2], rel=2e-3)
    assert probe[0] == pytest.approx(probe[2], rel=2e-2)


@given(
    s_frac=st.floats(min_value=1e-4, max_value=0.9999),
    t=st.floats(min_value=0.1, max_value=3.0),
    H=st.sampled_from([0.1, 0.2, 0.3, 0.4, 0.45]),
)
@settings(max_examples=50, deadline=None)
def test_kernel_batch_matches_quad_route(s_frac, t, H):
    s = s_frac * t
    a = fbm.kernel_K(t, s, H)
    b = float(fbm.kernel_K_batch(t, s, H))
    assert a == pytest.approx(b, rel=1e-7, abs=1e-10)


def test_kernel_batch_masks_causal_support():
    t = np.array([1.0, 1.0, 2.0])
    s = np.array([0.5, 1.5, 2.0])
    out = fbm.kernel_K_batch(t, s, 0.3)
    assert out[0] > 0 and out[1] == 0.0 and out[2] == 0.0


def test_normalization_constant_brownian_case():
    assert fbm.normalization_constant(0.5) == 1.0


# ---------------------------------------------------------------------------
# conditional variance / local nondeterminism
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("H", [0.1, 0.3])
@pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
def test_conditional_variance_from_zero_is_full_variance(H, t):
    assert fbm.conditional_variance(t, 0.0, H) == pytest.approx(t ** (2 * H), rel=1e-6)


def test_conditional_variance_brownian():
    assert fbm.conditional_variance(1.0, 0.25, 0.5) == pytest.approx(0.75)


def test_conditional_variance_domain():
    with pytest.raises(DomainError):
        fbm.conditional_variance(0.5, 0.5, 0.3)
    with pytest.raises(DomainError):
        fbm.conditional_variance(0.5, 0.7, 0.3)


def test_conditional_variance_ratio_two_sided():
    # ratio to (t-s)^(2H) stays in (0, 1] and is bounded away from zero
    H = 0.3
    ratios = []
    ss = np.linspace(0.05, 0.95, 20)
    for s in ss:
        for t in np.linspace(s + 0.02, 1.0, 20):
            ratios.append(fbm.conditional_variance(t, s, H) / (t - s) ** (2 * H))
    ratios = np.array(ratios)
    assert np.all(ratios <= 1.0 + 1e-9)
    assert ratios.min() > 0.5


def test_local_nondeterminism_fitted_exponent():
    # the two-sided comparison is governed by gap^(2H); report-and-check
    for H in (0.2, 0.35):
        fitted = fbm.local_nondeterminism_exponent(H)
        assert fitted == pytest.approx(2 * H, abs=0.02)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def test_cholesky_variance_within_mc_band():
    grid = fbm.HurstGrid(0.3, 1.0, 32)
    ens = fbm.sample_cholesky(grid, 1, 50_000, seed=101)
    b1 = ens.B[:, -1, 0]
    sq = b1 ** 2
    se = sq.std(ddof=1) / np.sqrt(len(sq))
    assert abs(sq.mean() - 1.0) < 4 * se
    assert ens.dW is None


def test_cholesky_brownian_increment_independence():
    grid = fbm.HurstGrid(0.5, 1.0, 64)
    ens = fbm.sample_cholesky(grid, 1, 20_000, seed=55)
    inc = np.diff(ens.B[:, :, 0], axis=1)
    lag1 = inc[:, :-1] * inc[:, 1:]
    se = lag1.std(ddof=1) / np.sqrt(lag1.size)
    assert abs(lag1.mean()) < 4 * se


def test_cholesky_seed_determinism():
    grid = fbm.HurstGrid(0.2, 1.0, 16)
    a = fbm.sample_cholesky(grid, 2, 64, seed=9)
    b = fbm.sample_cholesky(grid, 2, 64, seed=9)
    assert np.array_equal(a.B, b.B)


def test_volterra_starts_at_zero_and_stores_dw():
    grid = fbm.HurstGrid(0.3, 1.0, 32)
    ens = fbm.sample_volterra(grid, 2, 100, seed=3)
    assert np.all(ens.B[:, 0, :] == 0.0)
    assert ens.dW is not None and ens.dW.shape == (100, 32, 2)


def test_volterra_is_linear_in_dw():
    grid = fbm.HurstGrid(0.3, 1.0, 32)
    ens = fbm.sample_volterra(grid, 1, 10, seed=3)
    K = fbm.volterra_weights(0.3, 1.0, 32)
    rebuilt = ens.dW[:, :, 0] @ K.T
    assert np.allclose(rebuilt, ens.B[:, 1:, 0], rtol=0, atol=1e-14)


def test_volterra_brownian_reduces_to_cumsum():
    grid = fbm.HurstGrid(0.5, 1.0, 32)
    ens = fbm.sample_volterra(grid, 1, 50, seed=11)
    assert np.allclose(ens.B[:, 1:, :], np.cumsum(ens.dW, axis=1), atol=1e-12)


def test_volterra_covariance_mc():
    grid = fbm.HurstGrid(0.3, 1.0, 64)
    ens = fbm.sample_volterra(grid, 1, 20_000, seed=77)
    bh, b1 = ens.B[:, 32, 0], ens.B[:, 64, 0]
    prod = bh * b1
    se = prod.std(ddof=1) / np.sqrt(len(prod))
    exact = fbm.covariance(1.0, 0.5, 0.3)
    tol = max(4 * se, 0.02 * exact)
    assert abs(prod.mean() - exact) < tol


def test_fgn_increment_variance():
    grid = fbm.HurstGrid(0.3, 1.0, 128)
    ens = fbm.sample_fgn_circulant(grid, 1, 5_000, seed=21)
    inc = np.diff(ens.B[:, :, 0], axis=1)
    sq = inc ** 2
    se = sq.std(ddof=1) / np.sqrt(sq.size)
    # increments are correlated across a path, so widen the naive band
    assert abs(sq.mean() - grid.dt ** 0.6) < 8 * se


def test_fgn_distribution_matches_cholesky():
    grid = fbm.HurstGrid(0.3, 1.0, 64)
    a = fbm.sample_fgn_circulant(grid, 1, 10_000, seed=31)
    b = fbm.sample_cholesky(grid, 1, 10_000, seed=32)
    ks = stats.ks_2samp(a.B[:, -1, 0], b.B[:, -1, 0])
    assert ks.pvalue > 0.01


def test_fgn_seed_determinism():
    grid = fbm.HurstGrid(0.1, 2.0, 32)
    a = fbm.sample_fgn_circulant(grid, 3, 40, seed=8)
    b = fbm.sample_fgn_circulant(grid, 3, 40, seed=8)
    assert np.array_equal(a.B, b.B)


def test_generators_dispatch_and_reject_unknown_tag():
    grid = fbm.HurstGrid(0.3, 1.0, 8)
    ens = fbm.sample(grid, 1, 4, 1, "fgn_circulant")
    assert ens.generator_tag == "fgn_circulant"
    with pytest.raises(DomainError):
        fbm.sample(grid, 1, 4, 1, "spectral")


# ---------------------------------------------------------------------------
# grid validation
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("bad", [{"H": 0.0}, {"H": 0.6}, {"T": 0.0}, {"n_steps": 0}])
def test_grid_validation(bad):
    kwargs = {"H": 0.3, "T": 1.0, "n_steps": 16}
    kwargs.update(bad)
    with pytest.raises(DomainError):
        fbm.HurstGrid(**kwargs)


def test_grid_times():
    grid = fbm.HurstGrid(0.3, 2.0, 4)
    assert grid.times[0] == 0.0
    assert grid.times[-1] == 2.0
    assert np.all(np.diff(grid.times) > 0)
    assert grid.dt == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def test_cache_roundtrip_bit_identical(tmp_path):
    grid = fbm.HurstGrid(0.3, 1.0, 16)
    ens = fbm.sample_volterra(grid, 2, 7, seed=42)
    path = tmp_path / "paths.fbm"
    fbm.save_ensemble(ens, path)
    back = fbm.load_ensemble(path)
    assert np.array_equal(back.B, ens.B)
    assert np.array_equal(back.dW, ens.dW)
    assert back.grid == ens.grid
    assert back.seed == 42 and back.generator_tag == "volterra"


def test_cache_roundtrip_without_dw():
    grid = fbm.HurstGrid(0.2, 1.0, 8)
    ens = fbm.sample_cholesky(grid, 1, 3, seed=1)
    buf = io.BytesIO()
    fbm.save_ensemble(ens, buf)
    buf.seek(0)
    back = fbm.load_ensemble(buf)
    assert back.dW is None
    assert np.array_equal(back.B, ens.B)


def test_cache_rejects_bad_magic():
    buf = io.BytesIO(b"NOPE" + b"\x00" * 64)
    with pytest.raises(DomainError):
        fbm.load_ensemble(buf)


def test_csv_export(tmp_path):
    grid = fbm.HurstGrid(0.3, 1.0, 4)
    ens = fbm.sample_volterra(grid, 2, 3, seed=2)
    path = tmp_path / "paths.csv"
    fbm.ensemble_to_csv(ens, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "path_id,t,B_1,B_2"
    assert len(lines) == 1 + 3 * 5
    first = lines[1].split(",")
    assert first[0] == "0" and float(first[1]) == 0.0 and float(first[2]) == 0.0
