import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from inverse_ecg.evalkit import (MetricReport, TrialSummary, evaluate_metrics,
                                 regularized_incomplete_beta, t_two_sided_p, welch_t_test)


def t_tail_by_quadrature(t, nu):
    """Two-sided tail of Student's t by integrating its density (independent oracle)."""
    c = math.exp(math.lgamma((nu + 1) / 2) - math.lgamma(nu / 2)) / math.sqrt(nu * math.pi)
    dens = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)
    tail, _ = integrate.quad(dens, abs(t), np.inf, epsabs=1e-300, epsrel=1e-12, limit=500)
    return 2 * tail


@pytest.fixture
def truth():
    return np.random.default_rng(0).normal(size=(5, 7))


def test_identity(truth):
    r = evaluate_metrics(truth, truth)
    assert (r.RE, r.MSE) == (0.0, 0.0)
    assert r.CC == pytest.approx(1.0, abs=1e-15)


def test_doubled_estimate(truth):
    r = evaluate_metrics(2 * truth, truth)
    assert r.RE == pytest.approx(1.0, rel=1e-15)
    assert r.CC == pytest.approx(1.0, abs=1e-15)


def test_offset_estimate(truth):
    r = evaluate_metrics(truth + 0.1, truth)
    assert abs(r.CC - 1.0) < 1e-10
    assert r.MSE == pytest.approx(0.01, rel=1e-12)


def test_flat_rows_are_excluded_from_correlation(truth):
    est = truth.copy()
    est[2] = 0.0
    r = evaluate_metrics(est, truth)
    assert r.cc_rows_excluded == 1 and np.isfinite(r.CC)


@pytest.mark.parametrize("est, tru", [(np.ones((2, 3)), np.ones((3, 2))),
                                      (np.ones((2, 2)), np.zeros((2, 2)))])
def test_metric_errors(est, tru):
    with pytest.raises(ValueError):
        evaluate_metrics(est, tru)


def test_summary_statistics(tmp_path):
    s = TrialSummary("tikh0", 0.01, [MetricReport(0.1, 0.9, 0.01), MetricReport(0.3, 0.7, 0.03)])
    d = s.to_dict()
    assert d["RE"]["mean"] == pytest.approx(0.2)
    assert d["RE"]["sd"] == pytest.approx(np.std([0.1, 0.3], ddof=1))
    s.save(tmp_path / "r.json")
    assert (tmp_path / "r.json").read_text().startswith("{")


def test_welch_reference_case():
    t, nu, p = welch_t_test(0.1490, 0.0123, 10, 0.1426, 1e-5, 10)
    assert abs(p - 0.1343) <= 0.002
    assert p == pytest.approx(t_tail_by_quadrature(t, nu), rel=1e-8)


def test_welch_identical_means():
    t, _, p = welch_t_test(0.5, 0.1, 8, 0.5, 0.2, 9)
    assert t == 0.0 and p == 1.0


def test_welch_separated_samples():
    t, nu, p = welch_t_test(1.0, 0.1, 30, 0.0, 0.1, 30)
    assert t == pytest.approx(38.73, abs=0.01) and nu == pytest.approx(58.0)
    assert p < 1e-10
    assert p == pytest.approx(t_tail_by_quadrature(t, nu), rel=1e-6)


@pytest.mark.parametrize("args, err", [((0.1, 0.0, 5, 0.2, 0.0, 5), ZeroDivisionError),
                                       ((0.1, 0.1, 1, 0.2, 0.1, 5), ValueError),
                                       ((0.1, -0.1, 5, 0.2, 0.1, 5), ValueError)])
def test_welch_errors(args, err):
    with pytest.raises(err):
        welch_t_test(*args)


def test_incomplete_beta_endpoints():
    assert regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
    assert regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0
    # I_x(1, 1) = x
    assert regularized_incomplete_beta(1.0, 1.0, 0.37) == pytest.approx(0.37, rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(t=st.floats(0.01, 12.0), nu=st.floats(1.0, 80.0))
def test_tail_matches_quadrature(t, nu):
    """Continued-fraction tail agrees with direct integration of the density."""
    assert t_two_sided_p(t, nu) == pytest.approx(t_tail_by_quadrature(t, nu), rel=1e-7,
                                                 abs=1e-300)


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(0.1, 10.0), shift=st.floats(-5, 5), seed=st.integers(0, 999))
def test_correlation_is_affine_invariant(scale, shift, seed):
    U = np.random.default_rng(seed).normal(size=(4, 9))
    assert evaluate_metrics(scale * U + shift, U).CC == pytest.approx(1.0, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 999))
def test_welch_is_antisymmetric(seed):
    rng = np.random.default_rng(seed)
    ma, mb = rng.normal(size=2)
    sa, sb = rng.uniform(0.01, 1.0, size=2)
    ta, nua, pa = welch_t_test(ma, sa, 7, mb, sb, 11)
    tb, nub, pb = welch_t_test(mb, sb, 11, ma, sa, 7)
    assert ta == pytest.approx(-tb) and nua == pytest.approx(nub) and pa == pytest.approx(pb)
