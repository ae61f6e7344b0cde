import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import astrosticks_quad, bessel_roots, central_difference, gpd_sphere, relative_error
from renalverdict.acquisition import AcquisitionPoint, kidney_protocol
from renalverdict.models import (FixedDiffusivities, ProtocolArrays, TissueParams, adc_signal,
                                 astrosticks_signal, ball_signal, information_criteria,
                                 ivim_signal, sphere_gpd, sphere_gpd_signal, sphere_roots,
                                 verdict_gradient, verdict_predict, verdict_signal)

KIDNEY = kidney_protocol()
PROTO = ProtocolArrays(KIDNEY.averaged())


def test_roots_match_bessel_derivative_zeros():
    ours = sphere_roots(40)
    ref = bessel_roots(40)
    np.testing.assert_allclose(ours, ref, rtol=1e-12)
    x = ours
    resid = ((x * x - 2) * np.sin(x) + 2 * x * np.cos(x)) / x ** 2
    assert np.abs(resid).max() < 1e-13
    assert ours[0] == pytest.approx(2.0815759778, abs=1e-9)


@pytest.mark.parametrize("radius", [0.5, 2.0, 5.0, 10.0, 15.0])
@pytest.mark.parametrize("shell", [0, 3, 6, 8])
def test_gpd_against_textbook_form(radius, shell):
    b, delta, Delta = KIDNEY.shells()[shell][:3]
    p = AcquisitionPoint(b, delta, Delta, 60)
    ours = sphere_gpd_signal(p, radius, 2.0)
    ref = gpd_sphere(b * 1e-3, delta, Delta, radius, 2.0)
    assert ours == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_gpd_limits():
    p = AcquisitionPoint(1000, 12.0, 34.0, 60)
    # tiny sphere: almost no attenuation; huge sphere: approaches free diffusion
    assert sphere_gpd_signal(p, 0.05, 2.0) > 0.9999
    assert sphere_gpd_signal(p, 15.0, 2.0) < sphere_gpd_signal(p, 5.0, 2.0)
    with pytest.raises(ValueError):
        sphere_gpd_signal(p, 0.0, 2.0)
    with pytest.raises(Exception, match="b=0"):
        sphere_gpd_signal(AcquisitionPoint(0, 12.0, 34.0, 60, is_b0=True), 5.0, 2.0)


def test_numba_and_numpy_routes_agree():
    rng = np.random.default_rng(4)
    n = 50
    f_ic = rng.uniform(0, 0.6, n)
    f_ees = rng.uniform(0, 0.4, n)
    R = rng.uniform(0.1, 15, n)
    S, (gi, ge, gr) = verdict_predict(f_ic, f_ees, R, PROTO, with_grad=True)
    fixed = FixedDiffusivities()
    pts = KIDNEY.averaged().points
    for v in range(0, n, 7):
        tp = TissueParams(f_ic[v], f_ees[v], R[v])
        for j, p in enumerate(pts):
            assert S[v, j] == pytest.approx(verdict_signal(tp, fixed, p), rel=1e-13)
            g = verdict_gradient(tp, fixed, p)
            np.testing.assert_allclose([gi[v, j], ge[v, j], gr[v, j]], g, rtol=1e-11, atol=1e-15)


def test_astrosticks_values():
    # d = 50 um^2/ms: b = 70 s/mm^2 gives bd = 3.5; bd = 1 gives sqrt(pi)/2 erf(1)
    assert float(astrosticks_signal(0.07, 50.0)) == pytest.approx(0.46985, abs=5e-6)
    assert float(astrosticks_signal(0.02, 50.0)) == pytest.approx(0.74682, abs=5e-6)
    for b in (1e-9, 1e-4, 0.07, 1.0, 2.5):
        assert float(astrosticks_signal(b, 50.0)) == pytest.approx(astrosticks_quad(b, 50.0), rel=1e-10)
    assert float(astrosticks_signal(0.0, 50.0)) == 1.0


def test_ball_and_baselines():
    assert float(ball_signal(1.0, 2.0)) == pytest.approx(math.exp(-2.0))
    assert float(adc_signal(1.0, 1.5, 0.0)) == 1.0
    assert float(ivim_signal(1.0, 0.2, 20.0, 1.0, 0.0)) == 1.0
    assert float(ivim_signal(2.0, 0.0, 20.0, 1.0, 1.0)) == pytest.approx(2 * math.exp(-1.0))


def test_b0_entries_are_one_and_fractions_sum():
    S = verdict_predict(np.array([0.3]), np.array([0.5]), np.array([8.0]), PROTO)
    np.testing.assert_array_equal(S[0, PROTO.is_b0], 1.0)
    # pure compartments
    fixed = FixedDiffusivities()
    b = PROTO.b[PROTO.dw]
    S_ees = verdict_predict(np.array([0.0]), np.array([1.0]), np.array([8.0]), PROTO)[0, PROTO.dw]
    np.testing.assert_allclose(S_ees, np.exp(-b * fixed.d_ees), rtol=1e-14)
    S_v = verdict_predict(np.array([0.0]), np.array([0.0]), np.array([8.0]), PROTO)[0, PROTO.dw]
    np.testing.assert_allclose(S_v, astrosticks_signal(b, 50.0), rtol=1e-14)


def test_tissue_param_invariants():
    assert TissueParams(0.5, 0.5, 1.0).f_vasc == pytest.approx(0.0)
    for bad in [(0.7, 0.5, 1.0), (-0.1, 0.5, 1.0), (0.2, 0.2, 0.0)]:
        with pytest.raises(ValueError):
            TissueParams(*bad)
    with pytest.raises(ValueError):
        FixedDiffusivities(vascular="cylinder")


def test_analytic_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        f_ic = rng.uniform(0.05, 0.6)
        f_ees = rng.uniform(0.05, 0.9 - f_ic)
        R = rng.uniform(0.5, 15.0)
        _, grads = verdict_predict(np.array([f_ic]), np.array([f_ees]), np.array([R]), PROTO,
                                   with_grad=True)
        analytic = np.stack([g[0] for g in grads], axis=-1)

        def f(p):
            return verdict_predict(np.array([p[0]]), np.array([p[1]]), np.array([p[2]]), PROTO)[0]

        numeric = central_difference(f, [f_ic, f_ees, R], [1e-5, 1e-5, 1e-5 * R])
        worst = max(worst, relative_error(analytic, numeric))
    assert worst < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.1, 15.0))
def test_signal_bounded(u, v, R):
    f_ic, f_ees = u, v * (1 - u)
    S = verdict_predict(np.array([f_ic]), np.array([f_ees]), np.array([R]), PROTO)
    assert np.all(S >= 0) and np.all(S <= 1 + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 14.0))
def test_sphere_signal_decreases_with_radius(R):
    b = PROTO.b[PROTO.dw]
    s1 = sphere_gpd(b, PROTO.delta[PROTO.dw], PROTO.Delta[PROTO.dw], R, 2.0)
    s2 = sphere_gpd(b, PROTO.delta[PROTO.dw], PROTO.Delta[PROTO.dw], R * 1.05, 2.0)
    assert np.all(s2 <= s1)


def test_information_criteria():
    aic, bic = information_criteria(2.0, 10, 3)
    ll = 10 * math.log(0.2)
    assert aic == pytest.approx(ll + 6)
    assert bic == pytest.approx(ll + 3 * math.log(10))
    with pytest.warns(RuntimeWarning):
        assert information_criteria(0.0, 10, 3) == (-math.inf, -math.inf)
    for n, k in [(3, 3), (10, 0)]:
        with pytest.raises(ValueError):
            information_criteria(1.0, n, k)
