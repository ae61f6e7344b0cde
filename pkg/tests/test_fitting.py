import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from renalverdict.acquisition import VoxelTable, kidney_protocol
from renalverdict.fitting import (ADCFit, FitError, IVIMFit, SelfSupervisedVerdict, SsFitConfig,
                                  VerdictLeastSquares, compare_vascular_variants, fit_adc,
                                  fit_ivim, fit_verdict_lsq, fit_verdict_ss, goodness_of_fit,
                                  predict_signals)
from renalverdict.models import ProtocolArrays, ivim_signal
from renalverdict.phantom import PhantomSpec, generate_phantom

AV = kidney_protocol().averaged()
PROTO = ProtocolArrays(AV)
B = PROTO.b[PROTO.dw]


def _with_b0(dw_values):
    out = np.ones((dw_values.shape[0], len(PROTO)))
    out[:, PROTO.dw] = dw_values
    return out


@pytest.fixture(scope="module")
def small_phantom():
    return generate_phantom(PhantomSpec(200, seed=3))


@pytest.fixture(scope="module")
def quick_ss(small_phantom):
    table, _ = small_phantom
    return SelfSupervisedVerdict(max_epochs=5, patience=5, dropout_p=0.0, learning_rate=3e-3,
                                 seed=1).fit(table.signals)


def test_ss_output_invariants(quick_ss, small_phantom):
    table, _ = small_phantom
    p = quick_ss.transform(table.signals)
    assert p.shape == (200, 4)
    assert np.all(p[:, :3] >= 0) and np.all(p[:, :3] <= 1)
    np.testing.assert_array_equal(p[:, 2], 1.0 - p[:, 0] - p[:, 1])
    assert np.all((p[:, 3] >= 0.01) & (p[:, 3] <= 15.0))


def test_ss_identical_voxels_identical_rows(quick_ss, small_phantom):
    table, _ = small_phantom
    X = np.repeat(table.signals[:1], 4, axis=0)
    p = quick_ss.transform(X)
    assert (p == p[0]).all()


def test_ss_is_deterministic_and_order_free(small_phantom):
    X = small_phantom[0].signals
    kw = dict(max_epochs=3, patience=3, seed=7)
    a = SelfSupervisedVerdict(**kw).fit(X).transform(X)
    b = SelfSupervisedVerdict(**kw).fit(X).transform(X)
    np.testing.assert_array_equal(a, b)
    perm = np.random.default_rng(0).permutation(len(X))
    c = SelfSupervisedVerdict(**kw).fit(X[perm]).transform(X[perm])
    np.testing.assert_allclose(c, a[perm], rtol=0, atol=1e-12)


def test_ss_rejects_bad_input():
    X = np.ones((3, 18))
    X[2, 4] = np.nan
    with pytest.raises(FitError, match="voxel 2"):
        SelfSupervisedVerdict(max_epochs=1).fit(X)
    with pytest.raises(FitError, match="18 measurements"):
        SelfSupervisedVerdict(max_epochs=1).fit(np.ones((3, 5)))
    with pytest.raises(FitError, match="empty"):
        SelfSupervisedVerdict(max_epochs=1).fit(np.ones((0, 18)))


def test_ss_loss_decreases(small_phantom):
    X = small_phantom[0].signals
    est = SelfSupervisedVerdict(max_epochs=30, patience=30, dropout_p=0.0, learning_rate=3e-3).fit(X)
    assert est.loss_curve_[-1] < est.loss_curve_[0]
    assert clone(est).get_params()["learning_rate"] == 3e-3


def test_fit_verdict_ss_keeps_voxel_indices(small_phantom):
    table, _ = small_phantom
    t = VoxelTable(table.signals[:20], np.arange(20) * 3, (60, 1, 1))
    res = fit_verdict_ss(t, cfg=SsFitConfig(max_epochs=2, patience=2))
    np.testing.assert_array_equal(res.voxel_indices, np.arange(20) * 3)
    assert set(res.params) == {"f_ic", "f_ees", "f_vasc", "R"}
    assert res.info["method"] == "self-supervised"


def test_lsq_recovers_noiseless_truth(small_phantom):
    table, truth = small_phantom
    res = fit_verdict_lsq(table)
    assert np.abs(res.params["f_ic"] - truth.f_ic).max() < 1e-6
    assert np.abs(res.params["R"] - truth.radius).max() < 1e-4
    assert res.mse.max() < 1e-20


def test_adc_exact_and_scaled():
    S = np.exp(-B * 1.5)[None, :]
    p = ADCFit().fit().transform(_with_b0(S))
    np.testing.assert_allclose(p[0], [1.0, 1.5], rtol=1e-12)
    p2 = ADCFit().fit().transform(_with_b0(2 * S))
    np.testing.assert_allclose(p2[0], [2.0, 1.5], rtol=1e-12)


def test_adc_of_biexponential_lies_between_rates():
    S = ivim_signal(1.0, 0.2, 30.0, 1.2, B)[None, :]
    adc = ADCFit().fit().transform(_with_b0(S))[0, 1]
    low_slope = -np.log(S[0, 1] / S[0, 0]) / (B[1] - B[0])
    assert 1.2 < adc < low_slope


def test_adc_needs_two_positive_points():
    S = np.full((1, 9), -1.0)
    S[0, 3] = 0.5
    p = ADCFit().fit().transform(_with_b0(S))
    assert np.isnan(p[0, 1])


def test_ivim_recovers_parameters():
    S = ivim_signal(1.0, 0.25, 30.0, 1.2, B)[None, :]
    s0, f, d_star, d = IVIMFit().fit().transform(_with_b0(S))[0]
    assert s0 == 1.0
    assert f == pytest.approx(0.25, abs=1e-5)
    assert d == pytest.approx(1.2, rel=1e-5)
    assert d_star == pytest.approx(30.0, rel=1e-3)


def test_ivim_monoexponential_has_no_perfusion():
    S = np.exp(-B * 1.2)[None, :]
    _, f, d_star, d = IVIMFit().fit().transform(_with_b0(S))[0]
    assert f == pytest.approx(0.0, abs=1e-9)
    assert d == pytest.approx(1.2, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 0.5), st.floats(3.0, 80.0), st.floats(0.5, 3.0), st.floats(0.8, 1.0))
def test_ivim_d_never_exceeds_d_star(f, d_star, d, scale):
    S = scale * ivim_signal(1.0, f, d_star, d, B)[None, :]
    p = IVIMFit().fit().transform(_with_b0(S))[0]
    assert 0.0 <= p[1] <= 1.0
    assert np.isnan(p[2]) or p[3] <= p[2] + 1e-12


def test_model_ordering_small(small_phantom):
    table, _ = small_phantom
    mse = {name: fit(table).mse.mean() for name, fit in
           [("verdict", fit_verdict_lsq), ("ivim", fit_ivim), ("adc", fit_adc)]}
    assert mse["verdict"] < mse["ivim"] < mse["adc"]


def test_goodness_of_fit_and_prediction(small_phantom):
    table, _ = small_phantom
    res = fit_adc(table)
    np.testing.assert_allclose(goodness_of_fit(res, table), res.mse, rtol=1e-12)
    mse, per_roi = goodness_of_fit(res, table, rois={"a": [0, 1, 2], "b": np.arange(100, 200)})
    assert per_roi["a"] == pytest.approx(mse[:3].mean())
    pred = predict_signals(res, AV)
    np.testing.assert_array_equal(pred[:, PROTO.is_b0], 1.0)


def test_compare_variants_table(small_phantom):
    table, _ = small_phantom
    rows = compare_vascular_variants(table.signals[:30])
    assert [r["rank_aic"] for r in rows] == [0, 1, 2, 3]
    assert sum(r["best_bic"] for r in rows) == 1
    assert rows[0]["variant"] == "astrosticks-d50"
    assert rows == sorted(rows, key=lambda r: r["aic"])


def test_lsq_estimator_api():
    est = VerdictLeastSquares(grid_size=5, n_radii=5)
    assert clone(est).get_params()["grid_size"] == 5
    with pytest.raises(Exception):
        est.transform(np.ones((1, 18)))


def test_config_validation():
    with pytest.raises(ValueError):
        SsFitConfig(learning_rate=0)
    with pytest.raises(ValueError):
        SsFitConfig(dropout_p=1.0)
