import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import wilcoxon_enumerate
from renalverdict.fitting import FitResult
from renalverdict.stats import (DegenerateTestError, RoiMask, export_group_data, group_means,
                                paired_values, read_group_data, roi_summary, significance_band,
                                wilcoxon_signed_rank)


def random_case(rng):
    n = int(rng.integers(1, 11))
    x = rng.integers(0, 6, n).astype(float)  # small integers force ties and zeros
    y = rng.integers(0, 6, n).astype(float)
    if np.all(x == y):
        x[0] += 1
    return x, y


def test_exact_path_equals_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x, y = random_case(rng)
        res = wilcoxon_signed_rank(x, y)
        w_plus, p = wilcoxon_enumerate(x, y)
        assert res.method == "exact"
        assert res.w_plus == w_plus
        assert res.statistic == min(w_plus, res.w_minus)
        assert res.p_value == p


def test_all_positive_five():
    res = wilcoxon_signed_rank([2, 3, 4, 5, 6], [1, 1, 1, 1, 1])
    assert res.p_value == 0.0625
    assert res.statistic == 0.0 and res.w_plus == 15.0
    assert res.band == "n.s."


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-20, 20), st.integers(-20, 20)), min_size=1, max_size=25))
def test_rank_sum_identity(pairs):
    x = np.array([p[0] for p in pairs], float)
    y = np.array([p[1] for p in pairs], float)
    if np.all(x == y):
        with pytest.raises(DegenerateTestError):
            wilcoxon_signed_rank(x, y)
        return
    res = wilcoxon_signed_rank(x, y)
    n = res.n_effective
    assert res.w_plus + res.w_minus == n * (n + 1) / 2
    assert 0.0 < res.p_value <= 1.0
    # swapping the samples swaps W+ and W- and keeps p
    swapped = wilcoxon_signed_rank(y, x)
    assert swapped.w_plus == res.w_minus and swapped.p_value == res.p_value


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 10), st.floats(0.1, 10)), min_size=2, max_size=12))
def test_monotone_transform_invariance(pairs):
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    d = x - y
    if np.all(d == 0):
        return
    # an odd monotone map of the differences preserves signs and rank order
    base = wilcoxon_signed_rank(d, np.zeros_like(d))
    moved = wilcoxon_signed_rank(d ** 3, np.zeros_like(d))
    if len(np.unique(np.abs(d))) == len(np.unique(np.abs(d ** 3))):
        assert moved.p_value == base.p_value and moved.w_plus == base.w_plus


def test_normal_approximation_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(21, 60))
        x = rng.integers(0, 10, n).astype(float)
        y = rng.integers(0, 10, n).astype(float)
        res = wilcoxon_signed_rank(x, y)
        if res.n_effective <= 20:
            continue
        ref = scipy.stats.wilcoxon(x, y, zero_method="wilcox", correction=True, method="approx")
        assert res.method == "normal-approximation"
        assert res.p_value == pytest.approx(ref.pvalue, rel=1e-10)


def test_degenerate_and_shape_errors():
    with pytest.raises(DegenerateTestError, match="no nonzero pairs"):
        wilcoxon_signed_rank([1, 2], [1, 2])
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2], [1])


@pytest.mark.parametrize("p,band", [
    (0.05, "n.s."), (0.0499999, "*"), (0.01, "*"), (0.00999, "**"), (1e-3, "**"),
    (9.99e-4, "***"), (1e-4, "***"), (9.9e-5, "****"), (0.0, "****"), (1.0, "n.s."),
])
def test_significance_bands(p, band):
    assert significance_band(p) == band


def _fit(params, idx):
    return FitResult("verdict", {k: np.asarray(v, float) for k, v in params.items()},
                     voxel_indices=np.asarray(idx))


def test_roi_summary_population_sd():
    fit = _fit({"f_ic": [0.1, 0.2, 0.3, 0.9]}, [10, 11, 12, 13])
    s = roi_summary(fit, RoiMask("tumour", [10, 11, 12]))
    assert s.n_voxels == 3
    assert s.mean["f_ic"] == pytest.approx(0.2)
    assert s.sd["f_ic"] == pytest.approx(math.sqrt(2 / 300), abs=1e-12)
    assert s.sd["f_ic"] == pytest.approx(0.0816, abs=1e-4)
    one = roi_summary(fit, RoiMask("one", [13]))
    assert one.sd["f_ic"] == 0.0 and one.median["f_ic"] == 0.9
    with pytest.raises(ValueError, match="does not intersect"):
        roi_summary(fit, RoiMask("none", [99]))


def test_roi_summary_excludes_nan():
    fit = _fit({"d_star": [1.0, np.nan, 3.0]}, [0, 1, 2])
    s = roi_summary(fit, RoiMask("r", [0, 1, 2]))
    assert s.n_excluded["d_star"] == 1 and s.mean["d_star"] == 2.0


def test_roi_mask_validation():
    with pytest.raises(ValueError, match="duplicate"):
        RoiMask("a", [1, 1])


def _group_fixture():
    params = ("f_ic", "f_ees", "f_vasc", "R")
    fits, masks = {}, {}
    for s, base in (("s1", 0.1), ("s2", 0.2), ("s3", 0.3)):
        fits[s] = _fit({k: [base, base + 0.1, base + 0.5, base + 0.6] for k in params}, [0, 1, 2, 3])
        masks[s] = [RoiMask("tumour", [0, 1], {"group": "vascular"}),
                    RoiMask("cortex", [2, 3], {"group": "non-vascular"})]
    return fits, masks


def test_export_cardinality_and_roundtrip(tmp_path):
    fits, masks = _group_fixture()
    text = export_group_data(fits, masks)
    lines = text.splitlines()
    assert lines[0] == "subject,roi_label,group,parameter,value"
    assert len(lines) - 1 == 3 * 2 * 4
    rows = read_group_data(text)
    path = tmp_path / "g.csv"
    path.write_text(text)
    assert read_group_data(str(path)) == rows
    subjects, x, y = paired_values(rows, "f_ic", "tumour", "cortex")
    assert subjects == ["s1", "s2", "s3"]
    np.testing.assert_allclose(x, [0.15, 0.25, 0.35])
    np.testing.assert_allclose(y, [0.65, 0.75, 0.85])
    means = group_means(rows, "R")
    assert means["vascular"] == pytest.approx(0.25)
    assert means["non-vascular"] == pytest.approx(0.75)


def test_read_group_data_rejects_bad_header():
    with pytest.raises(ValueError, match="header"):
        read_group_data("a,b\n1,2\n")
