import math

import numpy as np
import pytest
from scipy import stats as sps

from mitransfer.stats import (
    ProtocolError,
    StatTestError,
    compare_models,
    friedman,
    holm_adjust,
    shapiro_wilk,
    sign_test,
    wilcoxon_signed_rank,
)
from oracles import SW_PUBLISHED_W, SW_REFERENCE, SW_SAMPLE, brute_friedman, enumerate_wilcoxon


def test_shapiro_three_points():
    w, p = shapiro_wilk([1, 2, 3])
    assert w == 1.0 and p == pytest.approx(1.0)


def test_shapiro_reference_sample():
    w, p = shapiro_wilk(SW_SAMPLE)
    assert abs(w - SW_PUBLISHED_W) < 1e-2
    assert abs(w - SW_REFERENCE[0]) < 1e-2 and abs(p - SW_REFERENCE[1]) < 1e-2


@pytest.mark.parametrize("n", [3, 4, 5, 6, 7, 11, 12, 20, 55, 200])
def test_shapiro_agrees_with_as_r94(n):
    x = np.random.default_rng(n).gamma(2.0, size=n)
    w, p = shapiro_wilk(x)
    ref = sps.shapiro(x)
    assert abs(w - ref.statistic) < 1e-6 and abs(p - ref.pvalue) < 1e-6


def test_shapiro_errors():
    with pytest.raises(StatTestError):
        shapiro_wilk([2.0, 2.0, 2.0, 2.0])
    with pytest.raises(StatTestError):
        shapiro_wilk([1.0, 2.0])


def test_friedman_hand_computed():
    m = np.tile([1.0, 2.0, 3.0], (10, 1))
    chi2, df, p = friedman(m)
    assert chi2 == pytest.approx(20.0) and df == 2
    assert p == pytest.approx(math.exp(-10.0))


def test_friedman_full_ties():
    assert friedman(np.ones((5, 3))) == (0.0, 2, 1.0)


def test_friedman_matches_brute_force_on_random_matrices():
    rng = np.random.default_rng(0)
    for trial in range(100):
        n, k = rng.integers(2, 12), rng.integers(2, 6)
        # coarse values so ties occur regularly
        m = rng.integers(0, 5, size=(n, k)).astype(float) if trial % 2 else rng.normal(size=(n, k))
        if np.all(m == m[:, :1]):
            continue
        chi2, df, p = friedman(m)
        assert chi2 == pytest.approx(brute_friedman(m), rel=1e-10, abs=1e-10)
        assert df == k - 1
        assert p == pytest.approx(sps.chi2.sf(chi2, k - 1))


def test_friedman_errors():
    with pytest.raises(StatTestError):
        friedman(np.ones((1, 3)))
    with pytest.raises(StatTestError):
        friedman(np.ones((4, 1)))


def test_wilcoxon_all_positive():
    w, p = wilcoxon_signed_rank([2, 3, 4, 5, 6], [1, 1, 1, 1, 1])
    assert w == 0 and p == pytest.approx(2 / 2**5)


def test_wilcoxon_exact_matches_enumeration_up_to_12():
    rng = np.random.default_rng(3)
    for n in range(1, 13):
        for rep in range(4):
            x = rng.integers(0, 6, size=n).astype(float) if rep % 2 else rng.normal(size=n)
            y = rng.integers(0, 6, size=n).astype(float) if rep % 2 else rng.normal(size=n)
            if np.all(x == y):
                continue
            w, p = wilcoxon_signed_rank(x, y)
            w_ref, p_ref = enumerate_wilcoxon(x - y)
            assert w == pytest.approx(w_ref)
            assert p == pytest.approx(p_ref, abs=1e-12)


def test_wilcoxon_symmetry_and_errors():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=9), rng.normal(size=9)
    w1, p1 = wilcoxon_signed_rank(x, y)
    w2, p2 = wilcoxon_signed_rank(y, x)
    n = 9
    assert w1 + w2 == pytest.approx(n * (n + 1) / 2)
    assert p1 == pytest.approx(p2)
    with pytest.raises(StatTestError):
        wilcoxon_signed_rank(x, x)


def test_wilcoxon_normal_approximation_matches_scipy():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=55), rng.normal(0.3, 1, size=55)
    w, p = wilcoxon_signed_rank(x, y)
    ref = sps.wilcoxon(x, y, method="approx", correction=True)
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_sign_test():
    stat, p = sign_test([2, 3, 4, 5, 6], [1, 1, 1, 1, 1])
    assert stat == 0 and p == pytest.approx(2 / 32)


def test_holm():
    np.testing.assert_allclose(holm_adjust([0.01, 0.04, 0.03]), [0.03, 0.06, 0.06])
    assert holm_adjust([0.2]).tolist() == [0.2]
    assert holm_adjust([1.0, 1.0]).tolist() == [1.0, 1.0]


def test_compare_models_degenerate_pair():
    rng = np.random.default_rng(6)
    a = rng.uniform(0.6, 0.9, size=20)
    report = compare_models({"a": a, "b": a.copy(), "c": a - 0.2})
    assert report.friedman_df == 2 and report.omnibus_significant
    pair = next(r for r in report.pairwise if (r.first, r.second) == ("a", "b"))
    assert pair.note == "no difference detectable" and pair.p_adjusted == 1.0
    others = [r for r in report.pairwise if r is not pair]
    assert all(r.p_adjusted < 0.05 for r in others)
    assert "df = k - 1 = 2" in report.notes[0]


def test_compare_models_protocol_errors():
    with pytest.raises(ProtocolError):
        compare_models({"a": [0.5, 0.6]})
    with pytest.raises(ProtocolError):
        compare_models({"a": [0.5, 0.6, 0.7], "b": [0.5, 0.6]})


def test_null_rejection_rate():
    rng = np.random.default_rng(2024)
    alpha, trials = 0.05, 1000
    rejections = sum(friedman(rng.normal(size=(55, 3)))[2] < alpha for _ in range(trials))
    sigma = math.sqrt(alpha * (1 - alpha) / trials)
    assert abs(rejections / trials - alpha) <= 2 * sigma
