from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndreg.design import PropensityTable
from ndreg.errors import EmptyArmError, OverlapError, RankDeficientError
from ndreg.estimators import (
    AdjustedEstimate,
    Dataset,
    fisher_wls,
    haj_weights,
    ht_weights,
    lin_wls,
    mean_star,
    tau_adjusted,
    tau_unadjusted,
    wls_qr,
)


def table(p1):
    p1 = np.asarray(p1, dtype=float)
    return PropensityTable((0, 1), np.column_stack([1 - p1, p1]))


# four units: T = [1, 0, 1, 0], pi(1) = [1/2, 1/4, 4/5, 1/2]
HAND4 = Dataset(np.array([3.0, 1, 2, 0]), np.array([1, 0, 1, 0]), table([0.5, 0.25, 0.8, 0.5]))

# six units, one covariate; references from the weighted normal equations
T6 = np.array([1, 1, 1, 0, 0, 0])
P6 = np.array([0.5, 0.4, 0.6, 0.5, 0.3, 0.7])
Y6 = np.array([2.0, 3.5, 1.0, 0.5, 1.5, -0.5])
Z6 = np.array([0.2, 1.0, -0.8, 0.4, 0.9, -1.1])
HAND6 = Dataset(Y6, T6, table(P6), Z=Z6)


def test_ht_weights_hand():
    assert ht_weights(HAND4).tolist() == pytest.approx([2, -4 / 3, 1.25, -2], abs=1e-15)


def test_haj_weights_hand():
    expected = [32 / 13, -8 / 5, 20 / 13, -12 / 5]
    assert haj_weights(HAND4).tolist() == pytest.approx(expected, abs=1e-14)


def test_unadjusted_hand():
    assert tau_unadjusted(HAND4, "Haj") == pytest.approx(float(Fraction(144, 65)), abs=1e-14)
    assert tau_unadjusted(HAND4, "HT") == pytest.approx(float(Fraction(43, 24)), abs=1e-14)


def test_weight_examples():
    ds = Dataset(np.zeros(4), np.array([1, 0, 2, 1]), PropensityTable((0, 1, 2), np.full((4, 3), 1 / 3)))
    assert ht_weights(ds).tolist() == [3, -3, 0, 3]
    flat = Dataset(np.array([1.0, 5, 2, 4]), np.array([1, 1, 0, 0]), table([0.5] * 4))
    assert ht_weights(flat)[0] == 2
    assert mean_star(flat.Y, flat, "Haj", 1) == pytest.approx(3.0)
    assert tau_unadjusted(Dataset(np.zeros(4), flat.T, flat.pi), "HT") == 0


def test_mean_star_of_ones():
    assert mean_star(np.ones(4), HAND4, "Haj", 1) == pytest.approx(1.0, abs=1e-15)
    assert mean_star(np.ones(4), HAND4, "HT", 1) == pytest.approx((2 + 1.25) / 4)


def test_haj_constant_outcome():
    ds = Dataset(np.full(4, 7.25), HAND4.T, HAND4.pi)
    assert tau_unadjusted(ds, "Haj") == 0.0


def test_empty_arm():
    ds = Dataset(np.ones(3), np.array([1, 1, 1]), table([0.5] * 3))
    with pytest.raises(EmptyArmError):
        haj_weights(ds)
    with pytest.raises(EmptyArmError):
        fisher_wls(ds.with_Z(np.arange(3.0)))


def test_overlap_enforced():
    with pytest.raises(OverlapError):
        Dataset(np.ones(2), np.array([1, 0]), table([1.0, 0.5]))


def test_tau_adjusted_examples():
    ds = HAND4.with_Z(np.array([[1.0], [0.5], [-1.0], [2.0]]))
    assert tau_adjusted(ds, "Haj", [0.0]) == tau_unadjusted(HAND4, "Haj")
    zero = HAND4.with_Z(np.zeros((4, 1)))
    assert tau_adjusted(zero, "HT", [3.0]) == tau_unadjusted(HAND4, "HT")
    # residualized outcome Y - 0.5 Z = [2.5, 0.75, 2.5, -1]
    hand = (32 / 13 * 2.5 + 20 / 13 * 2.5 - 8 / 5 * 0.75 - 12 / 5 * -1) / 4
    assert tau_adjusted(ds, "Haj", [0.5]) == pytest.approx(hand, abs=1e-14)
    with pytest.raises(ValueError):
        tau_adjusted(ds, "Haj", [1.0, 2.0])


def test_fisher_hand():
    est = fisher_wls(HAND6)
    assert est.tau_hat == pytest.approx(1.5926167918980723, abs=1e-12)
    assert est.beta[0] == pytest.approx(1.08005281, abs=1e-8)
    assert est.tau_hat == pytest.approx(tau_adjusted(HAND6, "Haj", est.beta), abs=1e-10)


def test_lin_hand():
    est = lin_wls(HAND6)
    assert est.beta[1][0] == pytest.approx(1.40183028, abs=1e-8)
    assert est.beta[0][0] == pytest.approx(0.87671233, abs=1e-8)
    assert est.tau_hat == pytest.approx(1.98169717 - 0.42328767, abs=1e-8)


def test_fisher_orthogonal_slope_leaves_hajek():
    # Z is weighted-mean zero within each arm, so intercepts are the Hajek means
    T = np.array([1, 1, 0, 0])
    ds = Dataset(np.array([1.0, 4, 2, 5]), T, table([0.5] * 4), Z=np.array([1.0, -1, 1, -1]))
    assert fisher_wls(ds).tau_hat == pytest.approx(tau_unadjusted(ds, "Haj"), abs=1e-12)


def test_lin_equals_fisher_without_heterogeneity():
    T = np.array([1, 1, 1, 0, 0, 0])
    Z = np.array([-1.0, 0, 1, -1, 0, 1])
    Y = 2 * Z + 1 + 3 * T
    ds = Dataset(Y, T, table([0.5] * 6), Z=Z)
    assert lin_wls(ds).tau_hat == pytest.approx(fisher_wls(ds).tau_hat, abs=1e-12)


def test_rank_deficiency_names_columns():
    ds = HAND6.with_Z(np.column_stack([Z6, 2 * Z6]), ["a", "b"])
    with pytest.raises(RankDeficientError) as err:
        fisher_wls(ds)
    assert err.value.columns and set(err.value.columns) <= {"a", "b"}
    with pytest.raises(RankDeficientError):
        wls_qr(np.ones((3, 2)), np.ones(3), np.ones(3))


def test_adjusted_estimate_record():
    est = AdjustedEstimate("Haj", 1.0, 1.0, 100, None, 0.95, 3)
    rec = est.to_record()
    assert rec["ci_high"] - rec["tau_hat"] == pytest.approx(0.196, abs=1e-3)
    assert set(rec) == {"method", "tau_hat", "se", "ci_low", "ci_high", "beta", "n", "b_n", "contrast"}
    neg = AdjustedEstimate("Haj", 1.0, -0.5, 100)
    assert neg.negative_variance and neg.to_record()["se"] is None


@st.composite
def datasets(draw, q=2):
    n = draw(st.integers(8, 40))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    T = np.zeros(n, dtype=int)
    T[: n // 2] = 1
    rng.shuffle(T)
    p1 = rng.uniform(0.15, 0.85, n)
    return Dataset(rng.normal(size=n), T, table(p1), Z=rng.normal(size=(n, q))), rng


@settings(max_examples=50, deadline=None)
@given(datasets())
def test_wls_representations(data):
    ds, _ = data
    f = fisher_wls(ds)
    assert f.tau_hat == pytest.approx(tau_adjusted(ds, "Haj", f.beta), abs=1e-10)
    lin = lin_wls(ds)
    assert lin.tau_hat == pytest.approx(tau_adjusted(ds, "Haj", lin.beta), abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(datasets(), st.floats(-50, 50))
def test_hajek_location_invariance(data, c):
    ds, _ = data
    shifted = Dataset(ds.Y + c, ds.T, ds.pi)
    assert mean_star(shifted.Y, shifted, "Haj", 1) == pytest.approx(mean_star(ds.Y, ds, "Haj", 1) + c, abs=1e-9)
    assert tau_unadjusted(shifted, "Haj") == pytest.approx(tau_unadjusted(ds, "Haj"), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(datasets(), st.floats(-10, 10))
def test_ht_linearity(data, c):
    ds, _ = data
    col = ds.Z[:, 0]
    combo = Dataset(ds.Y + c * col, ds.T, ds.pi)
    expected = tau_unadjusted(ds, "HT") + c * tau_unadjusted(Dataset(col, ds.T, ds.pi), "HT")
    assert tau_unadjusted(combo, "HT") == pytest.approx(expected, abs=1e-10)
