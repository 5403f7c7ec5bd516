"""Evaluation metrics: pooled errors, percentiles, R² variants."""

import json

import numpy as np
import pytest

from flowfield.errors import ContractError, DegenerateDataError, ShapeMismatchError
from flowfield.metrics import (aoa_weights, compute_metrics, percentile,
                               weighted_r2)
from flowfield.rng import make_rng


def rand(shape, seed=0):
    return make_rng(seed).standard_normal(shape)


# -- compute_metrics -----------------------------------------------------------------


def test_hand_arithmetic_example():
    y = np.array([[[1.0, 2.0]]])
    p = np.array([[[1.0, 3.0]]])
    rep = compute_metrics(y, p)
    assert rep.mae == pytest.approx(0.5)
    assert rep.mse == pytest.approx(0.5)
    assert rep.rmse == pytest.approx(np.sqrt(0.5), rel=1e-6)
    assert rep.relative_l2 == pytest.approx(1.0 / np.sqrt(5.0), rel=1e-6)


def test_perfect_prediction():
    y = rand((3, 2, 8), 1)
    rep = compute_metrics(y, y.copy())
    assert rep.mse == 0.0
    assert rep.mae == 0.0
    assert rep.r2 == pytest.approx(1.0)
    assert rep.relative_l2 == 0.0


def test_rmse_is_sqrt_mse():
    y, p = rand((4, 1, 16), 2), rand((4, 1, 16), 3)
    rep = compute_metrics(y, p)
    assert rep.rmse == pytest.approx(np.sqrt(rep.mse), rel=1e-7)


def test_ae95_boundary_interpolation():
    # 95 zeros then 5 ones: rank q*(n-1) = 0.95*99 = 94.05 lies in the zero run
    errors = np.concatenate([np.zeros(95), np.ones(5)])
    y = np.linspace(0.0, 1.0, 100).reshape(1, 1, 100)  # non-constant truth
    p = y + errors.reshape(1, 1, 100)
    rep = compute_metrics(y, p)
    want95 = np.percentile(errors, 95, method="linear")
    want99 = np.percentile(errors, 99, method="linear")
    assert rep.ae_95 == pytest.approx(want95, abs=1e-12)
    assert rep.ae_99 == pytest.approx(want99, abs=1e-12)
    assert rep.ae_95 <= rep.ae_99


def test_percentile_matches_linear_interpolation_rule():
    vals = np.array([1.0, 3.0, 2.0, 10.0])
    for q in (50, 95, 99):
        assert percentile(vals, q) == pytest.approx(
            np.percentile(vals, q, method="linear"))


def test_r2_definition():
    y, p = rand((2, 1, 50), 4), rand((2, 1, 50), 5)
    rep = compute_metrics(y, p)
    want = 1.0 - np.sum((y - p) ** 2) / np.sum((y - y.mean()) ** 2)
    assert rep.r2 == pytest.approx(want, rel=1e-10)
    assert rep.r2 <= 1.0


def test_mre_guard():
    # truth crossing zero: guard keeps MRE finite
    y = np.array([[[0.0, 1.0, -1.0, 2.0]]])
    p = y + 0.1
    rep = compute_metrics(y, p)
    assert np.isfinite(rep.mre_percent)
    delta = 0.01 * y.std()
    want = 100.0 * np.mean(np.abs(y - p) / np.maximum(np.abs(y), delta))
    assert rep.mre_percent == pytest.approx(want, rel=1e-6)


def test_metrics_invariant_to_ordering():
    y, p = rand((5, 1, 8), 6), rand((5, 1, 8), 7)
    rep1 = compute_metrics(y, p)
    perm = make_rng(8).permutation(5)
    rep2 = compute_metrics(y[perm], p[perm])
    assert rep1.mse == pytest.approx(rep2.mse, rel=1e-12)
    assert rep1.r2 == pytest.approx(rep2.r2, rel=1e-12)
    assert rep1.ae_95 == pytest.approx(rep2.ae_95, rel=1e-12)


def test_per_channel_breakdown():
    y, p = rand((3, 2, 8), 9), rand((3, 2, 8), 10)
    rep = compute_metrics(y, p)
    assert set(rep.per_channel.keys()) == {0, 1}
    for ch in (0, 1):
        want = np.mean((y[:, ch] - p[:, ch]) ** 2)
        assert rep.per_channel[ch]["mse"] == pytest.approx(want, rel=1e-10)


def test_empty_input_rejected():
    with pytest.raises(ContractError):
        compute_metrics(np.zeros((0, 1, 4)), np.zeros((0, 1, 4)))


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeMismatchError):
        compute_metrics(np.zeros((2, 1, 4)), np.zeros((2, 1, 5)))


def test_report_serialization_roundtrip():
    y, p = rand((2, 1, 8), 11), rand((2, 1, 8), 12)
    rep = compute_metrics(y, p)
    doc = json.loads(rep.to_json())
    assert doc["mse"] == pytest.approx(rep.mse)
    csv_text = rep.to_csv()
    assert "mse" in csv_text and "." in csv_text and "," in csv_text


# -- weighted R² ---------------------------------------------------------------------


def test_weighted_r2_perfect():
    y = rand((4, 1, 8), 13)
    w = np.array([1.0, 0.5, 1.0, 0.5])
    assert weighted_r2(y, y.copy(), w, channel=0) == pytest.approx(1.0)


def test_weighted_r2_mean_predictor_is_zero():
    y = rand((4, 1, 8), 14)
    p = np.full_like(y, y.mean())
    w = np.ones(4)
    assert weighted_r2(y, p, w, channel=0) == pytest.approx(0.0, abs=1e-12)


def test_weighted_r2_hand_evaluated():
    # two conditions of two points: y=[0,2 | 0,2], pred=[0,2 | 1,1], w=(1.0, 0.5)
    y = np.array([[[0.0, 2.0]], [[0.0, 2.0]]])
    p = np.array([[[0.0, 2.0]], [[1.0, 1.0]]])
    w = np.array([1.0, 0.5])
    ybar = 1.0  # unweighted mean of all points
    num = 1.0 * 0.0 + 0.5 * ((0 - 1) ** 2 + (2 - 1) ** 2)
    den = 1.0 * ((0 - ybar) ** 2 + (2 - ybar) ** 2) + 0.5 * ((0 - ybar) ** 2 + (2 - ybar) ** 2)
    want = 1.0 - num / den
    got = weighted_r2(y, p, w, channel=0)
    assert got == pytest.approx(want, abs=1e-12)


def test_weighted_r2_equals_plain_r2_with_unit_weights():
    y, p = rand((6, 1, 10), 15), rand((6, 1, 10), 16)
    rep = compute_metrics(y, p)
    wr2 = weighted_r2(y, p, np.ones(6), channel=0)
    assert wr2 == pytest.approx(rep.r2, rel=1e-10)


def test_weighted_r2_global_is_channel_mean():
    y, p = rand((4, 3, 8), 17), rand((4, 3, 8), 18)
    w = np.array([1.0, 0.5, 0.5, 1.0])
    global_r2, per = weighted_r2(y, p, w)
    assert global_r2 == pytest.approx(np.mean([per[c] for c in range(3)]), rel=1e-12)


def test_weighted_r2_degenerate_truth():
    y = np.ones((3, 1, 4))
    with pytest.raises(DegenerateDataError):
        weighted_r2(y, y + 0.1, np.ones(3), channel=0)


def test_aoa_weights():
    aoa = np.array([-12.0, -10.0, 0.0, 10.0, 10.5])
    np.testing.assert_array_equal(aoa_weights(aoa), [0.5, 1.0, 1.0, 1.0, 0.5])


def test_metrics_stable_through_standardize_roundtrip():
    from flowfield import data as D
    ds = D.FieldDataset(
        conditions=rand((20, 2), 19).astype(np.float32),
        fields=rand((20, 1, 16), 20).astype(np.float32),
        coords=None)
    sds = D.standardize(D.split_conditions(ds, (0.7, 0.15, 0.15), seed=0))
    y = D.destandardize_fields(sds.fields, sds.channel_stats)
    p = y + 0.05
    rep_direct = compute_metrics(y, p)
    # round-trip the prediction through standardize/destandardize
    p_std = (p - np.asarray(sds.channel_stats.mean)[:, None]) / \
        np.asarray(sds.channel_stats.std)[:, None]
    p_back = D.destandardize_fields(p_std.astype(np.float32), sds.channel_stats)
    rep_round = compute_metrics(y, p_back)
    assert rep_round.mse == pytest.approx(rep_direct.mse, rel=1e-4, abs=1e-9)
    assert rep_round.r2 == pytest.approx(rep_direct.r2, rel=1e-5)
