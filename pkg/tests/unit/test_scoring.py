import math

import numpy as np
import pytest
from scipy import stats

from paleorecon.exceptions import ScoringError
from paleorecon.inla import Reconstruction
from paleorecon.scoring import (
    SCORE_COLUMNS,
    butterworth_lowpass,
    crps_ensemble,
    crps_gaussian,
    crps_samples,
    interval_score,
    mse,
    score_table,
    validation_suite,
)
from paleorecon.timeseries import TimeSeries


def test_interval_score_inside_and_on_bounds():
    assert interval_score(0.0, 1.0, 0.4, 0.2) == pytest.approx(1.0)
    assert interval_score(0.0, 1.0, 0.0, 0.2) == pytest.approx(1.0)
    assert interval_score(0.0, 1.0, 1.0, 0.05) == pytest.approx(1.0)


def test_interval_score_penalty():
    assert interval_score(0.0, 1.0, 1.5, 0.2) == pytest.approx(6.0)
    assert interval_score([0.0, 0.0], [1.0, 1.0], [1.5, 0.5], 0.2) == pytest.approx(3.5)


def test_interval_score_doubles_with_width(rng):
    y = rng.normal(size=30)
    half = np.abs(rng.normal(size=30)) + 1.0
    center = y + 0.1 * rng.normal(size=30)
    narrow = interval_score(center - half, center + half, y, 0.05)
    wide = interval_score(center - 2 * half, center + 2 * half, y, 0.05)
    assert wide == pytest.approx(2 * narrow)


def test_interval_score_errors():
    with pytest.raises(ScoringError):
        interval_score(1.0, 0.0, 0.5, 0.2)
    with pytest.raises(ScoringError):
        interval_score(0.0, 1.0, 0.5, 1.0)


def test_crps_gaussian_closed_form():
    assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(2 * stats.norm.pdf(0) - 1 / math.sqrt(math.pi))
    assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(0.23370, abs=1e-5)
    assert crps_gaussian(1.0, 0.0, 3.5) == pytest.approx(2.5)
    assert crps_gaussian(0.3, 0.7, -0.4) * 3 == pytest.approx(crps_gaussian(0.9, 2.1, -1.2))
    np.testing.assert_allclose(crps_gaussian([0.0, 1.0], [0.0, 0.0], [1.0, 1.0]), [1.0, 0.0])
    with pytest.raises(ScoringError):
        crps_gaussian(0.0, -1.0, 0.0)


def test_crps_samples():
    assert crps_samples([0.0, 2.0], 1.0) == pytest.approx(0.5)
    assert crps_samples([1.3] * 10, 1.3) == pytest.approx(0.0)
    with pytest.raises(ScoringError):
        crps_samples([1.0], 1.0)


def test_crps_samples_agrees_with_closed_form(rng):
    draws = rng.normal(0.4, 1.3, 1_000_000)
    assert crps_samples(draws, 1.0) == pytest.approx(crps_gaussian(0.4, 1.3, 1.0), abs=3e-3)


def test_crps_samples_matches_pairwise_definition(rng):
    x = rng.normal(size=200)
    pairwise = np.mean(np.abs(x - 0.3)) - 0.5 * np.mean(np.abs(x[:, None] - x[None, :]))
    assert crps_samples(x, 0.3) == pytest.approx(pairwise, abs=1e-12)
    draws = rng.normal(size=(200, 3))
    y = np.array([0.1, -0.2, 0.5])
    expected = np.mean([crps_samples(draws[:, j], y[j]) for j in range(3)])
    assert crps_ensemble(draws, y) == pytest.approx(expected, abs=1e-12)


def test_true_distribution_scores_better():
    rng = np.random.default_rng(12)
    better = 0
    for _ in range(200):
        y = rng.normal(size=50)
        better += np.mean(crps_gaussian(0.0, 1.0, y)) < np.mean(crps_gaussian(1.0, 1.0, y))
    assert better >= 180


def test_butterworth_constant():
    out = butterworth_lowpass(TimeSeries(1, np.full(500, 0.7)))
    np.testing.assert_allclose(out.values, 0.7, atol=1e-10)


def test_butterworth_passes_slow_and_removes_fast_cycles():
    years = np.arange(1, 2001)
    slow = butterworth_lowpass(TimeSeries(1, np.sin(2 * np.pi * years / 400.0))).values
    fast = butterworth_lowpass(TimeSeries(1, np.sin(2 * np.pi * years / 20.0))).values
    interior = slice(500, 1500)
    assert np.max(np.abs(slow[interior])) == pytest.approx(1.0, rel=0.01)
    assert np.max(np.abs(fast[interior])) < 1e-4


def test_butterworth_is_linear(rng):
    x, y = rng.normal(size=300), rng.normal(size=300)
    combined = butterworth_lowpass(TimeSeries(1, 2.0 * x - 3.0 * y)).values
    separate = 2.0 * butterworth_lowpass(TimeSeries(1, x)).values - 3.0 * butterworth_lowpass(TimeSeries(1, y)).values
    np.testing.assert_allclose(combined, separate, atol=1e-10)


def test_butterworth_errors():
    with pytest.raises(ScoringError):
        butterworth_lowpass(TimeSeries(1, np.ones(24)))
    with pytest.raises(ScoringError):
        butterworth_lowpass(TimeSeries(1, np.r_[np.ones(50), np.nan, np.ones(50)]))


def reconstruction_matching(observed: TimeSeries, sd=0.1):
    years = observed.years
    mean = observed.values
    sds = np.full(years.size, sd)
    bands = {
        level: (mean - stats.norm.ppf(0.5 + level / 2) * sds, mean + stats.norm.ppf(0.5 + level / 2) * sds)
        for level in (0.80, 0.95)
    }
    return Reconstruction(years, mean, sds, bands)


def test_validation_suite_perfect_mean(rng):
    observed = TimeSeries(1601, rng.normal(size=400), "anomaly")
    rec = reconstruction_matching(observed)
    report = validation_suite(rec, observed, (1850, 1899), (1900, 2000), model="WF", n_nests=8, method="SPCR")
    assert report.mse == 0.0
    assert report.is80 == pytest.approx(2 * stats.norm.ppf(0.9) * 0.1)
    assert report.crps == pytest.approx(crps_gaussian(0.0, 0.1, 0.0))
    assert report.mse_smoothed is None
    assert list(report.to_row()) == SCORE_COLUMNS


def test_validation_suite_with_draws_and_smoothing(rng):
    observed = TimeSeries(1601, rng.normal(size=400), "anomaly")
    rec = reconstruction_matching(observed)
    draws = observed.window(1850, 1899)[None, :] + rng.normal(0.0, 0.1, (500, 50))
    smoothed = butterworth_lowpass(observed).restrict(1650, 1899)
    report = validation_suite(rec, observed, (1850, 1899), (1900, 2000), draws=draws, smoothed_reference=smoothed)
    assert report.crps < 0.1
    assert report.mse_smoothed == pytest.approx(0.0, abs=1e-20)
    assert report.smoothed_window == (1650, 1899)
    table = score_table([report, report])
    assert table.columns.tolist() == SCORE_COLUMNS
    assert len(table) == 2


def test_validation_suite_ignores_missing_observations(rng):
    values = rng.normal(size=400)
    observed = TimeSeries(1601, values, "anomaly")
    rec = reconstruction_matching(observed)
    gappy = observed.with_values(np.where(np.arange(400) == 260, np.nan, values))
    report = validation_suite(rec, gappy, (1850, 1899), (1900, 2000), draws=np.tile(values[249:299], (5, 1)))
    assert report.mse == 0.0


def test_validation_suite_refuses_training_overlap(rng):
    observed = TimeSeries(1601, rng.normal(size=400))
    rec = reconstruction_matching(observed)
    with pytest.raises(ScoringError, match="overlaps"):
        validation_suite(rec, observed, (1850, 1950), (1900, 2000))
    with pytest.raises(ScoringError):
        validation_suite(rec, observed, (1500, 1599), (1900, 2000))


def test_mse_increases_with_noise(rng):
    truth = rng.normal(size=100)
    assert mse(truth, truth) == 0.0
    noisy = [mse(truth + rng.normal(0.0, 0.5, 100), truth) for _ in range(50)]
    assert np.mean(noisy) > 0.0
