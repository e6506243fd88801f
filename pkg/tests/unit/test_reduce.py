import numpy as np
import pytest

from paleorecon.const import ReductionMethod
from paleorecon.exceptions import ReductionError
from paleorecon.reduce import (
    ReductionModel,
    build_reduced_proxy,
    cv_select,
    fit_reduction,
    first_crossing,
    lambda_grid,
    lambda_max,
    lasso_fit,
    lasso_kkt_residual,
    lasso_model,
    lasso_path,
    pcr_fit,
    pcr_select,
    reduce_all,
    reduce_nest,
    rp_correlation_matrix,
    sir_directions,
    sir_fit,
    spcr_fit,
    spls_fit,
)
from paleorecon.timeseries import TimeSeries, assign_nests


def orthonormal_design():
    X = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    return X, X @ np.array([2.0, 0.5])


def test_lasso_orthonormal_soft_threshold():
    X, y = orthonormal_design()
    np.testing.assert_allclose(lasso_fit(X, y, 1.0), [1.0, 0.0], atol=1e-12)


def test_lasso_is_zero_at_lambda_max(rng):
    X = rng.normal(size=(60, 8))
    y = X[:, 0] + rng.normal(size=60)
    assert not np.any(lasso_fit(X, y, lambda_max(X, y)))


def test_lasso_without_penalty_is_least_squares(rng):
    X = rng.normal(size=(80, 5))
    y = X @ np.array([1.0, -2.0, 0.0, 0.5, 3.0]) + rng.normal(size=80)
    ols, *_ = np.linalg.lstsq(X, y - y.mean(), rcond=None)
    np.testing.assert_allclose(lasso_fit(X, y, 0.0), ols, atol=1e-6)


def test_lasso_solution_satisfies_kkt(rng):
    X = rng.normal(size=(100, 20))
    y = X[:, :3] @ np.array([2.0, -1.0, 0.5]) + rng.normal(size=100)
    lam = 0.1
    beta = lasso_fit(X, y, lam)
    assert lasso_kkt_residual(X, y, beta, lam) < 1e-8


def test_lasso_rejects_bad_input():
    X, y = orthonormal_design()
    with pytest.raises(ReductionError):
        lasso_fit(X, y, -1.0)
    X[0, 0] = np.nan
    with pytest.raises(ReductionError):
        lasso_fit(X, y, 1.0)


def test_lasso_model_recovers_support():
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(200, 50))
        y = 3.0 * X[:, 4] - 2.0 * X[:, 17] + rng.normal(0.0, 0.5, 200)
        model = lasso_model(X, y, seed=seed)
        top = set(np.argsort(-np.abs(model.coef))[:2].tolist())
        hits += top == {4, 17}
    assert hits >= 9


def test_lasso_path_norm_grows_as_penalty_falls(rng):
    X = rng.normal(size=(80, 15))
    y = X[:, :4] @ np.array([1.5, -1.0, 0.7, 0.3]) + rng.normal(size=80)
    grid = lambda_grid(X, y, size=20)
    norms = np.abs(lasso_path(X, y, grid)).sum(axis=1)
    assert norms[0] == 0.0
    assert np.all(np.diff(norms) >= -1e-9)


def ridge_predictions(X_tr, y_tr, X_te, grid):
    means = X_tr.mean(axis=0)
    Xc = X_tr - means
    out = []
    for alpha in grid:
        coef = np.linalg.solve(Xc.T @ Xc + alpha * np.eye(Xc.shape[1]), Xc.T @ (y_tr - y_tr.mean()))
        out.append(y_tr.mean() + (X_te - means) @ coef)
    return np.array(out)


def test_cv_select_is_reproducible_for_a_seed(rng):
    X = rng.normal(size=(90, 6))
    y = X @ rng.normal(size=6) + rng.normal(size=90)
    grid = [100.0, 10.0, 1.0, 0.1]
    first = cv_select(X, y, grid, ridge_predictions, seed=7)
    second = cv_select(X, y, grid, ridge_predictions, seed=7)
    assert first.value == second.value
    np.testing.assert_array_equal(first.errors, second.errors)
    other = cv_select(X, y, grid, ridge_predictions, seed=8)
    assert not np.array_equal(first.errors, other.errors)

    a, b = lasso_model(X, y, seed=3), lasso_model(X, y, seed=3)
    np.testing.assert_array_equal(a.coef, b.coef)
    assert a.hyperparameters == b.hyperparameters


def test_lasso_on_unrelated_response_is_near_empty():
    small = 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        X = rng.normal(size=(100, 10))
        y = rng.normal(size=100)
        grid = lambda_grid(X, y)
        norms = np.abs(lasso_path(X, y, grid)).sum(axis=1)
        model = lasso_model(X, y, seed=seed, grid=grid)
        small += np.abs(model.coef).sum() <= np.percentile(norms, 10)
    assert small >= 16


def test_cv_select_single_value_and_empty_grid(rng):
    X = rng.normal(size=(30, 3))
    y = rng.normal(size=30)
    never = lambda *args: pytest.fail("single-value grids need no fitting")
    assert cv_select(X, y, [0.3], never).value == 0.3
    with pytest.raises(ReductionError):
        cv_select(X, y, [], never)


def test_cv_select_ties_go_to_first_entry(rng):
    X = rng.normal(size=(40, 2))
    y = rng.normal(size=40)

    def same_predictions(X_tr, y_tr, X_te, grid):
        return np.tile(np.full(X_te.shape[0], y_tr.mean()), (len(grid), 1))

    assert cv_select(X, y, ["simple", "complex"], same_predictions, folds=5).index == 0


def test_spls_without_sparsity_follows_covariance(rng):
    X = rng.normal(size=(50, 6))
    y = X @ rng.normal(size=6) + rng.normal(size=50)
    direction = spls_fit(X, y, 0.0, 1).directions[:, 0]
    expected = (X - X.mean(axis=0)).T @ (y - y.mean())
    cosine = direction @ expected / np.linalg.norm(expected)
    assert abs(cosine) == pytest.approx(1.0, abs=1e-12)


def test_spls_high_threshold_keeps_one_column(rng):
    X = rng.normal(size=(80, 6))
    y = 3.0 * X[:, 2] + 0.1 * rng.normal(size=80)
    direction = spls_fit(X, y, 0.99, 1).directions[:, 0]
    assert np.flatnonzero(direction).tolist() == [2]


def test_spls_single_column_is_simple_regression(rng):
    x = rng.normal(size=40)
    y = 0.7 * x + rng.normal(size=40)
    model = spls_fit(x[:, None], y, 0.0, 1)
    slope, intercept = np.polyfit(x, y, 1)
    np.testing.assert_allclose(model.predict(x[:, None]), intercept + slope * x, atol=1e-10)


def test_spls_rejects_zero_components(rng):
    with pytest.raises(ReductionError):
        spls_fit(rng.normal(size=(10, 3)), rng.normal(size=10), 0.5, 0)


def test_sir_single_index_direction():
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        beta = rng.normal(size=10)
        beta /= np.linalg.norm(beta)
        X = rng.normal(size=(500, 10))
        y = np.tanh(X @ beta) + 0.1 * rng.normal(size=500)
        direction = sir_directions(X, y, 10).directions[:, 0]
        hits += abs(direction @ beta) > 0.9
    assert hits >= 9


def test_sir_leading_eigenvalue_under_permutation_null():
    below = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(200, 5))
        y = rng.normal(size=200)
        observed = sir_directions(X, y, 10).eigenvalues[0]
        null = [sir_directions(X, rng.permutation(y), 10).eigenvalues[0] for _ in range(40)]
        below += observed < np.percentile(null, 95)
    assert below >= 16


def test_sir_slicing_errors(rng):
    X = rng.normal(size=(20, 3))
    y = rng.normal(size=20)
    with pytest.raises(ReductionError):
        sir_directions(X, y, 1)
    with pytest.raises(ReductionError, match="at most"):
        sir_directions(X[:5], y[:5], 4)


def test_sir_fit_records_retained_directions(rng):
    X = rng.normal(size=(100, 5))
    y = X[:, 0] + 0.1 * rng.normal(size=100)
    model = sir_fit(X, y, 10)
    assert model.method is ReductionMethod.SIR
    assert model.hyperparameters["slices"] == 10
    assert model.r2 > 0.9


def test_first_crossing():
    assert first_crossing([0.50, 0.72, 0.75], 0.70) == 2
    assert first_crossing([0.50, 0.60], 0.70) is None


def test_pcr_first_component_response(rng):
    X = rng.normal(size=(100, 5)) * np.array([5.0, 3.0, 2.0, 1.0, 0.5])
    Xc = X - X.mean(axis=0)
    _, _, Vt = np.linalg.svd(Xc, full_matrices=False)
    y = Xc @ Vt[0]
    selection = pcr_select(X, y)
    assert selection.k == 1
    assert not selection.flagged


def test_pcr_noise_is_flagged():
    flagged = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        flagged += pcr_fit(rng.normal(size=(100, 5)), rng.normal(size=100)).flagged
    assert flagged >= 9


def test_pcr_needs_three_samples():
    with pytest.raises(ReductionError):
        pcr_select(np.ones((2, 2)), np.array([1.0, 2.0]))


def test_spcr_identical_columns(rng):
    y = rng.normal(size=60)
    model = spcr_fit(np.column_stack([y] * 5), y)
    assert model.hyperparameters["columns"] == 5
    assert model.hyperparameters["components"] == 1
    np.testing.assert_allclose(model.predict(np.column_stack([y] * 5)), y, atol=1e-10)


def test_spcr_planted_signal(rng):
    n = 100
    signal = rng.normal(size=n)
    X = rng.normal(size=(n, 100))
    X[:, :5] = signal[:, None] + 0.75 * rng.normal(size=(n, 5))
    model = spcr_fit(X, signal)
    assert np.count_nonzero(model.coef[:5]) >= 4


def test_spcr_no_survivor(rng):
    with pytest.raises(ReductionError):
        spcr_fit(rng.normal(size=(100, 20)), rng.normal(size=100), thresholds=[0.99])


def single_proxy_nest(rng, values=None):
    values = rng.normal(size=250) if values is None else values
    proxy = TimeSeries(1751, values, "p")
    return proxy, assign_nests([proxy])[7]


def test_rp_of_perfect_proxy_is_standardized_proxy(rng):
    proxy, nest = single_proxy_nest(rng)
    rp = reduce_nest(nest, proxy, ReductionMethod.PCR)
    cal = proxy.window(1900, 2000)
    expected = (proxy.values - cal.mean()) / cal.std()
    np.testing.assert_allclose(rp.series.values, expected, atol=1e-8)
    assert rp.series.start_year == 1751
    assert rp.r2 == pytest.approx(1.0)


def test_rp_is_the_linear_map_of_the_panel(rng):
    a = TimeSeries(1751, rng.normal(size=250), "a")
    b = TimeSeries(1751, rng.normal(size=250), "b")
    nest = assign_nests([a, b])[7]
    model = ReductionModel(ReductionMethod.LASSO, np.array([0.5, -1.0]), 0.2, n_predictors=2)
    target = TimeSeries(1900, rng.normal(size=101))
    rp = build_reduced_proxy(nest, model, target)

    Z = (nest.panel_matrix() - nest.column_means) / nest.column_sds
    raw = 0.2 + Z @ np.array([0.5, -1.0])
    cal = raw[149:]
    np.testing.assert_allclose(rp.series.values, (raw - cal.mean()) / cal.std(), atol=1e-10)
    coef, intercept = rp.model.original_coefficients()
    np.testing.assert_allclose(intercept + nest.panel_matrix() @ coef, raw, atol=1e-10)


def test_rp_leaves_year_without_observations_missing(rng):
    values = rng.normal(size=250)
    values[30] = np.nan
    proxy, nest = single_proxy_nest(rng, values)
    rp = reduce_nest(nest, TimeSeries(1751, np.nan_to_num(values)), ReductionMethod.PCR)
    assert np.isnan(rp.series.window(1781, 1781)[0])
    assert np.count_nonzero(rp.series.missing) == 1


def test_rp_of_nest_whose_members_start_late(rng):
    signal = rng.normal(size=500)
    proxies = [
        TimeSeries(start, signal[start - 1501 :] + 0.5 * rng.normal(size=2001 - start), f"p{start}")
        for start in (1520, 1560, 1600)
    ]
    nest = assign_nests(proxies)[6]
    assert nest.interval == (1501, 1750)
    assert nest.observation_window == (1520, 2000)

    rp = reduce_nest(nest, TimeSeries(1501, signal), ReductionMethod.PCR)
    assert rp.series.start_year == 1520
    assert rp.series.end_year == 2000
    assert not rp.series.missing.any()
    assert np.corrcoef(rp.series.values, signal[19:])[0, 1] > 0.8


def test_rp_correlation_matrix_is_symmetric(rng):
    signal = rng.normal(size=250)
    proxies = [TimeSeries(1751, signal + rng.normal(size=250), f"p{i}") for i in range(6)]
    nests = assign_nests(proxies)
    target = TimeSeries(1751, signal)
    methods = [ReductionMethod.PCR, ReductionMethod.SIR, ReductionMethod.LASSO]
    rps = reduce_all(nests, target, methods, seed=1, n_jobs=2)
    assert sorted(rps) == [(8, m) for m in sorted(methods)]
    matrix = rp_correlation_matrix({m: rps[(8, m)] for m in methods}).to_numpy()
    np.testing.assert_allclose(matrix, matrix.T)
    np.testing.assert_allclose(np.diag(matrix), 1.0)


@pytest.mark.parametrize("method", list(ReductionMethod))
def test_predictions_ignore_column_order(method):
    rng = np.random.default_rng(31)
    X = rng.normal(size=(120, 8))
    y = X @ np.array([1.0, -0.8, 0.6, 0.0, 0.0, 0.4, 0.0, 0.2]) + 0.5 * rng.normal(size=120)
    perm = np.array([5, 2, 7, 0, 3, 6, 1, 4])
    model = fit_reduction(method, X, y, seed=2)
    shuffled = fit_reduction(method, X[:, perm], y, seed=2)
    np.testing.assert_allclose(shuffled.predict(X[:, perm]), model.predict(X), atol=1e-6)
    np.testing.assert_allclose(shuffled.coef, model.coef[perm], atol=1e-6)


def test_every_method_tracks_the_signal():
    methods = list(ReductionMethod)
    positive = {m: 0 for m in methods}
    pairwise = 0
    replicates = 11
    for seed in range(replicates):
        rng = np.random.default_rng(seed)
        signal = rng.normal(size=250)
        proxies = [TimeSeries(1751, signal + 0.5 * rng.normal(size=250), f"p{i}") for i in range(6)]
        rps = reduce_all(assign_nests(proxies), TimeSeries(1751, signal), methods, seed=seed)
        for m in methods:
            positive[m] += np.corrcoef(rps[(8, m)].series.values, signal)[0, 1] > 0
        matrix = rp_correlation_matrix({m: rps[(8, m)] for m in methods}).to_numpy()
        pairwise += bool(np.all(matrix > 0))
    assert all(count > replicates // 2 for count in positive.values())
    assert pairwise > replicates // 2
