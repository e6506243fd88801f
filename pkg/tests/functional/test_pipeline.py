"""
End-to-end runs on synthetic worlds. Slow; run with `pytest -m functional`.
"""

import json

import numpy as np
import pandas as pd
import pytest

import paleorecon as pr
from paleorecon import datafiles
from paleorecon.mcmc import effective_sample_size

pytestmark = pytest.mark.functional


@pytest.fixture(scope="module")
def wf_world(tmp_path_factory):
    world = pr.generate(pr.PseudoConfig(proxies_per_nest=4, snr_range=(1.0, 2.0)), seed=21)
    paths = world.write(tmp_path_factory.mktemp("wf"))
    return world, paths


def run_config(paths, out, **overrides):
    settings = dict(
        proxies=str(paths["proxies"]),
        forcings=str(paths["forcings"]),
        temperature=str(paths["temperature"]),
        smoothed_reference=str(paths["smoothed_reference"]),
        output_dir=str(out),
        threads=2,
        crps_draws=1000,
        seed=5,
    )
    settings.update(overrides)
    return pr.RunConfig(**settings)


def replicate(seed, directory, pseudo, **overrides):
    world = pr.generate(pseudo, seed=seed)
    paths = world.write(directory / f"world{seed}")
    return world, paths, run_config(paths, directory / f"out{seed}", seed=seed, **overrides)


def test_full_wf_pipeline(wf_world, tmp_path):
    world, paths = wf_world
    config = run_config(paths, tmp_path, methods="SPCR,PCR")
    assert pr.run_pipeline(config) == 0

    scores = pd.read_csv(tmp_path / "scores.csv")
    assert scores["method"].tolist() == ["SPCR", "PCR"]
    assert (scores["n_nests"] == 8).all()
    assert np.isfinite(scores[["is80", "is95", "crps", "mse", "mse_smoothed"]].to_numpy()).all()

    folder = tmp_path / "WF_N8_SPCR"
    reconstruction = pd.read_csv(folder / "reconstruction.csv")
    assert reconstruction["year"].tolist() == list(range(1, 2001))
    covered = (reconstruction["q025"] <= world.temperature.values) & (world.temperature.values <= reconstruction["q975"])
    assert covered.mean() > 0.8

    coefficients = pd.read_csv(folder / "coefficients.csv")
    assert len(coefficients) == 4 + 16
    assert (tmp_path / "rp_correlations.csv").exists()

    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert "WF_N8_PCR/reconstruction.svg" in manifest["artifacts"]
    assert set(manifest["timings"]) >= {"REDUCE", "FIT", "RECONSTRUCT", "VALIDATE", "EXPORT"}


def test_rerun_is_reproducible(wf_world, tmp_path):
    _, paths = wf_world
    for name in ("a", "b"):
        assert pr.run_pipeline(run_config(paths, tmp_path / name, n_nests=1, methods="PCR"), until="reconstruct") == 0
    first = (tmp_path / "a" / "WF_N1_PCR" / "reconstruction.csv").read_bytes()
    assert first == (tmp_path / "b" / "WF_N1_PCR" / "reconstruction.csv").read_bytes()


@pytest.mark.parametrize("kind", ["NF", "Mixed"])
def test_spline_models(kind, tmp_path):
    world = pr.generate(pr.PseudoConfig(kind=kind, proxies_per_nest=3, snr_range=(1.0, 2.0)), seed=8)
    paths = world.write(tmp_path / "world")
    config = run_config(paths, tmp_path / "out", kind=kind, n_nests=1, methods="SIR", k_spline=60)
    assert pr.run_pipeline(config, until="validate") == 0
    coefficients = pd.read_csv(tmp_path / "out" / f"{kind}_N1_SIR" / "coefficients.csv")
    expected = 61 + 2 if kind == "NF" else 4 + 60 + 2
    assert len(coefficients) == expected
    basis = pd.read_csv(tmp_path / "out" / f"{kind}_N1_SIR" / "basis.csv")
    assert basis["k"].max() == 60


def test_engine_comparison(tmp_path):
    config = pr.PseudoConfig(first_year=1501, n_nests=2, proxies_per_nest=4, snr_range=(1.5, 2.0))
    world = pr.generate(config, seed=13)
    paths = world.write(tmp_path / "world")
    run = run_config(
        paths, tmp_path / "out", n_nests=1, methods="PCR", latent=(1501, 2000), gibbs_iterations=4000, gibbs_burn_in=1000
    )
    comparison = pr.compare_engines(run)

    table = comparison.coefficients.set_index("parameter")
    for name in ("beta0", "beta1", "beta2", "beta3", "alpha0[7]", "alpha1[7]"):
        row = table.loc[name]
        assert abs(row["nested_mean"] - row["gibbs_mean"]) < max(row["gibbs_sd"], row["nested_sd"]) + 0.05
        assert 1 / 3 < row["width_ratio"] < 3
    assert comparison.timing["engine"].tolist() == ["nested-laplace", "gibbs"]
    for name in ("compare_coefficients.csv", "compare_timing.csv", "compare_densities.csv", "compare_coefficients.svg"):
        assert (tmp_path / "out" / name).exists()


def test_validation_window_truth_inside_band(wf_world, tmp_path):
    world, paths = wf_world
    api = pr.ReconstructionAPI(run_config(paths, tmp_path, n_nests=1, methods="SPCR")).load()
    rec = api.reconstruct("SPCR").window(1850, 1899)
    lower, upper = rec.interval(0.95)
    truth = world.temperature.window(1850, 1899)
    assert np.mean((lower <= truth) & (truth <= upper)) > 0.8
    draws = api.fit("SPCR").window_draws((1850, 1899), 500, seed=1)
    assert draws.shape == (500, 50)
    written = datafiles.write_reconstruction(tmp_path / "window.csv", rec)
    assert pd.read_csv(written)["year"].tolist() == list(range(1850, 1900))


def test_engines_agree_on_a_full_length_world(tmp_path):
    world = pr.generate(pr.PseudoConfig(proxies_per_nest=3, snr_range=(1.5, 2.0)), seed=13)
    paths = world.write(tmp_path / "world")
    config = run_config(
        paths, tmp_path / "out", n_nests=1, methods="PCR", gibbs_iterations=5000, gibbs_burn_in=1000
    )
    nested = pr.ReconstructionAPI(config).load().fit("PCR")
    gibbs = pr.ReconstructionAPI(config.replace(engine="gibbs")).load().fit("PCR")
    assert nested.lgm.latent_years[0] == 1

    for name in ("beta1", "beta2", "beta3"):
        draws = gibbs.chain.column(name)
        sd = draws.std()
        mc_error = sd / np.sqrt(effective_sample_size(draws))
        gap = abs(nested.nested.marginal(name).mean() - draws.mean())
        assert gap < 0.1 * sd + 3 * mc_error
    assert nested.seconds > 0 and gibbs.seconds > 0


ATTRIBUTION_WORLD = pr.PseudoConfig(beta=(0.0, 0.0, -0.3, 2.0), proxies_per_nest=3, snr_range=(1.0, 2.0))


@pytest.fixture(scope="module")
def single_nest_replicates(tmp_path_factory):
    """Fifty WF worlds without a solar response, each fitted with one reduced proxy."""
    directory = tmp_path_factory.mktemp("replicates")
    results = []
    for seed in range(50):
        world, _, config = replicate(seed, directory, ATTRIBUTION_WORLD, n_nests=1, methods="PCR")
        api = pr.ReconstructionAPI(config).load()
        lower, upper = api.reconstruct("PCR").interval(0.95)
        truth = world.temperature.values
        coverage = np.mean((lower <= truth) & (truth <= upper))
        table = api.fit("PCR").coefficient_table().set_index("parameter")
        results.append((coverage, table))
    return results


def test_bands_cover_the_truth_across_replicates(single_nest_replicates):
    coverage = [c for c, _ in single_nest_replicates]
    assert np.mean(coverage) >= 0.85


def test_greenhouse_forcing_is_attributed_and_solar_is_not(single_nest_replicates):
    tables = [t for _, t in single_nest_replicates]
    co2_excludes_zero = np.mean([bool(t.loc["beta3", "excludes_zero"]) for t in tables])
    solar_covers_zero = np.mean([not bool(t.loc["beta1", "excludes_zero"]) for t in tables])
    co2_positive = np.mean([t.loc["beta3", "mean"] > 0 for t in tables])
    assert co2_excludes_zero >= 0.9
    assert solar_covers_zero >= 0.9
    assert co2_positive >= 0.9


@pytest.mark.parametrize("method", ["SPCR", "PCR"])
def test_all_nests_beat_the_longest_nest_alone(method, tmp_path):
    pseudo = pr.PseudoConfig(proxies_per_nest=3, snr_range=(1.0, 2.0))
    wins, replicates = 0, 10
    for seed in range(replicates):
        _, _, config = replicate(seed, tmp_path, pseudo, methods=method)
        eight = pr.ReconstructionAPI(config).load().validate(method)
        one = pr.ReconstructionAPI(config.replace(n_nests=1)).load().validate(method)
        assert (eight.n_nests, one.n_nests) == (8, 1)
        wins += eight.crps < one.crps and eight.is80 < one.is80
    assert wins >= 0.8 * replicates
