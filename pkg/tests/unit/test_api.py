import json
from unittest.mock import patch

import numpy as np
import pytest

import paleorecon as pr
from paleorecon import datafiles
from paleorecon.timeseries import TimeSeries


@pytest.fixture
def config(world_files, tmp_path):
    return pr.RunConfig(
        proxies=str(world_files["proxies"]),
        forcings=str(world_files["forcings"]),
        temperature=str(world_files["temperature"]),
        output_dir=str(tmp_path / "out"),
        methods="PCR",
        n_nests=1,
        latent=(1501, 2000),
        seed=1,
    )


def test_stages_need_loaded_data():
    api = pr.ReconstructionAPI(pr.RunConfig())
    with pytest.raises(pr.PaleoReconException, match="load"):
        api.reduce("PCR")


def test_missing_input_is_a_config_failure(config, tmp_path):
    api = pr.ReconstructionAPI(config.replace(proxies=str(tmp_path / "absent.csv")))
    with pytest.raises(pr.StageError) as excinfo:
        api.load()
    assert excinfo.value.exit_code == 2
    assert excinfo.value.stage == "CONFIG"


def test_incomplete_calibration_temperature(config, small_world, tmp_path):
    values = small_world.observed.values.copy()
    values[100] = np.nan
    path = datafiles.write_temperature(tmp_path / "gappy.csv", TimeSeries(1850, values))
    with pytest.raises(pr.StageError) as excinfo:
        pr.ReconstructionAPI(config.replace(temperature=str(path))).load()
    assert excinfo.value.exit_code == 3


def test_load_and_reduce(config):
    api = pr.ReconstructionAPI(config).load()
    assert set(api.timings) >= {"CONFIG", "INGEST", "SCREEN"}
    nests = api.active_nests()
    assert len(nests) == 1
    assert nests[0].index == 7

    rps = api.reduce("PCR")
    assert list(rps) == [7]
    assert api.reduce(pr.ReductionMethod.PCR) is rps
    assert rps[7].series.end_year == 2000
    assert api.spline_basis() is None


def test_fit_failure_maps_to_fit_code(config):
    api = pr.ReconstructionAPI(config).load()
    with patch("paleorecon.api.fit_nested_laplace", side_effect=np.linalg.LinAlgError("not positive definite")):
        with pytest.raises(pr.StageError) as excinfo:
            api.fit("PCR")
    assert excinfo.value.exit_code == 6


def test_gibbs_needs_single_nest_wf(config):
    api = pr.ReconstructionAPI(config.replace(engine="gibbs", kind="Mixed", k_spline=20)).load()
    with pytest.raises(pr.StageError, match="Gibbs"):
        api.fit("PCR")


def test_pipeline_until_reduce(config):
    assert pr.run_pipeline(config, until="reduce") == 0
    out = config.output_path
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == 0
    assert manifest["status_name"] == "OK"
    assert manifest["config"]["methods"] == ["PCR"]
    assert "WF_N1_PCR/reduced_proxies.csv" in manifest["artifacts"]
    assert "numpy" in manifest["versions"]
    assert not (out / "WF_N1_PCR" / "coefficients.csv").exists()


def test_pipeline_returns_stage_code(config, tmp_path):
    assert pr.run_pipeline(config.replace(forcings=str(tmp_path / "absent.csv"))) == 2


def test_unknown_stage(config):
    api = pr.ReconstructionAPI(config).load()
    with pytest.raises(pr.PaleoReconException, match="Unknown stage"):
        api.export("everything")


def test_compare_engines_needs_one_nest(config):
    with pytest.raises(pr.StageError) as excinfo:
        pr.compare_engines(config.replace(n_nests=8))
    assert excinfo.value.exit_code == 9
    assert pr.error_dict[excinfo.value.exit_code] == "COMPARE"


def test_screen_drops_proxy_ending_before_calibration_end(config, small_world, tmp_path):
    series = small_world.proxy_series()
    donor = series[-1]
    short = TimeSeries(donor.start_year, donor.window(donor.start_year, 1996), "short")
    path = datafiles.write_proxies(tmp_path / "with-short.csv", list(series) + [short])

    api = pr.ReconstructionAPI(config.replace(proxies=str(path))).load()
    names = [p.name for p in api.proxies]
    assert "short" not in names
    assert len(names) > 0
    assert sum(len(n.members) for n in api.nests) == len(names)
