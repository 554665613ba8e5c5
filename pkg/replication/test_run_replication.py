#!/usr/bin/env python3
"""
Tests for the replication runner: config layering, staged commands, the bundle manifest and exit codes
"""

import sys

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

import run_replication
from errors import ConfigError, DataError
from graph_autoencoder import load_model
from report_tables import file_sha256, read_manifest
from run_replication import (
    ANALYSES,
    ReplicationSuite,
    RunConfig,
    cmd_replicate,
    cmd_synth,
    cmd_train,
    load_run_config,
    main,
    parse_group_dims,
    stream_seed,
)

SMALL_RUN = {
    "cohort.n_per_group": "120",
    "template.rings": "12",
    "template.segments": "8",
    "train.epochs": "20",
    "train.batch_size": "32",
    "train.hidden": "32,16",
    "run.bootstrap": "100",
    "run.lasso_folds": "3",
    "run.lasso_lambdas": "20",
    "run.sweep_dims": "1,2",
    "run.grid_points": "15",
}


def small_config(**overrides) -> RunConfig:
    values = {**SMALL_RUN, **{k.replace("__", "."): v for k, v in overrides.items()}}
    return RunConfig.from_values(values).validate()


def hashes(root):
    return {entry["path"]: entry["sha256"] for entry in read_manifest(root)["files"]}


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    cmd_replicate(small_config(), out, verbose=False)
    return out


# -- configuration ------------------------------------------------------------

def test_defaults():
    config = load_run_config()
    assert config.run.seed == 0
    assert config.run.analyses == ANALYSES
    assert config.cohort.groups == ("male", "female")
    assert config.dims_for("male") == 2 and config.dims_for("female") == 3
    assert config.dgp["female"].kappa == 0.6 and config.dgp["male"].kappa == 0.0


def test_dgp_and_group_layers():
    config = RunConfig.from_values({"dgp.sigma_eps": "0.3", "group.male.kappa": "0.4"})
    assert config.dgp["male"].sigma_eps == 0.3 and config.dgp["female"].sigma_eps == 0.3
    assert config.dgp["male"].kappa == 0.4
    assert config.dgp["female"].kappa == 0.6


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="run.colour"):
        RunConfig.from_values({"run.colour": "blue"})
    with pytest.raises(ConfigError, match="plot"):
        RunConfig.from_values({"plot.width": "3"})
    with pytest.raises(ConfigError, match="group.other"):
        RunConfig.from_values({"group.other.kappa": "0.1"})


def test_validation():
    with pytest.raises(ConfigError, match="bootstrap"):
        RunConfig.from_values({"run.bootstrap": "50"}).validate()
    with pytest.raises(ConfigError, match="unknown analyses"):
        RunConfig.from_values({"run.analyses": "summary,plots"}).validate()
    with pytest.raises(ConfigError):
        RunConfig.from_values({"cohort.groups": "male,male"}).validate()


def test_group_dims():
    assert parse_group_dims("male:2, female:4") == {"male": 2, "female": 4}
    assert parse_group_dims("") == {}
    with pytest.raises(ConfigError):
        parse_group_dims("male=2")
    config = RunConfig.from_values({"train.group_dims": "male:1", "train.d": "5"})
    assert config.dims_for("male") == 1 and config.dims_for("female") == 5


def test_config_file_and_seed_override(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("run.seed=4\ncohort.n_per_group=12\n")
    assert load_run_config(path).run.seed == 4
    config = load_run_config(path, seed=9)
    assert config.run.seed == 9 and config.cohort.n_per_group == 12


def test_conf_lines_reload():
    config = small_config(run__seed="3", group__female__kappa="0.5")
    values = dict(line.split("=", 1) for line in config.conf_lines())
    again = RunConfig.from_values(values)
    assert again == config


def test_stream_seeds_are_distinct_and_stable():
    assert stream_seed(0, "male/lasso") == stream_seed(0, "male/lasso")
    assert stream_seed(0, "male/lasso") != stream_seed(0, "female/lasso")
    assert stream_seed(0, "male/lasso") != stream_seed(1, "male/lasso")


# -- commands ---------------------------------------------------------------

def test_synth_single_group(tmp_path):
    config = small_config(cohort__n_per_group="10", cohort__groups="female")
    bundle = cmd_synth(config, tmp_path, verbose=False)
    assert len(list((tmp_path / "meshes").glob("*.off"))) == 10
    assert (tmp_path / "cohort.csv").exists() and (tmp_path / "summary.csv").exists()
    cohort = pd.read_csv(tmp_path / "cohort.csv")
    summary = pd.read_csv(tmp_path / "summary.csv")
    row = summary[(summary["group"] == "all") & (summary["variable"] == "height")].iloc[0]
    assert_allclose(row["Mean"], cohort["height"].mean(), rtol=1e-9)
    assert row["N"] == 10
    assert bundle.statuses["summary"] == "ok"
    assert bundle.statuses["lasso"] == "pending"


def test_synth_rerun_is_byte_identical(tmp_path):
    config = small_config(cohort__n_per_group="8")
    cmd_synth(config, tmp_path / "a", verbose=False)
    cmd_synth(config, tmp_path / "b", verbose=False)
    assert hashes(tmp_path / "a") == hashes(tmp_path / "b")
    reseeded = small_config(cohort__n_per_group="8", run__seed="1")
    cmd_synth(reseeded, tmp_path / "c", verbose=False)
    assert hashes(tmp_path / "c")["cohort.csv"] != hashes(tmp_path / "a")["cohort.csv"]


def test_empty_analysis_set(tmp_path):
    bundle = cmd_replicate(small_config(run__analyses=""), tmp_path, verbose=False)
    manifest = read_manifest(tmp_path)
    assert [entry["path"] for entry in manifest["files"]] == ["run.conf"]
    assert set(manifest["analyses"].values()) == {"disabled"}
    assert bundle.statuses == manifest["analyses"]


def test_train_writes_models(tmp_path):
    config = small_config(cohort__n_per_group="40", run__analyses="summary")
    cmd_synth(config, tmp_path, verbose=False)
    bundle = cmd_train(config, tmp_path, verbose=False)
    model = load_model(tmp_path / "models" / "gae_female.gae")
    assert model.embedding_dim == 3 and model.hidden == (32, 16)
    assert model.embedding_mean is not None
    history = pd.read_csv(tmp_path / "train" / "history_male.csv")
    assert len(history) == 20
    assert not (tmp_path / "train" / "sweep_male.csv").exists()
    assert bundle.statuses["autoencoder"] == "disabled"


# -- full bundle ------------------------------------------------------------

def test_bundle_statuses_and_hashes(bundle_dir):
    manifest = read_manifest(bundle_dir)
    assert manifest["analyses"] == {name: "ok" for name in sorted(ANALYSES)}
    for entry in manifest["files"]:
        assert file_sha256(bundle_dir / entry["path"]) == entry["sha256"]
    paths = {entry["path"] for entry in manifest["files"]}
    for expected in ("cohort.csv", "run.conf", "summary.csv", "comparison.csv", "models/gae_male.gae",
                     "train/sweep_pooled.csv", "train/sweep_selection.csv", "lasso/cv_female.csv",
                     "tables/control_function_female.csv", "tables/proxy_male.csv",
                     "curves/kernel_weight_error_female.csv", "tables/reporting_crossing_male.csv"):
        assert expected in paths


def test_bundle_embeddings(bundle_dir):
    male = pd.read_csv(bundle_dir / "embeddings" / "embedding_male.csv")
    female = pd.read_csv(bundle_dir / "embeddings" / "embedding_female.csv")
    assert list(male.columns) == ["id", "P1_raw", "P2_raw", "P1", "P2"]
    assert [c for c in female.columns if c.startswith("P") and "_" not in c] == ["P1", "P2", "P3"]
    assert_allclose(female["P2"].std(ddof=1), 1.0, rtol=1e-9)
    alignment = pd.read_csv(bundle_dir / "embeddings" / "alignment_male.csv")
    assert sorted(alignment["component"]) == [1, 2]
    assert set(alignment["sign"]).issubset({-1.0, 1.0})


def test_bundle_control_function_matches_two_sls(bundle_dir):
    for group in ("male", "female"):
        row = pd.read_csv(bundle_dir / "tables" / f"cf_summary_{group}.csv").iloc[0]
        assert_allclose(row["beta_cf"], row["beta_2sls"], rtol=1e-8, atol=1e-10)
        assert row["verdict"] in ("endogenous", "no evidence of endogeneity")


def test_bundle_regression_tables(bundle_dir):
    table = pd.read_csv(bundle_dir / "tables" / "income_height_weight_male.csv")
    assert set(table["model"]) == {"reported_height", "measured_height", "reported_height_weight",
                                   "measured_height_weight"}
    footer = table[table["variable"] == "n"]
    assert (footer["coefficient"] == 120).all()
    proxy = pd.read_csv(bundle_dir / "tables" / "proxy_female.csv")
    assert list(dict.fromkeys(proxy["model"])) == [
        "none", "fitness", "fitness+car_size", "fitness+car_size+birth_region",
        "fitness+car_size+birth_region+survey_site",
    ]
    comparison = pd.read_csv(bundle_dir / "comparison.csv")
    assert set(comparison["approach"]) == {"conventional", "deep-learned"}
    assert (comparison["lower90"] <= comparison["upper90"]).all()


def test_bundle_lasso_selection(bundle_dir):
    selection = pd.read_csv(bundle_dir / "lasso" / "selection_male.csv").iloc[0]
    assert selection["lambda_1se"] >= selection["lambda_min"]
    cv = pd.read_csv(bundle_dir / "lasso" / "cv_male.csv")
    assert len(cv) == 20


# -- command line -------------------------------------------------------------

def test_main_reports_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.conf"
    bad.write_text("run.bogus=1\n")
    code = main(["synth", "--config", str(bad), "--out", str(tmp_path / "out"), "--quiet"])
    assert code == 2
    assert "❌ config" in capsys.readouterr().err


def test_main_reports_missing_cohort(tmp_path, capsys):
    out = tmp_path / "empty"
    code = main(["regress", "--out", str(out), "--quiet"])
    assert code == 3
    assert "❌ reporting_errors" in capsys.readouterr().err
    assert read_manifest(out)["analyses"]["reporting_errors"] == "failed: reporting_errors"


def singular_solve(*args, **kwargs):
    return np.linalg.solve(np.zeros((2, 2)), np.ones(2))


def test_singular_system_in_a_stage_exits_numerical(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(run_replication, "quantile_fan", singular_solve)
    conf = tmp_path / "small.conf"
    conf.write_text("cohort.n_per_group=120\ntemplate.rings=12\ntemplate.segments=8\nrun.grid_points=15\n"
                    "run.analyses=summary,reporting_errors\nrun.bootstrap=100\n")
    out = tmp_path / "out"
    code = main(["replicate", "--config", str(conf), "--out", str(out), "--quiet"])
    assert code == 4
    assert "❌ reporting_errors: LinAlgError" in capsys.readouterr().err
    manifest = read_manifest(out)
    assert manifest["analyses"]["reporting_errors"] == "failed: reporting_errors"
    assert manifest["analyses"]["summary"] == "ok"
    assert "cohort.csv" in {entry["path"] for entry in manifest["files"]}


def test_library_value_errors_map_to_data_errors(tmp_path):
    suite = ReplicationSuite(small_config(run__analyses="summary"), tmp_path, verbose=False)

    def missing_column():
        pd.DataFrame({"a": [1.0]})["height"]

    with pytest.raises(DataError, match="KeyError") as info:
        suite.run_stage("summary", missing_column, analysis="summary")
    assert info.value.exit_code == 3 and info.value.stage == "summary"
    assert isinstance(info.value.__cause__, KeyError)
    assert read_manifest(tmp_path)["analyses"]["summary"] == "failed: summary"


def test_main_success(tmp_path):
    conf = tmp_path / "small.conf"
    conf.write_text("cohort.n_per_group=6\nrun.analyses=summary\n")
    assert main(["synth", "--config", str(conf), "--out", str(tmp_path / "out"), "--quiet"]) == 0
    assert np.isfinite(pd.read_csv(tmp_path / "out" / "summary.csv")["Mean"]).all()


if __name__ == "__main__":
    print("🧪 Testing the replication runner")
    print("=" * 50)
    sys.exit(pytest.main([__file__, "-v"]))
