"""End-to-end harness: config parsing, artifacts, staging, exit codes."""

import json
import shutil

import pytest

from valencelab.cli import (ExperimentConfig, _funnel_counts,
                            _parse_funnel_rows, _read_csv, _rebuild_store,
                            load_experiment_config, main, run_experiment)
from valencelab.errors import ConfigurationError
from valencelab.syncsec import SocketServer

SMALL_COHORT = """\
n_entities = 6
n_no_demographics = 1
n_low_rate = 1
n_single_class = 1
n_skewed = 1
n_interaction = 1
n_band_only = 1
days = 12
"""

ARTIFACTS = ("cohort.jsonl", "events.jsonl", "faults.txt", "store.jsonl",
             "funnel.csv", "models.csv", "models.json", "stats.md",
             "boxplot_f1.csv", "boxplot_mcc.csv", "summary.md",
             "run_hash.txt")


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cohort_path = root / "cohort_small.cfg"
    cohort_path.write_text(SMALL_COHORT)
    config = ExperimentConfig(seed=7, out=str(root / "out"),
                              cohort=str(cohort_path), budget=5)
    return run_experiment(config), cohort_path


# -- configuration ---------------------------------------------------------------


def test_config_validation():
    assert ExperimentConfig(models="gbt, mlp").models == ("gbt", "mlp")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(models="gbt,forest")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(models="")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(metric="accuracy")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(budget=4)
    with pytest.raises(ConfigurationError):
        ExperimentConfig(step_s=0.0)


def test_config_from_mapping_and_file(tmp_path):
    got = ExperimentConfig.from_mapping({
        "seed": "11", "budget": "6", "step_s": "450.0",
        "require_demographics": "false", "models": "dummy,logreg",
        "out": "elsewhere"})
    assert (got.seed, got.budget, got.step_s) == (11, 6, 450.0)
    assert got.require_demographics is False
    assert got.models == ("dummy", "logreg")
    assert got.out == "elsewhere"
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_mapping({"budget": "lots"})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_mapping({"require_demographics": "yes"})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_mapping({"n_trees": "9"})
    path = tmp_path / "exp.cfg"
    path.write_text("seed = 3\nbudget = 8\n")
    assert load_experiment_config(path).seed == 3
    with pytest.raises(ConfigurationError):
        load_experiment_config(tmp_path / "missing.cfg")


def test_rules_mirror_config():
    config = ExperimentConfig(min_reports=9, require_demographics=False)
    rules = config.rules()
    assert rules.min_reports == 9
    assert rules.require_demographics is False


# -- pipeline artifacts ----------------------------------------------------------


def test_pipeline_writes_every_artifact(small_run):
    result, _ = small_run
    for name in ARTIFACTS:
        assert (result.out_dir / name).is_file(), name
    digest = (result.out_dir / "run_hash.txt").read_text().strip()
    assert digest == result.digest and len(digest) == 64


def test_small_cohort_funnel(small_run):
    result, _ = small_run
    assert result.funnel_counts == {"total": 6, "with_demographics": 5,
                                    "eligible": 2}
    rows = _parse_funnel_rows(_read_csv(result.out_dir / "funnel.csv"))
    assert _funnel_counts(rows) == result.funnel_counts
    reasons = {r["entity_id"]: r["reason"] for r in rows}
    assert sorted(reasons.values()) == sorted(
        ["demographics", "min_reports", "min_classes", "imbalance",
         "eligible", "eligible"])
    assert "funnel: 6 -> 5 -> 2" in result.summary_text


def test_model_rows_cover_every_eligible_entity(small_run):
    result, _ = small_run
    eligible = {r["entity_id"] for r in result.funnel_rows if r["eligible"]}
    assert {r["entity_id"] for r in result.model_rows} == eligible
    per_entity = {}
    for row in result.model_rows:
        per_entity.setdefault(row["entity_id"], []).append(row["kind"])
        assert 0.0 <= row["cv_f1"] <= 1.0
        assert -1.0 <= row["cv_mcc"] <= 1.0
        assert row["cv_splits"] >= 2
    assert all(sorted(kinds) == ["dummy", "gbt", "logreg", "mlp"]
               for kinds in per_entity.values())
    doc = json.loads((result.out_dir / "models.json").read_text())
    assert set(doc["entities"]) == eligible
    for entry in doc["entities"].values():
        assert entry["best_kind"] in ("dummy", "logreg", "gbt", "mlp")


def test_store_artifact_rebuilds_identically(small_run):
    result, _ = small_run
    rebuilt = _rebuild_store(result.out_dir)
    live = result.drive.mstore
    assert rebuilt.entity_ids() == live.entity_ids()
    assert rebuilt.total_records() == live.total_records()
    eid = live.entity_ids()[0]
    assert rebuilt.events(eid) == live.events(eid)
    assert rebuilt.demographics(eid) == live.demographics(eid)


def test_rerun_reproduces_the_hash(small_run, tmp_path):
    result, cohort_path = small_run
    config = ExperimentConfig(seed=7, out=str(tmp_path / "out2"),
                              cohort=str(cohort_path), budget=5)
    again = run_experiment(config, write=False)
    assert again.digest == result.digest
    assert again.funnel_rows == result.funnel_rows
    # durations are wall clock and may differ; everything else must match
    strip = lambda rows: [{k: v for k, v in r.items() if k != "duration_s"}
                          for r in rows]
    assert strip(again.model_rows) == strip(result.model_rows)


def test_staged_commands_match_pipeline_hash(small_run, tmp_path, capsys):
    result, cohort_path = small_run
    out2 = tmp_path / "staged"
    shutil.copytree(result.out_dir, out2)
    for name in ("funnel.csv", "models.csv", "models.json", "stats.md",
                 "summary.md", "run_hash.txt"):
        (out2 / name).unlink()
    common = ["--out", str(out2), "--cohort", str(cohort_path),
              "--seed", "7", "--budget", "5"]
    assert main(["learn"] + common) == 0
    assert main(["evaluate"] + common) == 0
    assert main(["report"] + common) == 0
    capsys.readouterr()
    assert (out2 / "run_hash.txt").read_text().strip() == result.digest


# -- serving and exit codes ------------------------------------------------------


def _some_modeled_entity(result) -> str:
    doc = json.loads((result.out_dir / "models.json").read_text())
    return sorted(doc["entities"])[0]


def test_predict_in_process(small_run, capsys):
    result, _ = small_run
    eid = _some_modeled_entity(result)
    rc = main(["predict", "--out", str(result.out_dir), "--entity", eid,
               "--x", "0.0", "--y", "0.0", "--t", "21600"])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert doc["ok"] is True and doc["entity_id"] == eid
    assert doc["class"] in ("negative", "neutral", "positive")
    assert len(doc["probs"]) == 3


def test_predict_remote_over_socket(small_run, capsys):
    from valencelab.cli import _server_from_artifacts
    result, _ = small_run
    eid = _some_modeled_entity(result)
    handler, _ = _server_from_artifacts(result.out_dir)
    with SocketServer(handler) as srv:
        rc = main(["predict", "--out", str(result.out_dir), "--entity", eid,
                   "--host", srv.host, "--port", str(srv.port),
                   "--x", "1.0", "--y", "-1.0", "--t", "0"])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert doc["class"] in ("negative", "neutral", "positive")


def test_serve_command_starts_and_stops(small_run, capsys):
    result, _ = small_run
    rc = main(["serve", "--out", str(result.out_dir), "--max-seconds", "0.2"])
    assert rc == 0
    assert "serving on 127.0.0.1:" in capsys.readouterr().out


def test_exit_code_2_for_bad_configuration(tmp_path, capsys):
    rc = main(["pipeline", "--out", str(tmp_path / "o"),
               "--cohort", str(tmp_path / "nope.cfg")])
    assert rc == 2
    assert "configuration error" in capsys.readouterr().err


def test_exit_code_3_for_missing_artifacts(tmp_path, capsys):
    rc = main(["report", "--out", str(tmp_path / "empty")])
    assert rc == 3
    assert "pipeline error" in capsys.readouterr().err


def test_exit_code_4_for_cross_entity_prediction(small_run, capsys):
    result, _ = small_run
    doc = json.loads((result.out_dir / "models.json").read_text())
    target = sorted(doc["entities"])[0]
    other = next(eid for eid in result.drive.mstore.entity_ids()
                 if eid != target)
    rc = main(["predict", "--out", str(result.out_dir), "--entity", target,
               "--as-entity", other,
               "--x", "0.0", "--y", "0.0", "--t", "0"])
    assert rc == 4
    assert "authorization error" in capsys.readouterr().err
