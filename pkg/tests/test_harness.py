from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from anonrev import cli
from anonrev.anonymizers import AnonymizerSpec
from anonrev.harness import (
    AE_DESK_PARAMS,
    ConfigError,
    DatasetConfig,
    DeanonConfig,
    ExperimentConfig,
    METRICS_HEADER,
    SplitConfig,
    StageError,
    anonymizer_label,
    config_hash,
    default_suite,
    materialize_dataset,
    metrics_csv,
    run_experiment,
    run_suite,
)

# Small enough to run in seconds, large enough for a valid split and PCA.
DATASET = {"kind": "synthetic", "identity_count": 14, "images_per_identity": 4,
           "resolution": 16, "seed": 7}
SPLIT = {"background_count": 4, "test_identity_count": 4, "seed": 7}


def _experiment(name="exp", protocols=("clear_baseline", "naive", "reversal"),
                deanonymizer=None, **extra):
    obj = {
        "name": name,
        "seed": 7,
        "dataset": dict(DATASET),
        "split": dict(SPLIT),
        "anonymizer": {"method": "block_permute", "params": {"block_size": 8}, "key": 11},
        "deanonymizer": deanonymizer or {"kind": "learn_permutation", "params": {}},
        "protocols": list(protocols),
        "pca_components": 16,
        "background_components": 4,
    }
    obj.update(extra)
    return obj


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def test_config_round_trips_through_json():
    config = ExperimentConfig.from_json(_experiment())
    again = ExperimentConfig.from_json(config.to_json())
    assert again.to_json() == config.to_json()


def test_config_rejects_bad_name():
    with pytest.raises(ConfigError, match="filesystem-safe"):
        ExperimentConfig.from_json(_experiment(name="a/b"))
    with pytest.raises(ConfigError, match="filesystem-safe"):
        ExperimentConfig.from_json(_experiment(name=""))


def test_config_rejects_unknown_protocol():
    with pytest.raises(ConfigError, match="unknown protocol"):
        ExperimentConfig.from_json(_experiment(protocols=["oracle"]))
    with pytest.raises(ConfigError, match="at least one protocol"):
        ExperimentConfig.from_json(_experiment(protocols=[]))


def test_config_reversal_needs_deanonymizer():
    with pytest.raises(ConfigError, match="requires a deanonymizer"):
        ExperimentConfig.from_json(
            _experiment(protocols=["reversal"], deanonymizer={"kind": "none"})
        )


def test_config_overrides_need_reversal():
    obj = _experiment(protocols=["naive"], deanonymizer={"kind": "none"})
    obj["train_anonymizer_override"] = {"method": "pixelate", "params": {"size": 4}}
    with pytest.raises(ConfigError, match="only valid with the reversal"):
        ExperimentConfig.from_json(obj)


def test_config_derives_missing_seeds_from_root():
    obj = _experiment()
    del obj["anonymizer"]["key"]
    a = ExperimentConfig.from_json(obj)
    b = ExperimentConfig.from_json(obj)
    assert a.anonymizer.key == b.anonymizer.key
    obj2 = dict(obj, seed=8)
    c = ExperimentConfig.from_json(obj2)
    assert c.anonymizer.key != a.anonymizer.key


def test_config_malformed_raises_config_error():
    with pytest.raises(ConfigError, match="malformed"):
        ExperimentConfig.from_json({"name": "x"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(_experiment(dataset={"kind": "martian"}))


def test_deanon_config_labels():
    assert DeanonConfig("autoencoder", dict(AE_DESK_PARAMS)).label() == "autoencoder"
    conv = DeanonConfig("autoencoder", {**AE_DESK_PARAMS, "with_linear": False})
    assert conv.label() == "autoencoder_conv"
    assert DeanonConfig("resample", {"mode": "bicubic"}).label() == "resample_bicubic"
    assert DeanonConfig("wiener", {}).label() == "wiener"


def test_deanon_config_rejects_unknown_kind():
    with pytest.raises(ConfigError, match="deanonymizer kind"):
        DeanonConfig.from_json({"kind": "magic"}, 0)


def test_anonymizer_label_is_sorted_and_stable():
    spec = AnonymizerSpec("dp_pix", {"m": 4, "epsilon": 5, "b": 2}, key=1)
    assert anonymizer_label(spec) == "dp_pix(b=2;epsilon=5;m=4)"
    assert anonymizer_label(AnonymizerSpec("eye_mask", {})) == "eye_mask()"


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


# ---------------------------------------------------------------------------
# Dataset materialization
# ---------------------------------------------------------------------------


def test_materialize_synthetic_is_cached(tmp_path):
    config = DatasetConfig.from_json(dict(DATASET), 7)
    m1, fp1 = materialize_dataset(config, tmp_path)
    stamp = {Path(e.path): Path(e.path).stat().st_mtime_ns for e in m1.entries}
    m2, fp2 = materialize_dataset(config, tmp_path)
    assert fp1 == fp2
    assert [e.path for e in m2.entries] == [e.path for e in m1.entries]
    # Cached files are reused, not regenerated.
    assert all(Path(e.path).stat().st_mtime_ns == stamp[Path(e.path)] for e in m2.entries)


def test_materialize_manifest_requires_existing_root(tmp_path):
    config = DatasetConfig.from_json({"kind": "manifest", "root": str(tmp_path / "nope")}, 0)
    with pytest.raises(ValueError):
        materialize_dataset(config, tmp_path)


def test_dataset_config_validates():
    with pytest.raises(ConfigError, match="kind"):
        DatasetConfig.from_json({"kind": "weird"}, 0)
    with pytest.raises(ConfigError, match="root"):
        DatasetConfig.from_json({"kind": "manifest"}, 0)


# ---------------------------------------------------------------------------
# run_experiment
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def shared_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("cache")


def test_run_experiment_end_to_end(shared_cache, tmp_path):
    config = ExperimentConfig.from_json(_experiment())
    report = run_experiment(config, shared_cache, tmp_path / "out")
    # A learned permutation reverses block shuffling exactly.
    assert report["protocols"]["reversal"]["mean_accuracy"] == report["protocols"][
        "clear_baseline"
    ]["mean_accuracy"]
    assert report["mean_ssim_deanonymized"] == pytest.approx(1.0, abs=1e-12)
    assert report["reversibility"]["score"] == pytest.approx(1.0, abs=1e-12)
    assert report["deanon_fit"]["confidence"] == 1.0
    assert set(report["timings"]) >= {"dataset", "split", "anonymize", "train_deanon",
                                      "recognition", "metrics"}
    out = tmp_path / "out"
    assert (out / "report.json").is_file()
    assert (out / "metrics.csv").is_file()
    assert (out / "outcomes" / "reversal.csv").is_file()
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(METRICS_HEADER)


def test_rerun_is_byte_identical_and_cache_hits(shared_cache, tmp_path):
    config = ExperimentConfig.from_json(_experiment())
    run_experiment(config, shared_cache, tmp_path / "a")
    report = run_experiment(config, shared_cache, tmp_path / "b")
    assert report["cache"] == {"anonymized_test": True, "anonymized_train": True, "model": True}
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (
        tmp_path / "b" / "metrics.csv"
    ).read_bytes()


def test_rows_cover_requested_protocols_only(shared_cache, tmp_path):
    obj = _experiment(name="naive-only", protocols=["naive"], deanonymizer={"kind": "none"})
    report = run_experiment(ExperimentConfig.from_json(obj), shared_cache, tmp_path / "o")
    assert [r[2] for r in report["rows"]] == ["naive"]
    assert report["rows"][0][1] == "none"
    assert report["reversibility"] is None
    assert report["mean_ssim_deanonymized"] is None


def test_parrot_protocol_row(shared_cache):
    obj = _experiment(name="parrot", protocols=["naive", "parrot"], deanonymizer={"kind": "none"})
    report = run_experiment(ExperimentConfig.from_json(obj), shared_cache)
    protocols = [r[2] for r in report["rows"]]
    assert protocols == ["naive", "parrot"]
    # Enrolling anonymized images helps against a keyed permutation.
    assert (
        report["protocols"]["parrot"]["mean_accuracy"]
        >= report["protocols"]["naive"]["mean_accuracy"]
    )


def test_interpolate_gray_cell_runs_without_training(shared_cache):
    obj = _experiment(
        name="snow",
        deanonymizer={"kind": "interpolate_gray", "params": {}},
    )
    obj["anonymizer"] = {"method": "dp_snow", "params": {"delta": 0.3}, "noise_seed": 5}
    report = run_experiment(ExperimentConfig.from_json(obj), shared_cache)
    assert "model" not in report["cache"]
    assert report["protocols"]["reversal"]["mean_ssim"] > report["protocols"]["naive"]["mean_ssim"]


def test_stage_error_carries_stage_name(shared_cache):
    # 24 training images cannot support 1000 PCA components.
    obj = _experiment(name="too-many-pcs")
    obj["pca_components"] = 1000
    with pytest.raises(StageError) as err:
        run_experiment(ExperimentConfig.from_json(obj), shared_cache)
    assert err.value.stage == "recognition"
    assert "exceed sample count" in err.value.cause


def test_stage_error_on_missing_manifest(tmp_path):
    obj = _experiment(name="missing-data")
    obj["dataset"] = {"kind": "manifest", "root": str(tmp_path / "absent")}
    with pytest.raises(StageError) as err:
        run_experiment(ExperimentConfig.from_json(obj), tmp_path)
    assert err.value.stage == "dataset"


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def test_run_suite_continues_past_failures(shared_cache, tmp_path):
    bad = _experiment(name="bad")
    bad["pca_components"] = 1000
    suite = {"experiments": [_experiment(name="good"), bad]}
    result = run_suite(suite, shared_cache, tmp_path / "suite")
    assert [r["name"] for r in result["reports"]] == ["good"]
    assert len(result["failures"]) == 1
    assert result["failures"][0] == {
        "name": "bad",
        "stage": "recognition",
        "cause": result["failures"][0]["cause"],
    }
    agg = (tmp_path / "suite" / "aggregate.csv").read_text().splitlines()
    assert agg[0] == ",".join(METRICS_HEADER)
    assert len(agg) == 1 + 3  # header + the good experiment's three protocols
    payload = json.loads((tmp_path / "suite" / "suite_report.json").read_text())
    assert payload["n_failed"] == 1


def test_run_suite_rejects_duplicates_and_empty(shared_cache, tmp_path):
    with pytest.raises(ConfigError, match="unique"):
        run_suite({"experiments": [_experiment(), _experiment()]}, shared_cache, tmp_path)
    with pytest.raises(ConfigError, match="no experiments"):
        run_suite({"experiments": []}, shared_cache, tmp_path)


def test_suite_rerun_aggregate_is_byte_identical(shared_cache, tmp_path):
    suite = {"experiments": [_experiment(name="rep")]}
    run_suite(suite, shared_cache, tmp_path / "s1")
    run_suite(suite, shared_cache, tmp_path / "s2")
    assert (tmp_path / "s1" / "aggregate.csv").read_bytes() == (
        tmp_path / "s2" / "aggregate.csv"
    ).read_bytes()


def test_default_suite_covers_every_cell():
    suite = default_suite(dict(DATASET), dict(SPLIT), seed=3)
    experiments = suite["experiments"]
    # 12 anonymizers x 2 autoencoder variants + 17 specialized cells.
    assert len(experiments) == 41
    names = [e["name"] for e in experiments]
    assert len(set(names)) == len(names)
    assert all(e["protocols"] == ["reversal"] for e in experiments)
    for e in experiments:
        ExperimentConfig.from_json(e)  # every entry must be valid


def test_metrics_csv_header_is_pinned():
    text = metrics_csv([])
    assert text == "anonymizer,deanonymizer,protocol,mean_acc,ci,ssim,reversibility\n"


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> str:
    path.write_text(json.dumps(obj))
    return str(path)


def test_cli_generate(tmp_path, capsys):
    config = _write_json(tmp_path / "d.json", DATASET)
    code = cli.main(["generate", "--config", config, "--out", str(tmp_path / "data")])
    assert code == 0
    assert "generated 56 images" in capsys.readouterr().out
    assert (tmp_path / "data" / "manifest.csv").is_file()


def test_cli_anonymize(tmp_path, capsys):
    config = _write_json(
        tmp_path / "a.json",
        {"seed": 7, "dataset": DATASET,
         "anonymizer": {"method": "pixelate", "params": {"size": 4}}},
    )
    code = cli.main(["anonymize", "--config", config, "--out", str(tmp_path / "anon"),
                     "--cache", str(tmp_path / "cache")])
    assert code == 0
    assert len(list((tmp_path / "anon").rglob("*.png"))) == 56


def test_cli_evaluate_and_report(tmp_path, capsys):
    config = _write_json(tmp_path / "e.json", _experiment(name="cli-eval"))
    code = cli.main(["evaluate", "--config", config, "--out", str(tmp_path / "out"),
                     "--cache", str(tmp_path / "cache")])
    assert code == 0
    out = capsys.readouterr().out
    assert "reversal: accuracy=" in out
    assert "reversibility: 1.0000" in out

    code = cli.main(["report", "--config", str(tmp_path / "out" / "report.json"),
                     "--out", str(tmp_path / "again")])
    assert code == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (
        tmp_path / "out" / "metrics.csv"
    ).read_bytes()


def test_cli_train_deanon(tmp_path, capsys):
    config = _write_json(tmp_path / "t.json", _experiment(name="cli-train"))
    code = cli.main(["train-deanon", "--config", config, "--out", str(tmp_path / "model"),
                     "--cache", str(tmp_path / "cache")])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["kind"] == "learn_permutation"
    assert (tmp_path / "model" / "details.json").is_file()


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["evaluate", "--config", str(tmp_path / "missing.json"),
                     "--out", str(tmp_path / "o")]) == 1
    bad = _experiment(name="bad-pca")
    bad["pca_components"] = 1000
    config = _write_json(tmp_path / "bad.json", bad)
    assert cli.main(["evaluate", "--config", config, "--out", str(tmp_path / "o"),
                     "--cache", str(tmp_path / "cache")]) == 2
    capsys.readouterr()


def test_cli_suite_exit_code_on_failure(tmp_path, capsys):
    bad = _experiment(name="bad")
    bad["pca_components"] = 1000
    suite = _write_json(tmp_path / "s.json",
                        {"experiments": [_experiment(name="ok"), bad]})
    code = cli.main(["suite", "--config", suite, "--out", str(tmp_path / "out"),
                     "--cache", str(tmp_path / "cache")])
    assert code == 2
    captured = capsys.readouterr()
    assert "1 failed" in captured.out
    assert "FAILED bad at stage recognition" in captured.err


def test_cli_report_rejects_non_reports(tmp_path, capsys):
    config = _write_json(tmp_path / "r.json", {"hello": 1})
    assert cli.main(["report", "--config", config, "--out", str(tmp_path / "o")]) == 1
    capsys.readouterr()
