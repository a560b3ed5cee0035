import json

import pandas as pd
import pytest
import torch

from config import DiffusionTrainConfig
from corpus import read_manifest, write_corpus
from diffusion import make_schedule, save_checkpoint
from pipeline_manager import main
from sdm_network import build_denoiser
from tests.conftest import TOY_CONFIG, toy_overrides


def _cli(*args, overrides=()):
    argv = list(args) + ["--config", str(TOY_CONFIG)]
    for item in overrides:
        argv += ["--set", item]
    return main(argv)


@pytest.fixture
def cli_overrides(phantom_cohort, tmp_path):
    return toy_overrides(phantom_cohort, tmp_path / "out")


@pytest.fixture
def tiny_checkpoint(tmp_path):
    cfg = DiffusionTrainConfig(image_size=32, base_channels=8, channel_mults=[1, 2], timesteps=5,
                               beta_start=1e-3, beta_end=0.1)
    torch.manual_seed(0)
    return save_checkpoint(tmp_path / "tiny.pt", build_denoiser(cfg),
                           cfg, make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end), step=0)


def test_unknown_subcommand_exits_with_config_code():
    assert main(["teleport"]) == 2


def test_stochastic_stage_requires_seed(cli_overrides):
    assert _cli("build-corpus", overrides=cli_overrides) == 2


def test_run_matrix_with_missing_synthetic_set(cli_overrides, capsys):
    assert _cli("run-matrix", "--seed", "1", overrides=cli_overrides) == 2
    err = capsys.readouterr().err
    response = json.loads(err[err.index("{\n"):])
    assert response["status"] == "ConfigError"
    assert "synthetic" in response["error"]


def test_bad_override_is_a_config_error(cli_overrides):
    assert _cli("ingest", overrides=cli_overrides + ["diffusion.image_size=48"]) == 2


def test_failures_are_logged(cli_overrides, tmp_path):
    _cli("build-corpus", overrides=cli_overrides)
    log = (tmp_path / "out" / "logs" / "pipeline.log").read_text()
    assert "STAGE_FAILED | build-corpus | ConfigError" in log
    assert "Exit: 2" in log


def test_fid_of_a_set_with_itself(cli_overrides, tmp_path, toy_pairs):
    write_corpus(toy_pairs, tmp_path, "train")
    out = tmp_path / "fid.json"
    assert _cli("fid", "--real", str(tmp_path / "train"), "--synth", str(tmp_path / "train"), "--out", str(out),
                overrides=cli_overrides) == 0
    results = json.loads(out.read_text())["results"]
    assert all(r["fid"] <= 1e-6 for r in results)


def test_stage_chain_on_phantom_cohort(cli_overrides, tmp_path):
    out = tmp_path / "out"
    assert _cli("ingest", overrides=cli_overrides) == 0
    series = pd.read_csv(out / "ingest" / "series.csv")
    assert len(series) == 3 and (series["in_grid"] >= 1).all()

    assert _cli("build-masks", overrides=cli_overrides) == 0
    assert (out / "catalog" / "manifest.csv").exists()

    assert _cli("build-corpus", "--seed", "4", overrides=cli_overrides) == 0
    train, test = read_manifest(out / "corpus" / "train"), read_manifest(out / "corpus" / "test")
    assert train["patient_id"].nunique() == 2 and test["patient_id"].nunique() == 1
    assert not set(train["patient_id"]) & set(test["patient_id"])

    log = (out / "logs" / "pipeline.log").read_text()
    for stage in ("ingest", "build-masks", "build-corpus"):
        assert f"STAGE_OK | {stage}" in log


def test_make_phantoms(cli_overrides, tmp_path):
    assert _cli("make-phantoms", "--out", str(tmp_path / "cohort"), "--patients", "2", "--seed", "1",
                overrides=cli_overrides) == 0
    assert len(list((tmp_path / "cohort" / "subset0").glob("*.mhd"))) == 2
    assert (tmp_path / "cohort" / "annotations.csv").exists()


def test_sample_is_reproducible(cli_overrides, tmp_path, toy_pairs, tiny_checkpoint):
    write_corpus(toy_pairs, tmp_path, "train")
    runs = []
    for name in ("s1", "s2"):
        assert _cli("sample", "--checkpoint", str(tiny_checkpoint), "--masks", str(tmp_path / "train"),
                    "--out", str(tmp_path / name), "--n-nodule", "2", "--n-clean", "2", "--seed", "3",
                    overrides=cli_overrides) == 0
        runs.append(read_manifest(tmp_path / name))
    pd.testing.assert_frame_equal(runs[0], runs[1])
    for rel in runs[0]["image_path"]:
        assert (tmp_path / "s1" / rel).read_bytes() == (tmp_path / "s2" / rel).read_bytes()


def test_train_task_and_evaluate(cli_overrides, tmp_path, toy_pairs):
    corpus = tmp_path / "corpus"
    write_corpus([p for p in toy_pairs if p.patient_id != "p3"], corpus, "train")
    write_corpus([p for p in toy_pairs if p.patient_id == "p3"], corpus, "test")
    model = tmp_path / "models" / "detection.pt"
    assert _cli("train-task", "--task", "detection", "--corpus", str(corpus), "--out", str(model), "--seed", "2",
                overrides=cli_overrides) == 0
    assert _cli("evaluate", "--model", str(model), "--corpus", str(corpus), "--seed", "2",
                overrides=cli_overrides) == 0
    metrics = pd.read_csv(tmp_path / "models" / "metrics_detection.csv")
    assert 0.0 <= metrics.loc[0, "accuracy"] <= 1.0


@pytest.mark.slow
def test_full_matrix_smoke(cli_overrides, tmp_path):
    out = tmp_path / "out"
    for stage in (["ingest"], ["build-masks"], ["build-corpus", "--seed", "7"], ["train-diffusion", "--seed", "7"]):
        assert _cli(*stage, overrides=cli_overrides) == 0
    checkpoint = str(out / "diffusion" / "checkpoint.pt")
    assert _cli("sample", "--checkpoint", checkpoint, "--out", str(out / "synthetic_sdm"), "--seed", "7",
                overrides=cli_overrides) == 0
    assert _cli("sample", "--checkpoint", checkpoint, "--out", str(out / "synthetic_external"),
                "--origin-tag", "synthetic_external", "--seed", "8", overrides=cli_overrides) == 0
    assert _cli("run-matrix", "--seed", "7", overrides=cli_overrides) == 0
    assert _cli("report", overrides=cli_overrides) == 0

    experiments = out / "experiments"
    table = pd.read_csv(experiments / "table.csv")
    assert set(table["row"]) == {"A", "B", "C"}
    assert set(table["task"]) == {"I", "II"}
    assert (table.loc[table["row"] == "A", "p_value"] == "-").all()
    assert "two-sided" in (experiments / "report.txt").read_text()
