from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from typer.testing import CliRunner

from cli import EXIT_CHECKPOINT, EXIT_INPUT, EXIT_USAGE, app
from deberta_lcf.checkpoint import save_checkpoint
from deberta_lcf.data import Vocab, to_semeval_xml, tokenize
from deberta_lcf.lcf import compute_srd
from deberta_lcf.model import build
from deberta_lcf.types import AspectSpan

from tests.conftest import FIXTURES_DIR, data_file, tiny_model_config, toy_annotations

runner = CliRunner()

SENTENCE = "Its size is ideal and the weight is acceptable"


def key_values(output: str) -> dict[str, str]:
    return dict(line.split("=", 1) for line in output.splitlines() if "=" in line)


def write_run_config(tmp_path: Path, **overrides: object) -> Path:
    dataset = tmp_path / "toy.xml"
    dataset.write_text(to_semeval_xml(toy_annotations()), encoding="utf-8")
    values: dict[str, object] = {
        "train_path": dataset,
        "test_path": dataset,
        "output_dir": tmp_path / "run",
        "layers": 1,
        "heads": 2,
        "d_model": 8,
        "d_ff": 16,
        "max_relative_distance": 4,
        "epochs": 2,
        "batch_size": 8,
        "dropout": 0.1,
        "val_fraction": 0.25,
        "seed": 3,
    }
    values.update(overrides)
    config = tmp_path / "run.conf"
    config.write_text("\n".join(f"{key} = {value}" for key, value in values.items()) + "\n", encoding="utf-8")
    return config


@pytest.fixture
def checkpoint(toy_vocab: Vocab, tmp_path: Path) -> Path:
    path = tmp_path / "model.ckpt"
    save_checkpoint(build(tiny_model_config(vocab_size=len(toy_vocab), alpha=1)), toy_vocab, path)
    return path


@pytest.mark.parametrize(
    "file_name, fmt, expected",
    [
        ("mini_semeval.xml", "semeval", "positive 2, negative 1, neutral 1, total 4"),
        ("mini_twitter.raw", "twitter", "positive 1, negative 1, neutral 1, total 3"),
    ],
)
def test_stats(file_name: str, fmt: str, expected: str) -> None:
    result = runner.invoke(app, ["stats", str(FIXTURES_DIR / file_name), "--format", fmt])

    assert result.exit_code == 0
    assert result.stdout.strip() == expected


def test_stats_missing_file(tmp_path: Path) -> None:
    assert runner.invoke(app, ["stats", str(tmp_path / "absent.xml")]).exit_code == EXIT_USAGE


def test_stats_parse_failure() -> None:
    result = runner.invoke(app, ["stats", str(FIXTURES_DIR / "malformed.xml")])
    assert result.exit_code == EXIT_INPUT


def test_stats_invalid_utf8_is_an_input_error(tmp_path: Path) -> None:
    path = tmp_path / "bad.raw"
    path.write_bytes(b"i love $T$\n\xff\xfe\n1\n")

    result = runner.invoke(app, ["stats", str(path), "--format", "twitter"])

    assert result.exit_code == EXIT_INPUT
    assert "not valid UTF-8" in result.output


def test_stats_official_laptop_file() -> None:
    result = runner.invoke(app, ["stats", str(data_file("Laptop_Train_v2.xml"))])
    assert result.stdout.startswith("positive 994, negative 870, neutral 464")


def test_stats_official_twitter_file() -> None:
    result = runner.invoke(app, ["stats", str(data_file("twitter_train.raw")), "--format", "twitter"])
    assert result.stdout.startswith("positive 1561, negative 1560, neutral 3127")


def test_train_writes_outputs_and_is_reproducible(tmp_path: Path) -> None:
    result = runner.invoke(app, ["train", "--config", str(write_run_config(tmp_path))])

    assert result.exit_code == 0, result.output
    run_dir = tmp_path / "run"
    assert {p.name for p in run_dir.iterdir()} == {"model.ckpt", "history.jsonl", "resolved.conf"}
    assert len((run_dir / "history.jsonl").read_text().splitlines()) == 2
    values = key_values(result.stdout)
    assert 0.0 <= float(values["test.accuracy"]) <= 1.0
    assert values["test.majority_baseline"] == "0.3750"

    history = (run_dir / "history.jsonl").read_bytes()
    checkpoint = (run_dir / "model.ckpt").read_bytes()
    rerun = runner.invoke(app, ["train", "--config", str(run_dir / "resolved.conf")])

    assert rerun.exit_code == 0, rerun.output
    assert (run_dir / "history.jsonl").read_bytes() == history
    assert (run_dir / "model.ckpt").read_bytes() == checkpoint


@pytest.mark.parametrize(
    "overrides",
    [{"hidden_size": 3}, {"heads": 3}, {"epochs": "many"}, {"train_path": "/nonexistent/train.xml"}],
)
def test_train_config_errors(overrides: dict[str, object], tmp_path: Path) -> None:
    result = runner.invoke(app, ["train", "--config", str(write_run_config(tmp_path, **overrides))])
    assert result.exit_code == EXIT_USAGE


def test_train_missing_config(tmp_path: Path) -> None:
    assert runner.invoke(app, ["train", "--config", str(tmp_path / "absent.conf")]).exit_code == EXIT_USAGE


def test_eval_prints_key_value_metrics(checkpoint: Path, tmp_path: Path) -> None:
    dataset = tmp_path / "toy.xml"
    dataset.write_text(to_semeval_xml(toy_annotations()), encoding="utf-8")

    result = runner.invoke(app, ["eval", "--ckpt", str(checkpoint), "--dataset", str(dataset)])

    assert result.exit_code == 0, result.output
    values = key_values(result.stdout)
    assert {"accuracy", "macro_f1", "positive.f1", "neutral.support"} <= set(values)
    assert all(len(values[key].split(".")[1]) == 4 for key in ("accuracy", "macro_f1"))


def test_eval_missing_checkpoint(tmp_path: Path) -> None:
    result = runner.invoke(
        app, ["eval", "--ckpt", str(tmp_path / "absent.ckpt"), "--dataset", str(FIXTURES_DIR / "mini_semeval.xml")]
    )
    assert result.exit_code == EXIT_USAGE


def test_eval_corrupt_checkpoint(checkpoint: Path) -> None:
    checkpoint.write_bytes(checkpoint.read_bytes()[:100])

    result = runner.invoke(
        app, ["eval", "--ckpt", str(checkpoint), "--dataset", str(FIXTURES_DIR / "mini_semeval.xml")]
    )
    assert result.exit_code == EXIT_CHECKPOINT


def test_predict(checkpoint: Path) -> None:
    result = runner.invoke(app, ["predict", "--ckpt", str(checkpoint), "--text", SENTENCE, "--aspect", "size"])

    assert result.exit_code == 0, result.output
    values = key_values(result.stdout)
    assert values["label"] in {"positive", "negative", "neutral"}
    assert abs(sum(float(values[label]) for label in ("positive", "negative", "neutral")) - 1.0) < 1e-5
    assert "note" not in values


def test_predict_aspect_not_found(checkpoint: Path) -> None:
    result = runner.invoke(app, ["predict", "--ckpt", str(checkpoint), "--text", SENTENCE, "--aspect", "battery"])
    assert result.exit_code == EXIT_INPUT


def test_predict_repeated_aspect_uses_first_occurrence(checkpoint: Path) -> None:
    result = runner.invoke(app, ["predict", "--ckpt", str(checkpoint), "--text", SENTENCE, "--aspect", "is"])

    assert result.exit_code == 0, result.output
    assert "using the first at character 9" in result.stdout


def test_dump_attention(checkpoint: Path, tmp_path: Path) -> None:
    out = tmp_path / "dump"
    result = runner.invoke(
        app,
        ["dump-attention", "--ckpt", str(checkpoint), "--text", SENTENCE, "--aspect", "weight", "--out", str(out)],
    )

    assert result.exit_code == 0, result.output
    matrices = sorted(out.glob("*_layer*_head*.csv"))
    assert {p.name.split("_")[0] for p in matrices} == {"global", "local", "fusion"}
    assert len(matrices) == 6
    for path in matrices:
        weights = pd.read_csv(path, index_col=0, float_precision="round_trip").to_numpy()
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-9)

    tokens = tokenize(SENTENCE)
    srd = pd.read_csv(out / "srd.csv", index_col=0)
    assert srd["srd"].tolist() == list(compute_srd(len(tokens), AspectSpan(6, 6)).values)

    lcf = pd.read_csv(out / "lcf.csv", index_col=0)
    assert ((lcf["cdm"] == 0.0) == (lcf["srd"] > 1)).all()
    assert lcf["cdm"].tolist().count(0.0) > 0


def test_dump_attention_aspect_offset_survives_case_folding(checkpoint: Path, tmp_path: Path) -> None:
    out = tmp_path / "dump"
    result = runner.invoke(
        app,
        ["dump-attention", "--ckpt", str(checkpoint), "--text", "İİ food is great", "--aspect", "FOOD"]
        + ["--out", str(out)],
    )

    assert result.exit_code == 0, result.output
    srd = pd.read_csv(out / "srd.csv", index_col=0)
    assert srd["srd"].tolist() == [1, 0, 1, 2]
    assert srd.index[1] == "food"


def test_dump_attention_aspect_not_found(checkpoint: Path, tmp_path: Path) -> None:
    result = runner.invoke(
        app,
        ["dump-attention", "--ckpt", str(checkpoint), "--text", SENTENCE, "--aspect", "battery"]
        + ["--out", str(tmp_path / "dump")],
    )
    assert result.exit_code == EXIT_INPUT


@pytest.mark.slow
def test_eval_of_overfit_checkpoint(tmp_path: Path) -> None:
    config = write_run_config(
        tmp_path,
        d_model=16,
        d_ff=32,
        epochs=300,
        learning_rate=5e-3,
        dropout=0.0,
        val_fraction=0.0,
        seed=0,
    )
    assert runner.invoke(app, ["train", "--config", str(config)]).exit_code == 0

    result = runner.invoke(
        app, ["eval", "--ckpt", str(tmp_path / "run" / "model.ckpt"), "--dataset", str(tmp_path / "toy.xml")]
    )

    assert result.exit_code == 0, result.output
    assert float(key_values(result.stdout)["accuracy"]) >= 0.95
