import os
from pathlib import Path

import pytest

from sparse_aqa import cli, main
from sparse_aqa.gradcheck import GradAudit
from sparse_aqa.loader import load_checkpoint


SMALL_RUN = """
seed = 7
mode = "dnla_mu_cat"
clip_len = 8
channels = [4, 4, 6]
temporal_kernel = 3
vfd_out_len = 4
hidden = [8, 4]
epochs = 1
gradcheck_samples = 3
"""


def _write(path: Path, text: str) -> str:
    path.write_text(text)
    return str(path)


def test_synth_and_preprocess(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    spec = _write(tmp_path / "synth.toml", "n_samples = 4\nclip_len = 4\nmissing_rate = 0.0\n")
    corpus = str(tmp_path / "corpus")
    assert cli.main(["synth", "--config", spec, "--seed", "9", "--out", corpus]) == 0
    assert "4 samples written" in capsys.readouterr().out

    code = cli.main(
        [
            "preprocess",
            "--input", os.path.join(corpus, "poses"),
            "--labels", os.path.join(corpus, "labels.csv"),
            "--out", str(tmp_path / "clean"),
            "--workers", "2",
        ]
    )
    assert code == 0
    assert "4 samples written, 0 skipped" in capsys.readouterr().out
    assert len([n for n in os.listdir(tmp_path / "clean") if n.endswith(".seq")]) == 4


def test_train_and_eval(synth_corpus: str, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    clean = os.path.join(synth_corpus, "clean")
    config = _write(
        tmp_path / "run.toml",
        SMALL_RUN + f'data_dir = "{clean}"\nlabels = "{os.path.join(clean, "labels.csv")}"\n',
    )
    out = str(tmp_path / "run")
    assert cli.main(["train", "--config", config, "--out", out, "--mode", "nla_emb"]) == 0
    assert "best checkpoint from epoch 1" in capsys.readouterr().out
    assert load_checkpoint(os.path.join(out, main.CHECKPOINT_FILE)).config.mode == "nla_emb"

    assert cli.main(["eval", "--checkpoint", os.path.join(out, main.CHECKPOINT_FILE)]) == 0
    printed = capsys.readouterr().out
    assert "n_samples: 10" in printed
    assert "spearman: " in printed


def test_gradcheck_prints_table(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = _write(tmp_path / "run.toml", SMALL_RUN)
    assert cli.main(["gradcheck", "--config", config]) == 0

    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["group", "max_rel_error", "status"]
    assert len(lines) > 1
    assert all(line.endswith("ok") for line in lines[1:])


def test_gradcheck_failure_exit_code(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch, capsys: pytest.CaptureFixture[str]
) -> None:
    monkeypatch.setattr(
        cli, "cmd_gradcheck", lambda cfg: [GradAudit("mlp.score_w", 0.5, 2, False)]
    )
    assert cli.main(["gradcheck", "--config", _write(tmp_path / "run.toml", SMALL_RUN)]) == 4
    assert "FAIL" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv,expected",
    [
        (["train"], 1),
        (["preprocess", "--input", "/nonexistent/poses", "--out", "/tmp/x"], 2),
        (["eval", "--checkpoint", "/nonexistent/checkpoint.aqa"], 2),
        (["synth"], 1),
    ],
    ids=["train without config", "missing input", "missing checkpoint", "synth without output"],
)
def test_exit_codes(argv: list[str], expected: int) -> None:
    assert cli.main(argv) == expected


def test_invalid_config_exit_code(tmp_path: Path) -> None:
    config = _write(tmp_path / "bad.toml", "seed = 1\nquantile = 1.5\n")
    assert cli.main(["gradcheck", "--config", config]) == 1

    config = _write(tmp_path / "nested.toml", "seed = 1\n[model]\nhidden = [4, 4]\n")
    assert cli.main(["gradcheck", "--config", config]) == 1


@pytest.mark.parametrize(
    "argv",
    [
        ["gradcheck", "--seed", str(2**64)],
        ["gradcheck", "--seed", "-1"],
        ["train", "--mode", "bogus"],
        ["preprocess", "--out", "/tmp/x"],
        ["unknown"],
    ],
    ids=["seed too large", "negative seed", "unknown mode", "missing input flag", "unknown command"],
)
def test_usage_errors_exit_with_configuration_code(
    argv: list[str], capsys: pytest.CaptureFixture[str]
) -> None:
    assert cli.main(argv) == 1
    assert "usage: sparse-aqa" in capsys.readouterr().err
