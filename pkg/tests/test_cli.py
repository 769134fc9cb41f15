import subprocess
import sys

import pytest

from confcap import cli
from confcap.config import CorpusSettings, RunConfig, StageSettings, save_config


def small_config(tmp_path, **kw):
    cfg = RunConfig(
        corpus=CorpusSettings(n_well=3, n_weak=4, n_val=2, n_test=2),
        stage1=StageSettings(epochs=1, lr=1e-3, batch_size=2),
        **kw,
    )
    path = tmp_path / "config.yaml"
    save_config(cfg, path)
    return path


def test_no_command_exits_one(capsys):
    assert cli.main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_command_exits_one():
    with pytest.raises(SystemExit) as exc:
        cli.main(["teleport"])
    assert exc.value.code == 1


def test_unknown_flag_exits_one(tmp_path):
    path = small_config(tmp_path)
    with pytest.raises(SystemExit) as exc:
        cli.main(["--config", str(path), "init", "--frobnicate"])
    assert exc.value.code == 1


def test_invalid_stage_exits_one(tmp_path):
    path = small_config(tmp_path)
    with pytest.raises(SystemExit) as exc:
        cli.main(["--config", str(path), "train", "--stage", "2"])
    assert exc.value.code == 1


def test_invalid_level_exits_one(tmp_path):
    path = small_config(tmp_path)
    with pytest.raises(SystemExit) as exc:
        cli.main(["--config", str(path), "generate", "--caption", "a dog barks", "--level", "7"])
    assert exc.value.code == 1


def test_missing_config_exits_two(tmp_path, capsys):
    assert cli.main(["--config", str(tmp_path / "nope.yaml"), "stats"]) == 2
    err = capsys.readouterr().err
    assert "config file not found" in err and "confcap init" in err


def test_init_is_idempotent(tmp_path, capsys):
    path = small_config(tmp_path)
    assert cli.main(["--config", str(path), "init"]) == 0
    corpus = tmp_path / "corpus"
    names = sorted(p.relative_to(corpus) for p in corpus.rglob("*") if p.is_file())
    assert (corpus / "well.manifest") in [corpus / n for n in names]
    before = {n: (corpus / n).read_bytes() for n in names}
    assert cli.main(["--config", str(path), "init"]) == 0
    after = {n: (corpus / n).read_bytes() for n in names}
    assert before == after


def test_init_writes_default_config(tmp_path, capsys):
    path = tmp_path / "config.yaml"
    assert cli.main(["--config", str(path), "init"]) == 0
    assert path.exists()
    out = capsys.readouterr().out
    assert "wrote default config" in out


def test_step_before_prerequisite_exits_two(tmp_path, capsys):
    path = small_config(tmp_path)
    assert cli.main(["--config", str(path), "init"]) == 0
    assert cli.main(["--config", str(path), "stats"]) == 2
    err = capsys.readouterr().err
    assert "missing artifact" in err and "confcap train --stage 1" in err


def test_generate_without_checkpoint_names_it(tmp_path, capsys):
    path = small_config(tmp_path)
    assert cli.main(["--config", str(path), "init"]) == 0
    code = cli.main(["--config", str(path), "generate", "--caption", "a dog barks"])
    assert code == 2
    err = capsys.readouterr().err
    assert "checkpoint" in err and "gen-train" in err
    assert "gen" in err  # the missing path itself is part of the message


def test_bad_caption_exits_two(tmp_path, capsys):
    path = small_config(tmp_path)
    assert cli.main(["--config", str(path), "init"]) == 0
    code = cli.main(["--config", str(path), "eval-captions"])
    assert code == 2  # stage-3 checkpoint does not exist yet


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "confcap.cli"], capture_output=True, text=True
    )
    assert proc.returncode == 1
    assert "usage" in proc.stderr
